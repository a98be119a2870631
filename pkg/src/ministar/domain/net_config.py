"""Network hyperparameters and the named size profiles."""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ministar.errors import ConfigError

# fields that define the reduced architecture; "mini" pins all of them
ARCHITECTURE_FIELDS = (
    "batch_size", "sequence_length", "max_entities", "max_selected", "minimap_size",
    "embedding_size", "map_channels", "scalar_encoder_fc_input", "scalar_context_fc_input",
    "scalar_feature_size", "entity_embedding_size", "lstm_hidden_dim", "lstm_layers",
    "n_resblocks", "original_1024", "original_512", "original_256", "original_128",
    "original_64", "original_32", "context_size", "location_head_max_map_channels",
    "autoregressive_embedding_size", "baseline_input_size", "league_learner_num", "actorloop_num",
)


class NetConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    batch_size: int = Field(96, ge=1)
    sequence_length: int = Field(64, ge=1)
    max_entities: int = Field(32, ge=6)
    max_selected: int = Field(384, ge=1)
    minimap_size: int = Field(64, ge=8)
    embedding_size: int = Field(1543, ge=1)
    map_channels: int = Field(18, ge=1)
    scalar_encoder_fc_input: int = Field(864, ge=1)
    scalar_context_fc_input: int = Field(448, ge=1)
    scalar_feature_size: int = Field(7327, ge=1)
    entity_embedding_size: int = Field(64, ge=1)
    lstm_hidden_dim: int = Field(128, ge=1)
    lstm_layers: int = Field(1, ge=1)
    n_resblocks: int = Field(4, ge=0)
    original_1024: int = 256
    original_512: int = 128
    original_256: int = 64
    original_128: int = 48
    original_64: int = 32
    original_32: int = 16
    context_size: int = Field(128, ge=1)
    location_head_max_map_channels: int = Field(32, ge=1)
    autoregressive_embedding_size: int = Field(256, ge=1)
    baseline_input_size: int = Field(1152, ge=1)
    league_learner_num: int = Field(4, ge=1)
    actorloop_num: int = Field(512, ge=1)

    max_delay: int = Field(4, ge=1)
    transformer_layers: int = Field(3, ge=1)
    transformer_heads: int = Field(2, ge=1)
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    temperature_action_type: float = Field(1.0, gt=0)
    temperature_delay: float = Field(1.0, gt=0)
    temperature_queue: float = Field(1.0, gt=0)
    temperature_selected_units: float = Field(1.0, gt=0)
    temperature_target_unit: float = Field(1.0, gt=0)
    temperature_location: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _check_widths(self) -> "NetConfig":
        if self.scalar_embedding_size <= 0:
            raise ValueError(f"embedding_size {self.embedding_size} leaves no room for the scalar embedding")
        if self.baseline_scalar_size <= 0 or (self.baseline_input_size - self.lstm_hidden_dim - self.original_256) % 2:
            raise ValueError(f"baseline_input_size {self.baseline_input_size} cannot split into two scalar projections")
        if self.minimap_size % 8:
            raise ValueError(f"minimap_size {self.minimap_size} must be divisible by 8")
        if self.entity_embedding_size % self.transformer_heads:
            raise ValueError("entity_embedding_size must split evenly across transformer heads")
        return self

    @property
    def scalar_embedding_size(self) -> int:
        """Width of the scalar embedding; entity and spatial embeddings take the rest of embedding_size."""
        return self.embedding_size - 2 * self.original_256

    @property
    def baseline_scalar_size(self) -> int:
        return (self.baseline_input_size - self.lstm_hidden_dim - self.original_256) // 2

    @property
    def map_skip_size(self) -> int:
        return self.minimap_size // 8

    def temperature(self, head: str) -> float:
        return getattr(self, f"temperature_{head}")


PROFILES: dict[str, dict] = {
    "mini": {},
    "tiny": dict(
        batch_size=4, sequence_length=8, max_entities=8, max_selected=4, minimap_size=16,
        embedding_size=64, map_channels=8, scalar_encoder_fc_input=32, scalar_context_fc_input=16,
        scalar_feature_size=32, entity_embedding_size=16, lstm_hidden_dim=32, lstm_layers=1,
        n_resblocks=1, original_1024=64, original_512=32, original_256=16, original_128=12,
        original_64=8, original_32=8, context_size=16, location_head_max_map_channels=4,
        autoregressive_embedding_size=32, baseline_input_size=80, league_learner_num=4, actorloop_num=16,
    ),
}


def profile(name: str, **overrides) -> NetConfig:
    try:
        base = PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}", key="profile") from None
    return NetConfig(**{**base, **overrides})
