"""The policy network: encoders, LSTM core, autoregressive heads, baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from ministar.domain.encoders import EntityEncoder, ScalarEncoder, SpatialEncoder
from ministar.domain.heads import (
    ActionTypeHead,
    Baseline,
    DelayHead,
    HeadOutput,
    LocationHead,
    QueueHead,
    SelectedUnitsHead,
    TargetUnitHead,
)
from ministar.domain.net_config import NetConfig
from ministar.drivers.microrts import (
    QUEUEABLE,
    SELECTS_UNITS,
    TARGETS_LOCATION,
    TARGETS_UNIT,
    ActionMasks,
    ActionType,
    ArgsAction,
    MsState,
)
from ministar.errors import DimensionError
from ministar.ndgrad import ops
from ministar.ndgrad.nn import LSTM, Module
from ministar.ndgrad.tensor import Tensor

HEAD_NAMES = ("action_type", "delay", "queue", "selected_units", "target_unit", "location")

HeadValue = Union[HeadOutput, list[HeadOutput]]


@dataclass(frozen=True)
class HeadRecord:
    """A head's logits, mask and choice frozen to numpy for storage."""

    logits: np.ndarray
    mask: np.ndarray
    index: Optional[int]
    used: bool

    @classmethod
    def of(cls, out: HeadOutput) -> "HeadRecord":
        return cls(out.logits.numpy(), out.mask.copy(), out.index, out.used)

    def log_prob(self) -> float:
        if self.index is None:
            return 0.0
        return float(ops.masked_log_softmax_np(self.logits.astype(np.float64), self.mask)[self.index])


@dataclass(frozen=True)
class HiddenState:
    layers: tuple[tuple[Tensor, Tensor], ...]

    def arrays(self) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
        return tuple((h.numpy(), c.numpy()) for h, c in self.layers)

    @classmethod
    def from_arrays(cls, arrays) -> "HiddenState":
        return cls(tuple((Tensor(h), Tensor(c)) for h, c in arrays))


@dataclass
class PolicyOutput:
    action: ArgsAction
    heads: dict[str, HeadValue]
    hidden: HiddenState
    lstm_output: Tensor
    embedded_scalar: Tensor
    scalar_context: Tensor

    @property
    def action_type(self) -> int:
        return int(self.action.action_type)

    def records(self) -> dict[str, Union[HeadRecord, list[HeadRecord]]]:
        out = {}
        for name, value in self.heads.items():
            out[name] = [HeadRecord.of(v) for v in value] if isinstance(value, list) else HeadRecord.of(value)
        return out


def minimap_location_mask(board_mask: np.ndarray, map_size: int, minimap_size: int) -> np.ndarray:
    """Enable the top-left minimap pixel of every enabled (egocentric) board cell."""
    scale = minimap_size // map_size
    rows, cols = np.divmod(np.flatnonzero(board_mask), map_size)
    mask = np.zeros(minimap_size * minimap_size, dtype=bool)
    mask[rows * scale * minimap_size + cols * scale] = True
    return mask


def minimap_index_to_ego(index: int, map_size: int, minimap_size: int) -> int:
    scale = minimap_size // map_size
    r, c = divmod(int(index), minimap_size)
    return (r // scale) * map_size + c // scale


def ego_to_minimap_index(ego_index: int, map_size: int, minimap_size: int) -> int:
    scale = minimap_size // map_size
    r, c = divmod(int(ego_index), map_size)
    return r * scale * minimap_size + c * scale


@dataclass(frozen=True)
class ForcedChoices:
    """Head indices implied by a target action in a given observation."""

    action_type: int
    delay: int
    queue: int
    selected_units: tuple[int, ...]
    target_unit: Optional[int]
    location: Optional[int]


def forced_choices(obs: MsState, action: ArgsAction, minimap_size: int) -> ForcedChoices:
    t = ActionType(action.action_type)
    location = None
    if action.target_location is not None:
        location = ego_to_minimap_index(obs.to_ego_index(action.target_location), obs.map_size, minimap_size)
    return ForcedChoices(
        action_type=int(t),
        delay=action.delay - 1,
        queue=int(action.queue),
        selected_units=tuple(obs.slot_of(u) for u in action.selected_units),
        target_unit=None if action.target_unit is None else obs.slot_of(action.target_unit),
        location=location,
    )


class PolicyNet(Module):
    def __init__(self, cfg: NetConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.entity_encoder = EntityEncoder(cfg, rng)
        self.scalar_encoder = ScalarEncoder(cfg, rng)
        self.spatial_encoder = SpatialEncoder(cfg, rng)
        self.core = LSTM(cfg.embedding_size, cfg.lstm_hidden_dim, cfg.lstm_layers, rng)
        self.action_type_head = ActionTypeHead(cfg, rng)
        self.delay_head = DelayHead(cfg, rng)
        self.queue_head = QueueHead(cfg, rng)
        self.selected_units_head = SelectedUnitsHead(cfg, rng)
        self.target_unit_head = TargetUnitHead(cfg, rng)
        self.location_head = LocationHead(cfg, rng)
        self.baseline = Baseline(cfg, rng)

    def initial_state(self) -> HiddenState:
        return HiddenState(self.core.zero_state())

    def step(
        self,
        obs: MsState,
        masks: ActionMasks,
        hidden: HiddenState,
        rng: np.random.Generator | None = None,
        forced: Optional[ArgsAction] = None,
        greedy: bool = False,
    ) -> PolicyOutput:
        """One observation through the whole network.

        With `forced` every head is forced to that action, which is
        how supervised and off-policy updates replay recorded choices.
        """
        cfg = self.cfg
        entities = self.entity_encoder(obs.entity_state, obs.entity_valid)
        embedded_scalar, scalar_context = self.scalar_encoder(obs.scalar_state)
        map_skip, embedded_spatial = self.spatial_encoder(obs.spatial_state)
        core_in = ops.concat([embedded_scalar, entities.embedded_entity, embedded_spatial])
        if core_in.shape != (cfg.embedding_size,):
            raise DimensionError(f"core input {core_in.shape} does not match embedding_size {cfg.embedding_size}")
        lstm_output, layers = self.core.step(core_in, hidden.layers)

        f = forced_choices(obs, forced, cfg.minimap_size) if forced is not None else None
        heads: dict[str, HeadValue] = {}
        type_out, ar = self.action_type_head(
            lstm_output, scalar_context, masks.type_mask, rng, f and f.action_type, greedy
        )
        heads["action_type"] = type_out
        t = ActionType(type_out.index)

        delay_out, ar = self.delay_head(ar, rng, f and f.delay, greedy)
        heads["delay"] = delay_out

        if t in QUEUEABLE:
            queue_out, ar = self.queue_head(ar, rng, f and f.queue, greedy)
        else:
            queue_out = HeadOutput.sentinel(2, index=0)
        heads["queue"] = queue_out

        selected: list[int] = []
        if SELECTS_UNITS[t]:
            steps, selected, ar = self.selected_units_head(
                ar, t, entities.entity_embeddings, masks.unit_selection_mask[t], rng,
                f.selected_units if f else None, greedy,
            )
            heads["selected_units"] = steps
        else:
            heads["selected_units"] = []

        target_unit = None
        if t in TARGETS_UNIT:
            out = self.target_unit_head(
                ar, t, entities.entity_embeddings, masks.target_unit_mask[t], rng, f and f.target_unit, greedy
            )
            target_unit = obs.entity_ids[out.index]
        else:
            out = HeadOutput.sentinel(cfg.max_entities)
        heads["target_unit"] = out

        location = None
        if t in TARGETS_LOCATION:
            mask = minimap_location_mask(masks.location_mask[t], obs.map_size, cfg.minimap_size)
            out = self.location_head(ar, map_skip, mask, rng, f and f.location, greedy)
            location = obs.to_board(minimap_index_to_ego(out.index, obs.map_size, cfg.minimap_size))
        else:
            out = HeadOutput.sentinel(cfg.minimap_size ** 2)
        heads["location"] = out

        action = ArgsAction(
            action_type=int(t),
            delay=delay_out.index + 1,
            queue=bool(queue_out.index) if t in QUEUEABLE else False,
            selected_units=tuple(obs.entity_ids[s] for s in selected),
            target_unit=target_unit,
            target_location=location,
        )
        return PolicyOutput(action, heads, HiddenState(layers), lstm_output, embedded_scalar, scalar_context)

    def value(self, out: PolicyOutput, opponent_obs: MsState) -> Tensor:
        opponent_scalar, _ = self.scalar_encoder(opponent_obs.scalar_state)
        return self.baseline(out.lstm_output, out.embedded_scalar, opponent_scalar, out.action_type)

    def unroll(
        self,
        observations: Sequence[MsState],
        masks: Sequence[ActionMasks],
        actions: Sequence[ArgsAction],
        hidden: HiddenState,
    ) -> list[PolicyOutput]:
        """Forced pass over a recorded sequence, carrying the core state."""
        outputs = []
        for obs, m, action in zip(observations, masks, actions):
            out = self.step(obs, m, hidden, forced=action)
            outputs.append(out)
            hidden = out.hidden
        return outputs


def head_log_prob(value: HeadValue) -> Optional[Tensor]:
    """Sum of log-probabilities of the chosen indices, or None for an unused head."""
    items = value if isinstance(value, list) else [value]
    terms = [ops.neg(ops.cross_entropy(h.logits, h.index, h.mask)) for h in items if h.used and h.index is not None]
    if not terms:
        return None
    total = terms[0]
    for term in terms[1:]:
        total = ops.add(total, term)
    return total


def record_log_prob(value) -> Optional[float]:
    items = value if isinstance(value, list) else [value]
    used = [r for r in items if r.used and r.index is not None]
    if not used:
        return None
    return sum(r.log_prob() for r in used)


def argmax_accuracy(value: HeadValue) -> Optional[bool]:
    """Whether the masked argmax of every step equals the chosen index."""
    items = value if isinstance(value, list) else [value]
    used = [h for h in items if h.used and h.index is not None]
    if not used:
        return None
    return all(int(np.argmax(np.where(h.mask, h.logits.data, -np.inf))) == h.index for h in used)
