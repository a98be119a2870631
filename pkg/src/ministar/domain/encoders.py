"""Observation encoders: entities, scalars, spatial planes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ministar.drivers.microrts import ENTITY_FEATURE_SIZE, SCALAR_CONTEXT, SCALAR_LAYOUT, SCALAR_SIZE
from ministar.errors import DimensionError
from ministar.ndgrad import ops
from ministar.ndgrad.nn import Conv2d, EntityConv1d, Linear, Module, ResBlock2D, TransformerLayer
from ministar.ndgrad.tensor import Tensor
from ministar.domain.net_config import NetConfig


@dataclass
class EntityEncoding:
    entity_embeddings: Tensor  # [max_entities, entity_embedding_size], zero rows for padding
    embedded_entity: Tensor  # [original_256]
    no_entities: bool
    attention: list[np.ndarray] = field(default_factory=list)  # per layer, [heads, max_entities, max_entities]


def _split(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


class EntityEncoder(Module):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        d = cfg.entity_embedding_size
        self.embed = Linear(ENTITY_FEATURE_SIZE, d, rng)
        self.layers = [
            TransformerLayer(d, cfg.transformer_heads, cfg.original_1024, rng, dropout=cfg.dropout)
            for _ in range(cfg.transformer_layers)
        ]
        self.conv = EntityConv1d(d, d, rng)
        self.pool = Linear(d, cfg.original_256, rng)
        self.cfg = cfg

    def __call__(self, entity_state: np.ndarray, valid: np.ndarray) -> EntityEncoding:
        cfg = self.cfg
        if entity_state.shape != (cfg.max_entities, ENTITY_FEATURE_SIZE):
            raise DimensionError(f"entity_state {entity_state.shape} does not match {(cfg.max_entities, ENTITY_FEATURE_SIZE)}")
        valid = np.asarray(valid, dtype=bool)
        if not valid.any():
            zeros_e = Tensor(np.zeros((cfg.max_entities, cfg.entity_embedding_size)))
            return EntityEncoding(zeros_e, Tensor(np.zeros(cfg.original_256)), no_entities=True)

        x = self.embed(Tensor(entity_state))
        attention = []
        for layer in self.layers:
            x, weights = layer(x, valid)
            attention.append(weights)
        keep = Tensor(valid[:, None].astype(x.dtype))
        embeddings = ops.mul(ops.relu(self.conv(ops.relu(x))), keep)
        pooled = ops.div(ops.sum(ops.mul(x, keep), axis=0), float(valid.sum()))
        return EntityEncoding(embeddings, ops.relu(self.pool(pooled)), no_entities=False, attention=attention)


class ScalarEncoder(Module):
    """One linear per scalar element and destination list.

    Every element feeds the scalar embedding; the elements listed in
    SCALAR_CONTEXT additionally feed the scalar context.
    """

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        if SCALAR_SIZE > cfg.scalar_feature_size:
            raise DimensionError(f"scalar layout of {SCALAR_SIZE} exceeds scalar_feature_size {cfg.scalar_feature_size}")
        names = [name for name, _ in SCALAR_LAYOUT]
        widths = dict(SCALAR_LAYOUT)
        embed_w = _split(cfg.scalar_encoder_fc_input, len(names))
        ctx_w = _split(cfg.scalar_context_fc_input, len(SCALAR_CONTEXT))
        self.embed_layers = [Linear(widths[n], w, rng) for n, w in zip(names, embed_w)]
        self.context_layers = [Linear(widths[n], w, rng) for n, w in zip(SCALAR_CONTEXT, ctx_w)]
        self.embed_out = Linear(cfg.scalar_encoder_fc_input, cfg.scalar_embedding_size, rng)
        self.context_out = Linear(cfg.scalar_context_fc_input, cfg.context_size, rng)
        self._offsets = {}
        start = 0
        for name, width in SCALAR_LAYOUT:
            self._offsets[name] = (start, start + width)
            start += width

    def element(self, scalar_state: np.ndarray, name: str) -> Tensor:
        lo, hi = self._offsets[name]
        return Tensor(scalar_state[lo:hi])

    def __call__(self, scalar_state: np.ndarray) -> tuple[Tensor, Tensor]:
        """Returns (embedded_scalar, scalar_context)."""
        if scalar_state.shape != (SCALAR_SIZE,):
            raise DimensionError(f"scalar_state {scalar_state.shape} does not match ({SCALAR_SIZE},)")
        names = [name for name, _ in SCALAR_LAYOUT]
        embed = [ops.relu(layer(self.element(scalar_state, n))) for n, layer in zip(names, self.embed_layers)]
        ctx = [ops.relu(layer(self.element(scalar_state, n))) for n, layer in zip(SCALAR_CONTEXT, self.context_layers)]
        embedded = ops.relu(self.embed_out(ops.concat(embed)))
        context = ops.relu(self.context_out(ops.concat(ctx)))
        return embedded, context


class SpatialEncoder(Module):
    """Projection, three stride-2 downsamples, residual blocks.

    Returns map_skip [original_128, m/8, m/8] and embedded_spatial [original_256].
    """

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.project = Conv2d(cfg.map_channels, cfg.original_32, 1, rng)
        self.down = [
            Conv2d(cfg.original_32, cfg.original_64, 4, rng, stride=2, padding=1),
            Conv2d(cfg.original_64, cfg.original_128, 4, rng, stride=2, padding=1),
            Conv2d(cfg.original_128, cfg.original_128, 4, rng, stride=2, padding=1),
        ]
        self.blocks = [ResBlock2D(cfg.original_128, rng) for _ in range(cfg.n_resblocks)]
        self.out = Linear(cfg.original_128 * cfg.map_skip_size ** 2, cfg.original_256, rng)
        self.cfg = cfg

    def __call__(self, spatial_state: np.ndarray) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        expected = (cfg.map_channels, cfg.minimap_size, cfg.minimap_size)
        if spatial_state.shape != expected:
            raise DimensionError(f"spatial_state {spatial_state.shape} does not match {expected}")
        x = ops.relu(self.project(Tensor(spatial_state)))
        for conv in self.down:
            x = ops.relu(conv(x))
        for block in self.blocks:
            x = block(x)
        embedded = ops.relu(self.out(ops.reshape(x, (-1,))))
        return x, embedded

