"""Autoregressive action heads and the value baseline.

Each head reads the running autoregressive embedding, produces
temperature-scaled logits, picks an index (sampled, argmax, or forced by
a target action) and folds that choice back into the embedding for the
heads after it. A head that does not apply to the chosen action type
returns a sentinel: zero logits, no index, embedding untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ministar.domain.net_config import NetConfig
from ministar.drivers.microrts import ACCEPTING_KINDS, N_ACTION_TYPES, N_UNIT_KINDS, ActionType
from ministar.errors import NoValidActionError, TargetIndexError
from ministar.ndgrad import ops
from ministar.ndgrad.nn import GLU, ConvTranspose2d, Conv2d, EntityConv1d, FiLM, Linear, LSTMCell, Module, ResBlock1D
from ministar.ndgrad.tensor import Parameter, Tensor, default_dtype


@dataclass
class HeadOutput:
    logits: Tensor
    mask: np.ndarray
    index: Optional[int]
    used: bool = True

    @classmethod
    def sentinel(cls, size: int, index: Optional[int] = None) -> "HeadOutput":
        return cls(Tensor(np.zeros(size)), np.ones(size, dtype=bool), index, used=False)


def choose(logits: Tensor, mask: np.ndarray, rng: np.random.Generator | None, forced: Optional[int], greedy: bool) -> int:
    """Pick an index from already temperature-scaled logits under `mask`."""
    n = logits.shape[-1]
    if forced is not None:
        if not 0 <= forced < n:
            raise TargetIndexError(f"forced index {forced} outside {n} choices")
        if not mask[forced]:
            raise TargetIndexError(f"forced index {forced} is masked out")
        return int(forced)
    if not mask.any():
        raise NoValidActionError("no valid choice under mask")
    if greedy or rng is None:
        return int(np.argmax(np.where(mask, logits.data, -np.inf)))
    probs = ops.masked_softmax_np(logits.data, mask).astype(np.float64)
    return int(rng.choice(n, p=probs / probs.sum()))


def _kinds_vector(action_type: int) -> Tensor:
    vec = np.zeros(N_UNIT_KINDS)
    for kind in ACCEPTING_KINDS[ActionType(action_type)]:
        vec[kind] = 1.0
    return Tensor(vec)


class ActionTypeHead(Module):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.fc = Linear(cfg.lstm_hidden_dim, cfg.original_256, rng)
        self.blocks = [ResBlock1D(cfg.original_256, rng) for _ in range(cfg.n_resblocks)]
        self.glu = GLU(cfg.original_256, cfg.context_size, N_ACTION_TYPES, rng)
        self.embed_fc = Linear(N_ACTION_TYPES, cfg.original_256, rng)
        self.glu_choice = GLU(cfg.original_256, cfg.context_size, cfg.autoregressive_embedding_size, rng)
        self.glu_core = GLU(cfg.lstm_hidden_dim, cfg.context_size, cfg.autoregressive_embedding_size, rng)
        self.temperature = cfg.temperature("action_type")

    def __call__(self, lstm_output: Tensor, scalar_context: Tensor, mask: np.ndarray,
                 rng=None, forced: Optional[int] = None, greedy: bool = False) -> tuple[HeadOutput, Tensor]:
        x = ops.relu(self.fc(lstm_output))
        for block in self.blocks:
            x = block(x)
        x = ops.relu(x)
        logits = ops.div(self.glu(x, scalar_context), self.temperature)
        idx = choose(logits, mask, rng, forced, greedy)
        chosen = ops.relu(self.embed_fc(ops.one_hot(idx, N_ACTION_TYPES, dtype=default_dtype())))
        ar = ops.add(self.glu_choice(chosen, scalar_context), self.glu_core(lstm_output, scalar_context))
        return HeadOutput(logits, np.asarray(mask, dtype=bool), idx), ar


class _SmallChoiceHead(Module):
    """Two ReLU layers to logits; the choice is embedded by two linears and added."""

    name = ""

    def __init__(self, cfg: NetConfig, n_choices: int, rng: np.random.Generator):
        self.n = n_choices
        self.fc1 = Linear(cfg.autoregressive_embedding_size, cfg.original_256, rng)
        self.fc2 = Linear(cfg.original_256, cfg.original_256, rng)
        self.logits_fc = Linear(cfg.original_256, n_choices, rng)
        self.embed1 = Linear(n_choices, cfg.original_256, rng)
        self.embed2 = Linear(cfg.original_256, cfg.autoregressive_embedding_size, rng)
        self.temperature = cfg.temperature(self.name)

    def __call__(self, ar: Tensor, rng=None, forced: Optional[int] = None, greedy: bool = False) -> tuple[HeadOutput, Tensor]:
        x = ops.relu(self.fc2(ops.relu(self.fc1(ar))))
        logits = ops.div(self.logits_fc(x), self.temperature)
        mask = np.ones(self.n, dtype=bool)
        idx = choose(logits, mask, rng, forced, greedy)
        update = self.embed2(ops.relu(self.embed1(ops.one_hot(idx, self.n, dtype=default_dtype()))))
        return HeadOutput(logits, mask, idx), ops.add(ar, update)


class DelayHead(_SmallChoiceHead):
    name = "delay"

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        super().__init__(cfg, cfg.max_delay, rng)


class QueueHead(_SmallChoiceHead):
    name = "queue"

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        super().__init__(cfg, 2, rng)


class SelectedUnitsHead(Module):
    """Pointer network over entity keys with an extra end-of-selection key."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        k = cfg.original_32
        self.func_embed = Linear(N_UNIT_KINDS, cfg.original_256, rng)
        self.key_conv = EntityConv1d(cfg.entity_embedding_size, k, rng)
        self.end_key = Parameter(np.zeros((1, k), dtype=default_dtype()))
        self.query_fc1 = Linear(cfg.autoregressive_embedding_size, cfg.original_256, rng)
        self.query_fc2 = Linear(cfg.original_256, k, rng)
        self.lstm = LSTMCell(k, k, rng)
        self.update_fc = Linear(k, cfg.autoregressive_embedding_size, rng)
        self.max_selected = cfg.max_selected
        self.temperature = cfg.temperature("selected_units")

    def __call__(self, ar: Tensor, action_type: int, entity_embeddings: Tensor, selection_mask: np.ndarray,
                 rng=None, forced: Optional[Sequence[int]] = None, greedy: bool = False) -> tuple[list[HeadOutput], list[int], Tensor]:
        n = entity_embeddings.shape[0]
        selectable = np.asarray(selection_mask, dtype=bool)
        if not selectable.any():
            raise NoValidActionError(f"no unit can take action type {action_type}")
        func = ops.relu(self.func_embed(_kinds_vector(action_type)))
        keys = self.key_conv(entity_embeddings)
        all_keys = ops.concat([keys, self.end_key], axis=0)
        state = self.lstm.zero_state()
        chosen: list[int] = []
        steps: list[HeadOutput] = []
        targets = list(forced) + ([n] if len(forced) < self.max_selected else []) if forced is not None else None

        while len(chosen) < self.max_selected:
            x = ops.relu(self.query_fc2(ops.add(self.query_fc1(ar), func)))
            h, c = self.lstm(x, state)
            state = (h, c)
            logits = ops.div(ops.reshape(ops.matmul(all_keys, ops.reshape(h, (-1, 1))), (n + 1,)), self.temperature)
            mask = np.append(selectable, len(chosen) >= 1)
            mask[chosen] = False
            forced_idx = targets[len(steps)] if targets is not None else None
            idx = choose(logits, mask, rng, forced_idx, greedy)
            steps.append(HeadOutput(logits, mask, idx))
            if idx == n:
                break
            chosen.append(idx)
            centred = np.full((1, n), -1.0 / n)
            centred[0, idx] += 1.0
            picked = ops.matmul(Tensor(centred, dtype=keys.dtype), keys)
            ar = ops.add(ar, self.update_fc(ops.reshape(picked, (-1,))))
        return steps, chosen, ar


class TargetUnitHead(Module):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        k = cfg.original_32
        self.func_embed = Linear(N_UNIT_KINDS, cfg.original_256, rng)
        self.key_conv = EntityConv1d(cfg.entity_embedding_size, k, rng)
        self.query_fc1 = Linear(cfg.autoregressive_embedding_size, cfg.original_256, rng)
        self.query_fc2 = Linear(cfg.original_256, k, rng)
        self.temperature = cfg.temperature("target_unit")

    def __call__(self, ar: Tensor, action_type: int, entity_embeddings: Tensor, target_mask: np.ndarray,
                 rng=None, forced: Optional[int] = None, greedy: bool = False) -> HeadOutput:
        func = ops.relu(self.func_embed(_kinds_vector(action_type)))
        query = self.query_fc2(ops.relu(ops.add(self.query_fc1(ar), func)))
        keys = self.key_conv(entity_embeddings)
        logits = ops.div(ops.reshape(ops.matmul(keys, ops.reshape(query, (-1, 1))), (-1,)), self.temperature)
        mask = np.asarray(target_mask, dtype=bool)
        return HeadOutput(logits, mask, choose(logits, mask, rng, forced, greedy))


class LocationHead(Module):
    """Deconvolution decoder from the skip map, conditioned on the embedding."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        c = cfg.location_head_max_map_channels
        s = cfg.map_skip_size
        self.side = s
        self.channels = c
        self.proj = Linear(cfg.autoregressive_embedding_size, c * s * s, rng)
        self.mix = Conv2d(c + cfg.original_128, cfg.original_128, 1, rng)
        self.film = FiLM(cfg.original_128, cfg.autoregressive_embedding_size, rng)
        self.up = [
            ConvTranspose2d(cfg.original_128, cfg.original_64, 2, rng, stride=2),
            ConvTranspose2d(cfg.original_64, cfg.original_32, 2, rng, stride=2),
            ConvTranspose2d(cfg.original_32, 1, 2, rng, stride=2),
        ]
        self.temperature = cfg.temperature("location")

    def __call__(self, ar: Tensor, map_skip: Tensor, location_mask: np.ndarray,
                 rng=None, forced: Optional[int] = None, greedy: bool = False) -> HeadOutput:
        planes = ops.reshape(self.proj(ar), (self.channels, self.side, self.side))
        x = ops.relu(ops.concat([planes, map_skip], axis=0))
        x = ops.relu(self.mix(x))
        x = ops.add(self.film(x, ar), map_skip)
        for i, up in enumerate(self.up):
            x = up(ops.relu(x) if i else x)
        logits = ops.div(ops.reshape(x, (-1,)), self.temperature)
        mask = np.asarray(location_mask, dtype=bool)
        return HeadOutput(logits, mask, choose(logits, mask, rng, forced, greedy))


class Baseline(Module):
    """Value estimate in (-1, 1) from the core output, the chosen action type
    and both players' scalar features."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        w = cfg.baseline_scalar_size
        self.own = Linear(cfg.scalar_embedding_size, w, rng)
        self.opponent = Linear(cfg.scalar_embedding_size, w, rng)
        self.action = Linear(N_ACTION_TYPES, cfg.original_256, rng)
        self.fc = Linear(cfg.baseline_input_size, cfg.original_256, rng)
        self.blocks = [ResBlock1D(cfg.original_256, rng) for _ in range(cfg.n_resblocks)]
        self.out = Linear(cfg.original_256, 1, rng)

    def __call__(self, lstm_output: Tensor, own_scalar: Tensor, opponent_scalar: Tensor, action_type: int) -> Tensor:
        x = ops.concat([
            lstm_output,
            ops.relu(self.action(ops.one_hot(action_type, N_ACTION_TYPES, dtype=default_dtype()))),
            ops.relu(self.own(own_scalar)),
            ops.relu(self.opponent(opponent_scalar)),
        ])
        x = ops.relu(self.fc(x))
        for block in self.blocks:
            x = block(x)
        raw = ops.reshape(self.out(ops.relu(x)), ())
        return squash(raw)


def squash(x: Tensor) -> Tensor:
    """(2/pi) * arctan((pi/2) * x): maps the reals onto (-1, 1)."""
    return ops.mul(ops.arctan(ops.mul(x, math.pi / 2)), 2 / math.pi)
