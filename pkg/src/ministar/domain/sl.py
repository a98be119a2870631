"""Supervised imitation of scripted demonstrators."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from ministar.adapters.replay_files import ReplayRecord, read_dataset, replay_to_text
from ministar.domain.policy_net import HEAD_NAMES, HeadValue, PolicyNet, argmax_accuracy
from ministar.drivers.microrts import (
    SELECTS_UNITS,
    TARGETS_LOCATION,
    TARGETS_UNIT,
    ActionMasks,
    ActionType,
    ArgsAction,
    EnvConfig,
    MicroRTS,
    MsState,
    Replay,
)
from ministar.drivers.scripted import scripted_policy
from ministar.errors import TrajectoryError
from ministar.ndgrad import ops
from ministar.ndgrad.optim import Adam, clip_by_global_norm
from ministar.ndgrad.tensor import GradTape, Tensor

log = logging.getLogger(__name__)


class SLConfig(BaseModel):
    epochs: int = Field(10, ge=0)
    lr: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    clip_norm: float = Field(0.5, gt=0)
    train_split: float = Field(0.8, gt=0, le=1)
    games: int = Field(40, ge=1)
    demonstrator: str = "greedy"
    opponent: str = "random"
    shuffle: bool = True
    weight_action_type: float = Field(1.0, ge=0)
    weight_delay: float = Field(1.0, ge=0)
    weight_queue: float = Field(1.0, ge=0)
    weight_selected_units: float = Field(1.0, ge=0)
    weight_target_unit: float = Field(1.0, ge=0)
    weight_location: float = Field(1.0, ge=0)

    def head_weights(self) -> dict[str, float]:
        return {h: getattr(self, f"weight_{h}") for h in HEAD_NAMES}


# ===== REPLAYS =====

def play_scripted_game(env_config: EnvConfig, seed: int, demonstrator: str, opponent: str, seat: int) -> Replay:
    env = MicroRTS(env_config)
    env.reset(seed)
    policies = {seat: scripted_policy(demonstrator, seed), 1 - seat: scripted_policy(opponent, seed + 1)}
    replay = Replay(seed, env_config.digest())
    while not env.is_final:
        a0, a1 = policies[0](env, 0), policies[1](env, 1)
        replay.frames.append((a0, a1))
        env.step(a0, a1)
    replay.winner = env.winner
    return replay


def generate_replays(env_config: EnvConfig, games: int, seed: int,
                     demonstrator: str = "greedy", opponent: str = "random", progress: bool = False) -> list[ReplayRecord]:
    """Deterministic set of demonstrator games; seats alternate game to game."""
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=games)
    records = []
    for i in tqdm(range(games), desc="replays", disable=not progress):
        seat = i % 2
        replay = play_scripted_game(env_config, int(seeds[i]), demonstrator, opponent, seat)
        records.append(ReplayRecord(f"game_{i:04d}.replay", replay, seat, demonstrator, opponent))
    return records


@dataclass(frozen=True, eq=False)
class SLFrame:
    observation: MsState
    masks: ActionMasks
    action: ArgsAction
    is_final: bool


def demonstrator_frames(record: ReplayRecord, env_config: EnvConfig) -> list[SLFrame]:
    """Replay a game and keep what the demonstrator saw and did."""
    env = MicroRTS(env_config)
    env.reset(record.replay.seed)
    seat = record.seat
    frames = []
    for a0, a1 in record.replay.frames:
        obs = env.observe(seat)
        masks = env.action_masks(seat)
        result = env.step(a0, a1)
        frames.append(SLFrame(obs, masks, (a0, a1)[seat], result.is_final))
    return frames


class ReplayDataset:
    """Replays split by game into disjoint train and test sets."""

    def __init__(self, records: Sequence[ReplayRecord], env_config: EnvConfig, train_split: float = 0.8):
        if not records:
            raise TrajectoryError("replay dataset is empty")
        self.records = list(records)
        self.env_config = env_config
        self.n_train = max(1, int(round(len(self.records) * train_split))) if train_split < 1 else len(self.records)
        self._frames: dict[int, list[SLFrame]] = {}

    @classmethod
    def from_dir(cls, directory: str | Path, env_config: EnvConfig, train_split: float = 0.8) -> "ReplayDataset":
        records, _ = read_dataset(directory)
        return cls(records, env_config, train_split)

    def __len__(self) -> int:
        return len(self.records)

    def trajectory(self, i: int) -> list[SLFrame]:
        if i not in self._frames:
            self._frames[i] = demonstrator_frames(self.records[i], self.env_config)
        return self._frames[i]

    @property
    def train(self) -> list[list[SLFrame]]:
        return [self.trajectory(i) for i in range(self.n_train)]

    @property
    def test(self) -> list[list[SLFrame]]:
        return [self.trajectory(i) for i in range(self.n_train, len(self.records))]

    def digest(self) -> str:
        h = hashlib.sha256()
        for rec in self.records:
            h.update(rec.file.encode())
            h.update(replay_to_text(rec.replay).encode())
        return h.hexdigest()


@dataclass
class SLBatch:
    """`batch_size` windows of up to `sequence_length` frames; `valid` marks real frames."""

    windows: list[list[SLFrame]]
    valid: np.ndarray

    @property
    def num_frames(self) -> int:
        return int(self.valid.sum())


def make_batches(trajectories: Sequence[list[SLFrame]], batch_size: int, sequence_length: int,
                 rng: Optional[np.random.Generator] = None) -> list[SLBatch]:
    windows = [traj[s:s + sequence_length] for traj in trajectories for s in range(0, len(traj), sequence_length)]
    if rng is not None:
        order = rng.permutation(len(windows))
        windows = [windows[i] for i in order]
    batches = []
    for b in range(0, len(windows), batch_size):
        chunk = windows[b:b + batch_size]
        valid = np.zeros((batch_size, sequence_length), dtype=bool)
        for row, w in enumerate(chunk):
            valid[row, : len(w)] = True
        batches.append(SLBatch(chunk, valid))
    return batches


# ===== LOSS =====

def sl_loss(heads: Mapping[str, HeadValue], target: ArgsAction, weights: Optional[Mapping[str, float]] = None) -> Tensor:
    """Weighted cross-entropy of every head the target action uses.

    The action type, delay and queue terms are always present; the queue
    head of a non-queueable action is a constant sentinel.
    """
    weights = weights or {}
    t = ActionType(target.action_type)
    names = ["action_type", "delay", "queue"]
    if SELECTS_UNITS[t]:
        names.append("selected_units")
    if t in TARGETS_UNIT:
        names.append("target_unit")
    if t in TARGETS_LOCATION:
        names.append("location")
    terms = []
    for name in names:
        value = heads[name]
        for h in value if isinstance(value, list) else [value]:
            terms.append(ops.mul(ops.cross_entropy(h.logits, h.index, h.mask), float(weights.get(name, 1.0))))
    total = terms[0]
    for term in terms[1:]:
        total = ops.add(total, term)
    return total


@dataclass
class SLMetrics:
    loss: float = 0.0
    frames: int = 0
    accuracy: dict[str, float] = field(default_factory=dict)
    grad_norm: float = 0.0
    running_loss: float = 0.0

    def row(self) -> dict[str, float]:
        out = {"loss": self.loss, "frames": self.frames, "grad_norm": self.grad_norm, "running_loss": self.running_loss}
        out.update({f"acc_{k}": v for k, v in self.accuracy.items()})
        return out


class _Tally:
    def __init__(self) -> None:
        self.loss = 0.0
        self.frames = 0
        self.hits = {h: [0, 0] for h in HEAD_NAMES}

    def add(self, loss: float, heads: Mapping[str, HeadValue]) -> None:
        self.loss += loss
        self.frames += 1
        for h in HEAD_NAMES:
            ok = argmax_accuracy(heads[h])
            if ok is not None:
                self.hits[h][0] += int(ok)
                self.hits[h][1] += 1

    def metrics(self, grad_norm: float = 0.0) -> SLMetrics:
        acc = {h: hit / total for h, (hit, total) in self.hits.items() if total}
        return SLMetrics(self.loss / max(self.frames, 1), self.frames, acc, grad_norm)


def _batch_loss(policy: PolicyNet, batch: SLBatch, weights: Mapping[str, float], tally: _Tally) -> Optional[Tensor]:
    frame_losses = []
    for window in batch.windows:
        outputs = policy.unroll(
            [f.observation for f in window], [f.masks for f in window], [f.action for f in window],
            policy.initial_state(),
        )
        for frame, out in zip(window, outputs):
            loss = sl_loss(out.heads, frame.action, weights)
            tally.add(loss.item(), out.heads)
            frame_losses.append(ops.reshape(loss, ()))
    if not frame_losses:
        return None
    return ops.mean(ops.stack(frame_losses))


def sl_step(policy: PolicyNet, batch: SLBatch, optimizer: Adam, cfg: SLConfig,
            tally: Optional[_Tally] = None) -> SLMetrics:
    """One clipped Adam update on a batch of windows."""
    tally = tally if tally is not None else _Tally()
    params = policy.parameters()
    with GradTape() as tape:
        loss = _batch_loss(policy, batch, cfg.head_weights(), tally)
    if loss is None:
        return tally.metrics()
    grads = dict(zip(params, tape.gradient(loss, list(params.values()))))
    clipped, norm = clip_by_global_norm(grads, cfg.clip_norm)
    optimizer.step(clipped)
    return tally.metrics(norm)


def sl_train_epoch(policy: PolicyNet, trajectories: Sequence[list[SLFrame]], optimizer: Adam, cfg: SLConfig,
                   rng: Optional[np.random.Generator] = None, progress: bool = False) -> SLMetrics:
    """One clipped Adam pass over `trajectories`.

    `loss` and `accuracy` come from a full pass over the same trajectories
    after the last update; `running_loss` is the mean over the batches as
    they were trained, which mixes parameter versions.
    """
    net = policy.cfg
    batches = make_batches(trajectories, net.batch_size, net.sequence_length, rng if cfg.shuffle else None)
    tally = _Tally()
    norms = []
    policy.train()
    for batch in tqdm(batches, desc="sl", disable=not progress):
        norms.append(sl_step(policy, batch, optimizer, cfg, tally).grad_norm)
    after = sl_evaluate(policy, trajectories, cfg)
    after.grad_norm = float(np.mean(norms)) if norms else 0.0
    after.running_loss = tally.metrics().loss
    return after


def sl_evaluate(policy: PolicyNet, trajectories: Sequence[list[SLFrame]], cfg: SLConfig) -> SLMetrics:
    """Loss and per-head accuracy without touching the parameters."""
    tally = _Tally()
    net = policy.cfg
    policy.eval()
    for batch in make_batches(trajectories, net.batch_size, net.sequence_length):
        _batch_loss(policy, batch, cfg.head_weights(), tally)
    policy.train()
    return tally.metrics()
