"""Reinforcement-learning settings and the per-trajectory loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator

from ministar.domain.policy_net import (
    HEAD_NAMES,
    HiddenState,
    PolicyNet,
    head_log_prob,
    record_log_prob,
)
from ministar.domain.rl_losses import (
    UpgoWeighting,
    entropy_loss,
    kl_loss,
    lambda_return,
    td_lambda_baseline_loss,
    upgo_loss_from_log_probs,
    upgo_returns,
    vtrace_pg_loss_from_log_probs,
)
from ministar.domain.trajectory import Behavior, Trajectory
from ministar.ndgrad import ops
from ministar.ndgrad.tensor import Tensor


class RLConfig(BaseModel):
    lr: float = Field(5e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    clip_norm: float = Field(0.5, gt=0)
    discount: float = Field(1.0, ge=0, le=1)
    td_lambda: float = Field(0.8, ge=0, le=1)
    rho_bar: float = Field(1.0, gt=0)
    c_bar: float = Field(1.0, gt=0)

    use_actor_critic: bool = True
    use_upgo: bool = True
    use_kl: bool = True
    use_entropy: bool = True
    actor_critic_weight: float = Field(1.0, ge=0)
    baseline_weight: float = Field(1.0, ge=0)
    upgo_weight: float = Field(1.0, ge=0)
    kl_weight: float = Field(0.02, ge=0)
    entropy_weight: float = Field(1e-4, ge=0)
    upgo_clip: bool = True
    upgo_weighting: UpgoWeighting = UpgoWeighting.VERBATIM
    upgo_heads: tuple[str, ...] = HEAD_NAMES

    updates: int = Field(300, ge=0)
    actors: int = Field(2, ge=0)
    trajectories_per_send: int = Field(1, ge=1)
    queue_factor: int = Field(4, ge=1)
    opponent: str = "random"
    eval_every: int = Field(50, ge=0)
    eval_games: int = Field(10, ge=0)
    outcome_window: int = Field(100, ge=1)

    @field_validator("upgo_heads")
    @classmethod
    def _known_heads(cls, heads: tuple[str, ...]) -> tuple[str, ...]:
        unknown = [h for h in heads if h not in HEAD_NAMES]
        if unknown:
            raise ValueError(f"unknown heads {unknown}")
        return heads


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)


def reference_records(reference: PolicyNet, traj: Trajectory) -> list[Behavior]:
    """Forced logits of a frozen policy along a trajectory (no tape needed)."""
    outputs = reference.unroll(
        [s.observation for s in traj.steps],
        [s.masks for s in traj.steps],
        [s.action for s in traj.steps],
        HiddenState.from_arrays(traj.initial_hidden),
    )
    return [out.records() for out in outputs]


def _pairs(target, reference) -> list[tuple]:
    targets = target if isinstance(target, list) else [target]
    refs = reference if isinstance(reference, list) else [reference]
    return [(t.logits, r.logits, t.mask) for t, r in zip(targets, refs) if t.used and t.index is not None]


def _used_logits(value) -> list[tuple]:
    items = value if isinstance(value, list) else [value]
    return [(h.logits, h.mask) for h in items if h.used and h.index is not None]


def _sum(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return total


def trajectory_loss(
    policy: PolicyNet,
    traj: Trajectory,
    cfg: RLConfig,
    reference: Optional[list[Behavior]] = None,
) -> LossBreakdown:
    """Actor-critic (V-trace + TD(lambda) baseline), UPGO, KL and entropy for one trajectory.

    Must run inside a GradTape for the result to be differentiable.
    """
    traj.validate()
    steps = traj.steps
    n = len(steps)
    outputs = policy.unroll(
        [s.observation for s in steps],
        [s.masks for s in steps],
        [s.action for s in steps],
        HiddenState.from_arrays(traj.initial_hidden),
    )
    values = ops.stack([policy.value(out, s.opponent_observation) for out, s in zip(outputs, steps)])
    values_np = values.data.astype(np.float64)

    if traj.is_final:
        bootstrap = 0.0
    else:
        tail = policy.step(traj.bootstrap_observation, traj.bootstrap_masks, outputs[-1].hidden, greedy=True)
        bootstrap = float(policy.value(tail, traj.bootstrap_opponent_observation).data)

    rewards = traj.rewards
    discounts = np.array([0.0 if s.is_final else cfg.discount for s in steps])
    next_values = np.append(values_np[1:], bootstrap)
    td_targets = lambda_return(next_values, rewards, discounts, cfg.td_lambda)

    terms: dict[str, float] = {}
    parts: list[Tensor] = []

    target_lp = {h: [head_log_prob(out.heads[h]) for out in outputs] for h in HEAD_NAMES}
    behavior_lp = {h: [record_log_prob(s.behavior[h]) or 0.0 for s in steps] for h in HEAD_NAMES}

    if cfg.use_actor_critic:
        baseline = td_lambda_baseline_loss(values, td_targets)
        pg = _sum([
            vtrace_pg_loss_from_log_probs(target_lp[h], behavior_lp[h], rewards, values_np, bootstrap, discounts, cfg.rho_bar, cfg.c_bar)
            for h in HEAD_NAMES
        ])
        terms["baseline"] = baseline.item()
        terms["pg"] = pg.item()
        parts.append(ops.mul(ops.add(pg, ops.mul(baseline, cfg.baseline_weight)), cfg.actor_critic_weight))

    if cfg.use_upgo and n >= 2:
        returns = upgo_returns(values_np, rewards, discounts, bootstrap)
        upgo = _sum([
            upgo_loss_from_log_probs(target_lp[h], behavior_lp[h], returns, values_np, cfg.upgo_clip, cfg.upgo_weighting)
            for h in cfg.upgo_heads
        ]) if cfg.upgo_heads else ops.mul(values.sum(), 0.0)
        terms["upgo"] = upgo.item()
        parts.append(ops.mul(upgo, cfg.upgo_weight))

    if cfg.use_kl and reference is not None:
        per_step = []
        for out, ref in zip(outputs, reference):
            pairs = [p for h in HEAD_NAMES for p in _pairs(out.heads[h], ref[h])]
            per_step.append(pairs)
        kl = kl_loss(per_step)
        terms["kl"] = kl.item()
        parts.append(ops.mul(kl, cfg.kl_weight))

    if cfg.use_entropy:
        used = [lm for out in outputs for h in HEAD_NAMES for lm in _used_logits(out.heads[h])]
        ent = entropy_loss([lg for lg, _ in used], [m for _, m in used])
        terms["entropy"] = -ent.item()
        parts.append(ops.mul(ent, cfg.entropy_weight))

    total = _sum(parts) if parts else ops.mul(values.sum(), 0.0)
    terms["value_mean"] = float(values_np.mean())
    terms["return"] = float(rewards.sum())
    return LossBreakdown(total, terms)
