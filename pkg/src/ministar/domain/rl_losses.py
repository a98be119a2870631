"""Returns and losses for off-policy actor-critic updates.

Return computations work on plain float64 arrays; losses take Tensors for
the learner's current policy and plain arrays for anything recorded at
collection time (behaviour logits, values used as targets).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from ministar.errors import TrajectoryError
from ministar.ndgrad import ops
from ministar.ndgrad.tensor import Tensor


def _as_f64(name: str, values, length: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if length is not None and arr.shape[0] != length:
        raise TrajectoryError(f"{name} has {arr.shape[0]} entries, expected {length}")
    return arr


def _check_unit_interval(name: str, arr: np.ndarray) -> None:
    if np.any(arr < 0) or np.any(arr > 1):
        raise TrajectoryError(f"{name} must lie in [0, 1]")


# ===== RETURNS =====

def lambda_return(bootstraps, rewards, discounts, lambdas) -> np.ndarray:
    """G_t = r_t + g_t * ((1 - l_t) * v_{t+1} + l_t * G_{t+1}).

    `bootstraps[t]` is v_{t+1}; the recursion is closed with the last
    bootstrap. Scalars are broadcast over the trajectory.
    """
    rewards = _as_f64("rewards", rewards)
    n = rewards.shape[0]
    if n == 0:
        raise TrajectoryError("empty trajectory")
    bootstraps = _as_f64("bootstraps", bootstraps, n)
    discounts = np.broadcast_to(_as_f64("discounts", discounts), (n,)) if np.ndim(discounts) == 0 else _as_f64("discounts", discounts, n)
    lambdas = np.broadcast_to(_as_f64("lambdas", lambdas), (n,)) if np.ndim(lambdas) == 0 else _as_f64("lambdas", lambdas, n)
    _check_unit_interval("discounts", discounts)
    _check_unit_interval("lambdas", lambdas)
    out = np.empty(n)
    acc = bootstraps[-1]
    for t in reversed(range(n)):
        acc = rewards[t] + discounts[t] * ((1 - lambdas[t]) * bootstraps[t] + lambdas[t] * acc)
        out[t] = acc
    return out


def upgo_returns(values, rewards, discounts, bootstrap: float) -> np.ndarray:
    """Upgoing returns: keep following the trajectory while it does at least
    as well as the value estimate, otherwise bootstrap from the value."""
    rewards = _as_f64("rewards", rewards)
    n = rewards.shape[0]
    if n < 2:
        raise TrajectoryError("upgoing returns need at least two steps")
    values = _as_f64("values", values, n)
    discounts = _as_f64("discounts", discounts, n) if np.ndim(discounts) else np.full(n, float(discounts))
    next_values = np.append(values[1:], bootstrap)
    better = (rewards + discounts * next_values >= values).astype(np.float64)
    lambdas = np.append(better[1:], 1.0)
    return lambda_return(next_values, rewards, discounts, lambdas)


@dataclass(frozen=True)
class VTraceReturns:
    vs: np.ndarray
    pg_advantages: np.ndarray
    clipped_rhos: np.ndarray


def vtrace_returns(behavior_log_probs, target_log_probs, rewards, values, bootstrap: float, discounts,
                   rho_bar: float = 1.0, c_bar: float = 1.0) -> VTraceReturns:
    rewards = _as_f64("rewards", rewards)
    n = rewards.shape[0]
    if n == 0:
        raise TrajectoryError("empty trajectory")
    log_rhos = _as_f64("target_log_probs", target_log_probs, n) - _as_f64("behavior_log_probs", behavior_log_probs, n)
    values = _as_f64("values", values, n)
    discounts = _as_f64("discounts", discounts, n) if np.ndim(discounts) else np.full(n, float(discounts))
    _check_unit_interval("discounts", discounts)
    rhos = np.exp(np.minimum(log_rhos, 50.0))
    clipped_rhos = np.minimum(rho_bar, rhos)
    cs = np.minimum(c_bar, rhos)
    next_values = np.append(values[1:], bootstrap)
    deltas = clipped_rhos * (rewards + discounts * next_values - values)
    corrections = np.empty(n)
    acc = 0.0
    for t in reversed(range(n)):
        acc = deltas[t] + discounts[t] * cs[t] * acc
        corrections[t] = acc
    vs = values + corrections
    next_vs = np.append(vs[1:], bootstrap)
    advantages = clipped_rhos * (rewards + discounts * next_vs - values)
    return VTraceReturns(vs, advantages, clipped_rhos)


# ===== LOG-PROB FORM (used by the learner) =====

def _stack_log_probs(target: Sequence[Optional[Tensor]]) -> tuple[Tensor, np.ndarray]:
    used = np.array([t is not None for t in target], dtype=bool)
    dtype = next((t.dtype for t in target if t is not None), np.float32)
    parts = [t if t is not None else Tensor(0.0, dtype=dtype) for t in target]
    return ops.stack([ops.reshape(p, ()) for p in parts]), used


def vtrace_pg_loss_from_log_probs(target_log_probs: Sequence[Optional[Tensor]], behavior_log_probs, rewards,
                                  values, bootstrap: float, discounts, rho_bar: float = 1.0, c_bar: float = 1.0) -> Tensor:
    """Sum over used steps of -advantage * log pi(a). Unused steps have ratio 1."""
    logp, used = _stack_log_probs(target_log_probs)
    behavior = np.where(used, _as_f64("behavior_log_probs", behavior_log_probs, len(used)), 0.0)
    returns = vtrace_returns(behavior, np.where(used, logp.data, 0.0), rewards, values, bootstrap, discounts, rho_bar, c_bar)
    weights = np.where(used, returns.pg_advantages, 0.0).astype(logp.dtype)
    return ops.neg(ops.sum(ops.mul(logp, weights)))


class UpgoWeighting(str, Enum):
    VERBATIM = "verbatim"  # exp(log pi_b - log pi_t)
    IMPORTANCE = "importance"  # exp(log pi_t - log pi_b)


def upgo_loss_from_log_probs(target_log_probs: Sequence[Optional[Tensor]], behavior_log_probs, returns,
                             baselines, clip: bool = True, weighting: UpgoWeighting = UpgoWeighting.VERBATIM) -> Tensor:
    """Sum over used steps of (G - b) * rho * -log pi(a), with rho held constant."""
    logp, used = _stack_log_probs(target_log_probs)
    n = len(used)
    behavior = _as_f64("behavior_log_probs", behavior_log_probs, n)
    diff = logp.data.astype(np.float64) - behavior
    if UpgoWeighting(weighting) == UpgoWeighting.VERBATIM:
        diff = -diff
    rho = np.exp(np.minimum(diff, 50.0))
    if clip:
        rho = np.minimum(rho, 1.0)
    advantage = _as_f64("returns", returns, n) - _as_f64("baselines", baselines, n)
    weights = np.where(used, advantage * rho, 0.0).astype(logp.dtype)
    return ops.neg(ops.sum(ops.mul(logp, weights)))


# ===== LOGITS FORM =====

def _log_probs(logits: Sequence[Tensor], actions: Sequence[int], masks) -> list[Tensor]:
    masks = masks if masks is not None else [None] * len(logits)
    return [ops.neg(ops.cross_entropy(lg, a, m)) for lg, a, m in zip(logits, actions, masks)]


def _behavior_log_probs(logits: Sequence[np.ndarray], actions: Sequence[int], masks) -> np.ndarray:
    masks = masks if masks is not None else [None] * len(logits)
    return np.array([
        ops.masked_log_softmax_np(np.asarray(lg, dtype=np.float64), m)[a] for lg, a, m in zip(logits, actions, masks)
    ])


def vtrace_pg_loss(target_logits: Sequence[Tensor], behavior_logits: Sequence[np.ndarray], actions: Sequence[int],
                   rewards, values, discounts, bootstrap: float = 0.0, masks=None,
                   rho_bar: float = 1.0, c_bar: float = 1.0) -> Tensor:
    """V-trace policy-gradient loss for one logit set (one categorical per step)."""
    n = len(target_logits)
    if not (len(behavior_logits) == len(actions) == n == len(np.atleast_1d(rewards))):
        raise TrajectoryError("logits, actions and rewards must have the same length")
    return vtrace_pg_loss_from_log_probs(
        _log_probs(target_logits, actions, masks), _behavior_log_probs(behavior_logits, actions, masks),
        rewards, values, bootstrap, discounts, rho_bar, c_bar,
    )


def upgo_loss(target_logits: Sequence[Tensor], behavior_logits: Sequence[np.ndarray], actions: Sequence[int],
              returns, baselines, masks=None, clip: bool = True,
              weighting: UpgoWeighting = UpgoWeighting.VERBATIM) -> Tensor:
    n = len(target_logits)
    if not (len(behavior_logits) == len(actions) == n):
        raise TrajectoryError("logits and actions must have the same length")
    return upgo_loss_from_log_probs(
        _log_probs(target_logits, actions, masks), _behavior_log_probs(behavior_logits, actions, masks),
        returns, baselines, clip, weighting,
    )


def td_lambda_baseline_loss(baselines: Tensor, returns) -> Tensor:
    """Mean squared error between predicted values and (constant) TD(lambda) targets."""
    targets = _as_f64("returns", returns, baselines.shape[0]).astype(baselines.dtype)
    diff = ops.sub(baselines, targets)
    return ops.mean(ops.mul(diff, diff))


def kl_divergence(target_logits: Tensor, reference_logits: np.ndarray, mask=None) -> Tensor:
    """KL(pi_target || pi_reference) over the masked support."""
    mask = np.ones(target_logits.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    probs = ops.softmax_with_temperature(target_logits, 1.0, mask)
    logp = ops.log_softmax(target_logits, mask)
    ref = ops.masked_log_softmax_np(np.asarray(reference_logits, dtype=np.float64), mask).astype(target_logits.dtype)
    return ops.sum(ops.mul(probs, ops.sub(logp, ref)))


def kl_loss(steps: Sequence[Sequence[tuple[Tensor, np.ndarray, Optional[np.ndarray]]]]) -> Tensor:
    """Per step, sum the KL of every (target, reference, mask) head; average over steps."""
    if not steps:
        raise TrajectoryError("no steps to compare")
    per_step = []
    for heads in steps:
        terms = [kl_divergence(t, r, m) for t, r, m in heads]
        total = terms[0]
        for term in terms[1:]:
            total = ops.add(total, term)
        per_step.append(ops.reshape(total, ()))
    return ops.mean(ops.stack(per_step))


def normalized_entropy(logits: Tensor, mask=None) -> Tensor:
    """Entropy divided by log(#valid choices); zero when only one choice is valid."""
    mask = np.ones(logits.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n_valid = int(mask.sum())
    if n_valid <= 1:
        return Tensor(0.0, dtype=logits.dtype)
    probs = ops.softmax_with_temperature(logits, 1.0, mask)
    logp = ops.log_softmax(logits, mask)
    return ops.div(ops.neg(ops.sum(ops.mul(probs, logp))), math.log(n_valid))


def entropy_loss(logits: Sequence[Tensor], masks=None) -> Tensor:
    """Negative mean normalised entropy; minimising it keeps the policy exploratory."""
    if not logits:
        raise TrajectoryError("no logits to regularise")
    masks = masks if masks is not None else [None] * len(logits)
    terms = [ops.reshape(normalized_entropy(lg, m), ()) for lg, m in zip(logits, masks)]
    return ops.neg(ops.mean(ops.stack(terms)))
