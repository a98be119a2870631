"""Actor threads, the learner, and the loop that ties them together.

Actors play games with a read-only parameter snapshot and push batches of
trajectories into a bounded queue; the single learner pulls exactly
`batch_size` trajectories per update, applies the clipped Adam step and
publishes the next snapshot. With `actors == 0` both sides run on the
calling thread, which makes a run reproducible bit for bit.
"""

from __future__ import annotations

import logging
import queue
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Optional, Union

import numpy as np
from tqdm import tqdm

from ministar.adapters.metrics_csv import CsvSink
from ministar.app.matches import Agent, AgentFactory, NetAgent, evaluate
from ministar.domain.net_config import NetConfig
from ministar.domain.policy_net import PolicyNet
from ministar.domain.rl import RLConfig, reference_records, trajectory_loss
from ministar.domain.trajectory import Trajectory, TrajectoryStep
from ministar.drivers.microrts import EnvConfig, MicroRTS
from ministar.errors import NonFiniteError
from ministar.ndgrad import ops
from ministar.ndgrad.optim import Adam, clip_by_global_norm
from ministar.ndgrad.store import ParamStore, Snapshot
from ministar.ndgrad.tensor import GradTape

log = logging.getLogger(__name__)

RL_FIELDS = [
    "version", "total", "pg", "baseline", "upgo", "kl", "entropy", "grad_norm",
    "trajectories", "frames", "staleness", "value_mean", "return", "rolling_win_rate", "eval_win_rate",
]


class RollingWindow:
    """Most recent game outcomes of one player (+1 win, 0 draw, -1 loss)."""

    def __init__(self, size: int):
        self.buf: Deque[float] = deque(maxlen=size)
        self._lock = threading.Lock()

    def add(self, outcome: float) -> None:
        with self._lock:
            self.buf.append(outcome)

    def size(self) -> int:
        return len(self.buf)

    def win_rate(self) -> Optional[float]:
        with self._lock:
            if not self.buf:
                return None
            return sum((o + 1) / 2 for o in self.buf) / len(self.buf)


# ===== COLLECTION =====

@dataclass
class LearningSeat:
    """A seat whose moves come from the learning policy and are recorded."""

    player_id: str
    policy: PolicyNet
    version: int


Seat = Union[LearningSeat, Agent]


@dataclass
class _Chunk:
    initial_hidden: tuple
    steps: list[TrajectoryStep] = field(default_factory=list)


@dataclass
class Episode:
    trajectories: list[Trajectory]
    winner: Optional[int]
    frames: int


def collect_episode(env_cfg: EnvConfig, seats: tuple[Seat, Seat], seed: int, rng: np.random.Generator,
                    sequence_length: int) -> Episode:
    """Play one game and cut every learning seat's experience into chunks."""
    env = MicroRTS(env_cfg)
    env.reset(seed)
    hidden = {}
    chunks: dict[int, _Chunk] = {}
    for s, seat in enumerate(seats):
        if isinstance(seat, LearningSeat):
            hidden[s] = seat.policy.initial_state()
            chunks[s] = _Chunk(hidden[s].arrays())
        else:
            seat.reset()

    out: list[Trajectory] = []
    while not env.is_final:
        actions, records = [], {}
        for s, seat in enumerate(seats):
            if isinstance(seat, LearningSeat):
                obs, masks = env.observe(s), env.action_masks(s)
                step = seat.policy.step(obs, masks, hidden[s], rng)
                hidden[s] = step.hidden
                records[s] = (obs, env.observe(1 - s), masks, step)
                actions.append(step.action)
            else:
                actions.append(seat.act(env, s))
        result = env.step(actions[0], actions[1])
        for s, (obs, opp_obs, masks, step) in records.items():
            chunk = chunks[s]
            chunk.steps.append(TrajectoryStep(
                obs, opp_obs, masks, step.action, step.records(), result.rewards[s], result.is_final,
            ))
            seat = seats[s]
            if result.is_final:
                out.append(Trajectory(seat.player_id, seat.version, chunk.initial_hidden, chunk.steps))
            elif len(chunk.steps) == sequence_length:
                out.append(Trajectory(
                    seat.player_id, seat.version, chunk.initial_hidden, chunk.steps,
                    result.observations[s], result.observations[1 - s], env.action_masks(s),
                ))
                chunks[s] = _Chunk(hidden[s].arrays())
    return Episode(out, env.winner, env.frame)


# ===== MATCH SOURCES =====

@dataclass
class Match:
    learner_seat: int
    opponent: Optional[AgentFactory]  # None means self-play: both seats learn


class FixedOpponent:
    """Every game is against the same opponent; seats alternate."""

    def __init__(self, opponent: AgentFactory, window: int = 100):
        self.opponent = opponent
        self.outcomes = RollingWindow(window)
        self._lock = threading.Lock()
        self._games = 0

    def next_match(self) -> Match:
        with self._lock:
            seat = self._games % 2
            self._games += 1
        return Match(seat, self.opponent)

    def report(self, match: Match, winner: Optional[int]) -> None:
        self.outcomes.add(0.0 if winner is None else (1.0 if winner == match.learner_seat else -1.0))


def _snapshot_policy(net: NetConfig, snap: Snapshot, policy: Optional[PolicyNet]) -> PolicyNet:
    policy = policy or PolicyNet(net)
    policy.load_state_dict(dict(snap.params))
    return policy.eval()


def play_match(env_cfg: EnvConfig, net: NetConfig, source: FixedOpponent, policy: PolicyNet, version: int,
               seed: int, rng: np.random.Generator) -> Episode:
    match = source.next_match()
    me = LearningSeat("learner", policy, version)
    if match.opponent is None:
        seats: tuple[Seat, Seat] = (me, me)
    else:
        other = match.opponent(seed + 1)
        seats = (me, other) if match.learner_seat == 0 else (other, me)
    episode = collect_episode(env_cfg, seats, seed, rng, net.sequence_length)
    source.report(match, episode.winner)
    return episode


class ActorThread(threading.Thread):
    """Plays games forever, refreshing its snapshot before each one."""

    def __init__(self, index: int, env_cfg: EnvConfig, net: NetConfig, store: ParamStore, source: FixedOpponent,
                 sink: "queue.Queue[list[Trajectory]]", stop: threading.Event, seed: int, per_send: int):
        super().__init__(name=f"actor-{index}", daemon=True)
        self.env_cfg = env_cfg
        self.net = net
        self.store = store
        self.source = source
        self.sink = sink
        self.stop_event = stop
        self.rng = np.random.default_rng(seed)
        self.per_send = per_send
        self.policy: Optional[PolicyNet] = None
        self.version = -1
        self.failures = 0

    def _put(self, batch: list[Trajectory]) -> None:
        while not self.stop_event.is_set():
            try:
                self.sink.put(batch, timeout=0.1)
                return
            except queue.Full:
                continue

    def run(self) -> None:
        pending: list[Trajectory] = []
        while not self.stop_event.is_set():
            snap = self.store.latest()
            if snap.version != self.version:
                self.policy = _snapshot_policy(self.net, snap, self.policy)
                self.version = snap.version
            seed = int(self.rng.integers(0, 2**31 - 1))
            try:
                episode = play_match(self.env_cfg, self.net, self.source, self.policy, self.version, seed, self.rng)
            except Exception:
                self.failures += 1
                log.exception("[actor] %s: episode with seed %d failed; restarting", self.name, seed)
                continue
            for traj in episode.trajectories:
                pending.append(traj)
                if len(pending) == self.per_send:
                    self._put(pending)
                    pending = []


# ===== LEARNER =====

@dataclass
class UpdateResult:
    version: int
    terms: dict[str, float]
    grad_norm: float


class Learner:
    """The only writer of the policy parameters."""

    def __init__(self, policy: PolicyNet, cfg: RLConfig, store: Optional[ParamStore] = None,
                 reference: Optional[PolicyNet] = None):
        self.policy = policy
        self.cfg = cfg
        self.params = policy.parameters()
        self.optimizer = Adam(self.params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps)
        self.store = store or ParamStore(policy.state_dict())
        self.reference = reference

    def update(self, batch: list[Trajectory]) -> UpdateResult:
        if not batch:
            raise ValueError("empty batch")
        refs = [reference_records(self.reference, t) if self.reference is not None and self.cfg.use_kl else None for t in batch]
        sums: dict[str, float] = {}
        with GradTape() as tape:
            losses = []
            for traj, ref in zip(batch, refs):
                part = trajectory_loss(self.policy, traj, self.cfg, ref)
                losses.append(ops.reshape(part.total, ()))
                for k, v in part.terms.items():
                    sums[k] = sums.get(k, 0.0) + v
            total = ops.mean(ops.stack(losses))
        terms = {k: v / len(batch) for k, v in sums.items()}
        terms["total"] = total.item()
        if not all(np.isfinite(v) for v in terms.values()):
            raise NonFiniteError(f"non-finite loss terms {terms}")
        names = list(self.params)
        grads = dict(zip(names, tape.gradient(total, [self.params[n] for n in names])))
        clipped, norm = clip_by_global_norm(grads, self.cfg.clip_norm)
        self.optimizer.step(clipped)
        snap = self.store.publish(self.policy.state_dict())
        staleness = [snap.version - 1 - t.policy_version for t in batch]
        terms["staleness"] = float(np.mean(staleness))
        terms["trajectories"] = float(len(batch))
        terms["frames"] = float(sum(len(t) for t in batch))
        return UpdateResult(snap.version, terms, norm)


# ===== LOOP =====

@dataclass
class RLRun:
    learner: Learner
    updates: int
    interrupted: bool = False
    history: list[dict] = field(default_factory=list)
    actor_failures: int = 0


def handoff_queue(cfg: RLConfig, batch_size: int) -> "queue.Queue[list[Trajectory]]":
    """Actor-to-learner channel holding at most `queue_factor * batch_size` trajectories.

    Each put carries `trajectories_per_send` of them, so the bound is in sends.
    """
    return queue.Queue(maxsize=max(1, cfg.queue_factor * batch_size // cfg.trajectories_per_send))


def run_rl(
    policy: PolicyNet,
    net: NetConfig,
    env_cfg: EnvConfig,
    cfg: RLConfig,
    opponent: AgentFactory,
    seed: int,
    reference: Optional[PolicyNet] = None,
    sink: Optional[CsvSink] = None,
    updates: Optional[int] = None,
    progress: bool = False,
    on_update: Optional[Callable[[UpdateResult], None]] = None,
) -> RLRun:
    """Train `policy` against a fixed opponent for `updates` learner steps."""
    updates = cfg.updates if updates is None else updates
    learner = Learner(policy, cfg, reference=reference)
    source = FixedOpponent(opponent, cfg.outcome_window)
    run = RLRun(learner, 0)
    batch_size = net.batch_size
    buffer: list[Trajectory] = []
    rng = np.random.default_rng(seed)

    stop = threading.Event()
    handoff = handoff_queue(cfg, batch_size)
    actors = [
        ActorThread(i, env_cfg, net, learner.store, source, handoff, stop, int(rng.integers(0, 2**31 - 1)),
                    cfg.trajectories_per_send)
        for i in range(cfg.actors)
    ]
    actor_policy: Optional[PolicyNet] = None
    actor_version = -1
    for actor in actors:
        actor.start()
    log.info("[rl] %d updates, batch %d, %d actor threads", updates, batch_size, len(actors))

    bar = tqdm(total=updates, desc="rl", disable=not progress)
    try:
        while run.updates < updates:
            while len(buffer) < batch_size:
                if actors:
                    buffer.extend(handoff.get())
                else:
                    snap = learner.store.latest()
                    if snap.version != actor_version:
                        actor_policy = _snapshot_policy(net, snap, actor_policy)
                        actor_version = snap.version
                    game_seed = int(rng.integers(0, 2**31 - 1))
                    buffer.extend(play_match(env_cfg, net, source, actor_policy, actor_version, game_seed, rng).trajectories)
            batch, buffer = buffer[:batch_size], buffer[batch_size:]
            result = learner.update(batch)
            run.updates += 1
            row = {"version": result.version, "grad_norm": result.grad_norm, **result.terms,
                   "rolling_win_rate": source.outcomes.win_rate()}
            if cfg.eval_every and cfg.eval_games and run.updates % cfg.eval_every == 0:
                frozen = _snapshot_policy(net, learner.store.latest(), None)
                factory = lambda s, p=frozen: NetAgent(p, s)
                row["eval_win_rate"] = evaluate(env_cfg, factory, opponent, cfg.eval_games, seed + run.updates).win_rate
            row = {k: v for k, v in row.items() if k in RL_FIELDS}
            run.history.append(row)
            if sink is not None:
                sink.append(row)
            if on_update is not None:
                on_update(result)
            log.info("[rl] v%d total=%.4f pg=%.4f grad=%.3f win=%s", result.version, result.terms["total"],
                     result.terms.get("pg", 0.0), result.grad_norm, row.get("rolling_win_rate"))
            bar.update(1)
    except KeyboardInterrupt:
        run.interrupted = True
        log.warning("[rl] interrupted after %d updates", run.updates)
    finally:
        bar.close()
        stop.set()
        for actor in actors:
            actor.join(timeout=5.0)
        run.actor_failures = sum(a.failures for a in actors)
    return run
