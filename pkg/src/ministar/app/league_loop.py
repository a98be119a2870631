"""League training: every active player learns from the matches the coordinator assigns it."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from tqdm import tqdm

from ministar.adapters.metrics_csv import CsvSink
from ministar.app.actor_learner import Learner, LearningSeat, Seat, collect_episode
from ministar.app.matches import NetAgent
from ministar.domain.league import League
from ministar.domain.net_config import NetConfig
from ministar.domain.policy_net import PolicyNet
from ministar.domain.rl import RLConfig
from ministar.domain.trajectory import Trajectory
from ministar.drivers.microrts import EnvConfig

log = logging.getLogger(__name__)

LEAGUE_FIELDS = [
    "match", "learner", "opponent", "weighting", "winner", "frames",
    "version", "total", "grad_norm", "steps_trained", "checkpoint",
]


@dataclass
class _Trainee:
    learner: Learner
    buffer: list[Trajectory] = field(default_factory=list)


@dataclass
class LeagueRun:
    matches: int = 0
    updates: int = 0
    checkpoints: list[str] = field(default_factory=list)
    interrupted: bool = False


def run_league(league: League, net: NetConfig, env_cfg: EnvConfig, rl_cfg: RLConfig, matches: int, seed: int,
               reference: Optional[PolicyNet] = None, sink: Optional[CsvSink] = None,
               progress: bool = False) -> LeagueRun:
    """Play `matches` coordinator-assigned games on the calling thread.

    The learner's seat alternates with the assignment tick. Self-play
    matches record both seats; otherwise only the learner's.
    """
    trainees: dict[str, _Trainee] = {}
    for p in league.active:
        policy = PolicyNet(net)
        policy.load_state_dict(dict(league.params[p.id]))
        trainees[p.id] = _Trainee(Learner(policy, rl_cfg, reference=reference))
    opponent_policy = PolicyNet(net).eval()
    rng = np.random.default_rng(seed)
    run = LeagueRun()

    bar = tqdm(total=matches, desc="league", disable=not progress)
    try:
        for _ in range(matches):
            match = league.next_match()
            trainee = trainees[match.learner]
            learner = trainee.learner
            me = LearningSeat(match.learner, learner.policy, learner.store.version)
            game_seed = int(rng.integers(0, 2**31 - 1))
            if match.opponent == match.learner:
                seats: tuple[Seat, Seat] = (me, me)
                seat = 0
            else:
                opponent_policy.load_state_dict(dict(league.params[match.opponent]))
                other = NetAgent(opponent_policy, game_seed + 1)
                seat = match.tick % 2
                seats = (me, other) if seat == 0 else (other, me)
            episode = collect_episode(env_cfg, seats, game_seed, rng, net.sequence_length)
            if episode.winner is None:
                winner = None
            else:
                winner = match.learner if episode.winner == seat else match.opponent
            league.report_outcome(match, winner)
            run.matches += 1

            row = {
                "match": match.tick, "learner": match.learner, "opponent": match.opponent,
                "weighting": match.weighting.value if match.weighting else "-",
                "winner": winner or "draw", "frames": episode.frames,
            }
            trainee.buffer.extend(episode.trajectories)
            while len(trainee.buffer) >= net.batch_size:
                batch, trainee.buffer = trainee.buffer[:net.batch_size], trainee.buffer[net.batch_size:]
                result = learner.update(batch)
                run.updates += 1
                league.update_params(match.learner, learner.policy.state_dict())
                league.add_steps(match.learner, sum(len(t) for t in batch))
                row.update(version=result.version, total=result.terms["total"], grad_norm=result.grad_norm)
                frozen = league.maybe_checkpoint(match.learner)
                if frozen is not None:
                    run.checkpoints.append(frozen.id)
                    row["checkpoint"] = frozen.id
            row["steps_trained"] = league.player(match.learner).steps_trained
            if sink is not None:
                sink.append(row)
            log.debug("[league] %s vs %s -> %s", match.learner, match.opponent, row["winner"])
            bar.update(1)
    except KeyboardInterrupt:
        run.interrupted = True
        log.warning("[league] interrupted after %d matches", run.matches)
    finally:
        bar.close()
    log.info("[league] %d matches, %d updates, %d checkpoints", run.matches, run.updates, len(run.checkpoints))
    return run
