"""League bookkeeping: players, payoff matrix, PFSP matchmaking and checkpoints."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Literal, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from ministar.errors import LeagueError
from ministar.ndgrad.store import freeze, params_digest

log = logging.getLogger(__name__)


class AgentType(str, Enum):
    MAIN_PLAYER = "MP"
    MAIN_EXPLOITER = "ME"
    LEAGUE_EXPLOITER = "LE"


class Weighting(str, Enum):
    LINEAR = "linear"
    LINEAR_CAPPED = "linear_capped"
    VARIANCE = "variance"
    SQUARED = "squared"


class LeagueConfig(BaseModel):
    main_players: int = Field(1, ge=1)
    main_exploiters: int = Field(1, ge=0)
    league_exploiters: int = Field(1, ge=0)
    main_branch_prob: float = Field(0.5, ge=0, le=1)
    main_pool: Literal["all", "main"] = "all"
    hard_threshold: float = Field(0.3, ge=0, le=1)
    exploiter_threshold: float = Field(0.1, ge=0, le=1)
    min_games: int = Field(3, ge=0)
    checkpoint_win_rate: float = Field(0.7, ge=0, le=1)
    checkpoint_steps: int = Field(50_000, ge=1)
    matches: int = Field(200, ge=0)

    @property
    def learners(self) -> int:
        return self.main_players + self.main_exploiters + self.league_exploiters


# ===== PFSP =====

def pfsp_weight(win_rate: float, weighting: Weighting | str) -> float:
    p = float(win_rate)
    if not 0.0 <= p <= 1.0:
        raise LeagueError(f"win rate {p} outside [0, 1]")
    try:
        w = Weighting(weighting)
    except ValueError:
        raise LeagueError(f"unknown weighting {weighting!r}") from None
    if w is Weighting.LINEAR:
        return 1.0 - p
    if w is Weighting.SQUARED:
        return (1.0 - p) ** 2
    if w is Weighting.VARIANCE:
        return p * (1.0 - p)
    return min(0.5, 1.0 - p)


def pfsp_probabilities(win_rates: Sequence[float], weighting: Weighting | str) -> np.ndarray:
    """Normalised PFSP weights; uniform when every weight is zero."""
    if len(win_rates) == 0:
        raise LeagueError("no candidates to sample from")
    weights = np.array([pfsp_weight(p, weighting) for p in win_rates], dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        return np.full(len(weights), 1.0 / len(weights))
    return weights / total


def pfsp_sample(candidates: Sequence[str], win_rates: Sequence[float], weighting: Weighting | str,
                rng: np.random.Generator) -> str:
    if not candidates:
        raise LeagueError("no candidates to sample from")
    if len(candidates) != len(win_rates):
        raise LeagueError("candidates and win rates differ in length")
    probs = pfsp_probabilities(win_rates, weighting)
    return candidates[int(rng.choice(len(candidates), p=probs))]


# ===== PAYOFF =====

class PayoffMatrix:
    """Win/draw/loss counters per ordered pair, updated symmetrically under a lock.

    A game against oneself counts once, as a draw, so it always rates 0.5.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._counts: dict[tuple[str, str], list[int]] = {}

    def _entry(self, i: str, j: str) -> list[int]:
        return self._counts.setdefault((i, j), [0, 0, 0])

    def record(self, i: str, j: str, outcome: int) -> None:
        """`outcome` is +1 if i won, -1 if j won, 0 for a draw."""
        if outcome not in (-1, 0, 1):
            raise LeagueError(f"bad outcome {outcome}")
        with self._lock:
            if i == j:
                self._entry(i, i)[1] += 1
                return
            a, b = self._entry(i, j), self._entry(j, i)
            if outcome == 1:
                a[0] += 1
                b[2] += 1
            elif outcome == -1:
                a[2] += 1
                b[0] += 1
            else:
                a[1] += 1
                b[1] += 1

    def counts(self, i: str, j: str) -> tuple[int, int, int]:
        with self._lock:
            return tuple(self._counts.get((i, j), (0, 0, 0)))

    def games(self, i: str, j: str) -> int:
        return sum(self.counts(i, j))

    def win_rate(self, i: str, j: str) -> float:
        wins, draws, losses = self.counts(i, j)
        games = wins + draws + losses
        if games == 0:
            return 0.5
        return (wins + 0.5 * draws) / games

    def rows(self) -> list[tuple[str, str, int, int, int]]:
        with self._lock:
            return [(i, j, *c) for (i, j), c in sorted(self._counts.items())]

    def load_rows(self, rows: Sequence[tuple[str, str, int, int, int]]) -> None:
        with self._lock:
            self._counts = {(i, j): [int(w), int(d), int(l)] for i, j, w, d, l in rows}


# ===== PLAYERS =====

@dataclass
class LeaguePlayer:
    id: str
    agent_type: AgentType
    is_historical: bool = False
    parent: Optional[str] = None
    steps_trained: int = 0
    last_checkpoint_steps: int = 0
    checkpoints: int = 0


@dataclass(frozen=True)
class MatchAssignment:
    learner: str
    opponent: str
    weighting: Optional[Weighting]
    tick: int


class League:
    """The coordinator: one lock serialises matchmaking, reports and checkpoints."""

    def __init__(self, cfg: LeagueConfig, initial_params: Mapping[str, np.ndarray], seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.payoff = PayoffMatrix()
        self.players: dict[str, LeaguePlayer] = {}
        self.params: dict[str, Mapping[str, np.ndarray]] = {}
        self._lock = threading.RLock()
        self._tick = 0
        self._cursor = 0
        counts = (
            (AgentType.MAIN_PLAYER, cfg.main_players),
            (AgentType.MAIN_EXPLOITER, cfg.main_exploiters),
            (AgentType.LEAGUE_EXPLOITER, cfg.league_exploiters),
        )
        for agent_type, n in counts:
            for k in range(n):
                self._register(LeaguePlayer(f"{agent_type.value}{k}", agent_type), initial_params)

    @classmethod
    def restore(cls, cfg: LeagueConfig, players: Sequence[LeaguePlayer], params: Mapping[str, Mapping[str, np.ndarray]],
                payoff_rows: Sequence[tuple], rng_state: dict, tick: int = 0, cursor: int = 0) -> "League":
        """Rebuild a coordinator from persisted state."""
        league = cls.__new__(cls)
        league.cfg = cfg
        league.rng = np.random.default_rng()
        league.rng.bit_generator.state = rng_state
        league.payoff = PayoffMatrix()
        league.payoff.load_rows(payoff_rows)
        league.players = {}
        league.params = {}
        league._lock = threading.RLock()
        league._tick = tick
        league._cursor = cursor
        for p in players:
            league._register(p, params[p.id])
        return league

    @property
    def counters(self) -> tuple[int, int]:
        return self._tick, self._cursor

    def _register(self, player: LeaguePlayer, params: Mapping[str, np.ndarray]) -> LeaguePlayer:
        if player.id in self.players:
            raise LeagueError(f"player {player.id} already registered")
        self.players[player.id] = player
        self.params[player.id] = freeze(params)
        return player

    # --- registry views ---

    def player(self, player_id: str) -> LeaguePlayer:
        try:
            return self.players[player_id]
        except KeyError:
            raise LeagueError(f"unknown player {player_id}") from None

    @property
    def active(self) -> list[LeaguePlayer]:
        return [p for p in self.players.values() if not p.is_historical]

    def historical(self, parent: Optional[str] = None, agent_type: Optional[AgentType] = None) -> list[LeaguePlayer]:
        return [
            p for p in self.players.values()
            if p.is_historical
            and (parent is None or p.parent == parent)
            and (agent_type is None or p.agent_type == agent_type)
        ]

    def main_players(self) -> list[LeaguePlayer]:
        return [p for p in self.active if p.agent_type == AgentType.MAIN_PLAYER]

    def snapshot_digest(self, player_id: str) -> str:
        return params_digest(self.params[player_id])

    def update_params(self, player_id: str, params: Mapping[str, np.ndarray]) -> None:
        with self._lock:
            if self.player(player_id).is_historical:
                raise LeagueError(f"historical player {player_id} is frozen")
            self.params[player_id] = freeze(params)

    # --- matchmaking ---

    def _assign(self, learner: str, opponent: str, weighting: Optional[Weighting]) -> MatchAssignment:
        if opponent not in self.players:
            raise LeagueError(f"opponent {opponent} is not registered")
        self._tick += 1
        return MatchAssignment(learner, opponent, weighting, self._tick)

    def _pfsp(self, learner: str, pool: Sequence[LeaguePlayer], weighting: Weighting) -> str:
        ids = [p.id for p in pool]
        rates = [self.payoff.win_rate(learner, i) for i in ids]
        return pfsp_sample(ids, rates, weighting, self.rng)

    def _main_player_opponent(self, player: LeaguePlayer, branch: Optional[int]) -> MatchAssignment:
        if self.cfg.main_pool == "main":
            pool = self.historical(agent_type=AgentType.MAIN_PLAYER)
        else:
            pool = self.historical()
        if branch is None:
            branch = 1 if self.rng.random() < self.cfg.main_branch_prob else 2
        if branch == 1 and pool:
            return self._assign(player.id, self._pfsp(player.id, pool, Weighting.SQUARED), Weighting.SQUARED)

        mains = self.main_players()
        target = mains[int(self.rng.integers(len(mains)))]
        if not pool:
            return self._assign(player.id, target.id, None)
        too_hard = self.payoff.win_rate(player.id, target.id) < self.cfg.hard_threshold
        rare = self.payoff.games(player.id, target.id) < self.cfg.min_games
        past = self.historical(parent=target.id)
        if (too_hard or rare) and past:
            return self._assign(player.id, self._pfsp(player.id, past, Weighting.VARIANCE), Weighting.VARIANCE)
        return self._assign(player.id, target.id, None)

    def _main_exploiter_opponent(self, player: LeaguePlayer) -> MatchAssignment:
        mains = self.main_players()
        target = mains[int(self.rng.integers(len(mains)))]
        if self.payoff.win_rate(player.id, target.id) > self.cfg.exploiter_threshold:
            return self._assign(player.id, target.id, None)
        past = self.historical(parent=target.id)
        if not past:
            return self._assign(player.id, target.id, None)
        return self._assign(player.id, self._pfsp(player.id, past, Weighting.VARIANCE), Weighting.VARIANCE)

    def _league_exploiter_opponent(self, player: LeaguePlayer) -> MatchAssignment:
        pool = self.historical()
        if pool:
            return self._assign(player.id, self._pfsp(player.id, pool, Weighting.LINEAR_CAPPED), Weighting.LINEAR_CAPPED)
        others = [p for p in self.active if p.id != player.id] or [player]
        return self._assign(player.id, others[int(self.rng.integers(len(others)))].id, None)

    def choose_opponent(self, player_id: str, branch: Optional[int] = None) -> MatchAssignment:
        """Opponent for an active learner according to its agent type.

        `branch` pins the main player's coin flip (1: all-historical PFSP,
        2: pick a main player).
        """
        with self._lock:
            player = self.player(player_id)
            if player.is_historical:
                raise LeagueError(f"historical player {player_id} does not train")
            if player.agent_type == AgentType.MAIN_PLAYER:
                return self._main_player_opponent(player, branch)
            if player.agent_type == AgentType.MAIN_EXPLOITER:
                return self._main_exploiter_opponent(player)
            return self._league_exploiter_opponent(player)

    def next_match(self) -> MatchAssignment:
        """Round-robin over active learners."""
        with self._lock:
            learners = self.active
            player = learners[self._cursor % len(learners)]
            self._cursor += 1
            return self.choose_opponent(player.id)

    # --- outcomes and checkpoints ---

    def report_outcome(self, match: MatchAssignment, winner: Optional[str]) -> PayoffMatrix:
        """`winner` is a player id from the match, or None for a draw."""
        if winner is None:
            outcome = 0
        elif winner == match.learner:
            outcome = 1
        elif winner == match.opponent:
            outcome = -1
        else:
            raise LeagueError(f"{winner} did not play in {match}")
        with self._lock:
            self.payoff.record(match.learner, match.opponent, outcome)
        return self.payoff

    def add_steps(self, player_id: str, steps: int) -> None:
        with self._lock:
            self.player(player_id).steps_trained += int(steps)

    def maybe_checkpoint(self, player_id: str) -> Optional[LeaguePlayer]:
        """Freeze a historical copy once the player beats every historical
        opponent convincingly or has trained long enough since the last one."""
        cfg = self.cfg
        with self._lock:
            player = self.player(player_id)
            opponents = [p.id for p in self.historical()]
            strong = bool(opponents) and all(
                self.payoff.games(player.id, o) >= cfg.min_games
                and self.payoff.win_rate(player.id, o) > cfg.checkpoint_win_rate
                for o in opponents
            )
            long_enough = player.steps_trained - player.last_checkpoint_steps >= cfg.checkpoint_steps
            if not (strong or long_enough):
                return None
            player.checkpoints += 1
            player.last_checkpoint_steps = player.steps_trained
            frozen = LeaguePlayer(
                f"{player.id}-h{player.checkpoints}", player.agent_type, is_historical=True, parent=player.id,
                steps_trained=player.steps_trained,
            )
            self._register(frozen, self.params[player.id])
            log.info("[league] checkpoint %s (%s)", frozen.id, "win rate" if strong else "steps")
            return frozen
