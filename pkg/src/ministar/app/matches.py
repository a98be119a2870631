"""Agents and seeded head-to-head games."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Protocol

import numpy as np
from tqdm import tqdm

from ministar.domain.net_config import NetConfig
from ministar.domain.policy_net import PolicyNet
from ministar.drivers.microrts import ArgsAction, EnvConfig, MicroRTS, Replay
from ministar.drivers.scripted import LEVELS, scripted_policy
from ministar.errors import ConfigError

log = logging.getLogger(__name__)


class Agent(Protocol):
    def reset(self) -> None: ...

    def act(self, env: MicroRTS, player: int) -> ArgsAction: ...


class ScriptedAgent:
    def __init__(self, level: str, seed: int = 0):
        self.level = level
        self.seed = seed
        self.policy = scripted_policy(level, seed)

    def reset(self) -> None:
        self.policy = scripted_policy(self.level, self.seed)

    def act(self, env: MicroRTS, player: int) -> ArgsAction:
        return self.policy(env, player)


class NetAgent:
    """Drives a PolicyNet from the player's own observations only."""

    def __init__(self, policy: PolicyNet, seed: int = 0, greedy: bool = False):
        self.policy = policy
        self.seed = seed
        self.greedy = greedy
        self.reset()

    def reset(self) -> None:
        self.rng = np.random.default_rng(self.seed)
        self.hidden = self.policy.initial_state()

    def act(self, env: MicroRTS, player: int) -> ArgsAction:
        out = self.policy.step(env.observe(player), env.action_masks(player), self.hidden, self.rng, greedy=self.greedy)
        self.hidden = out.hidden
        return out.action


AgentFactory = Callable[[int], Agent]


def policy_from_params(net: NetConfig, params: Mapping[str, np.ndarray]) -> PolicyNet:
    policy = PolicyNet(net)
    policy.load_state_dict(dict(params))
    policy.eval()
    return policy


def agent_factory(agent: str, net: Optional[NetConfig] = None,
                  params: Optional[Mapping[str, np.ndarray]] = None, greedy: bool = False) -> AgentFactory:
    """`agent` is a scripted level name or "net" (which needs `net` and `params`)."""
    if agent in LEVELS:
        return lambda seed: ScriptedAgent(agent, seed)
    if agent == "net":
        if net is None or params is None:
            raise ConfigError("a network agent needs a config and parameters", key="checkpoint")
        policy = policy_from_params(net, params)
        return lambda seed: NetAgent(policy, seed, greedy)
    raise ConfigError(f"unknown agent {agent!r}; use one of {LEVELS} or a checkpoint", key="opponent")


@dataclass
class GameResult:
    winner: Optional[int]
    frames: int
    replay: Replay


def play_game(env_cfg: EnvConfig, agent0: Agent, agent1: Agent, seed: int) -> GameResult:
    env = MicroRTS(env_cfg)
    env.reset(seed)
    agent0.reset()
    agent1.reset()
    replay = Replay(seed, env_cfg.digest())
    while not env.is_final:
        a0, a1 = agent0.act(env, 0), agent1.act(env, 1)
        replay.frames.append((a0, a1))
        env.step(a0, a1)
    replay.winner = env.winner
    return GameResult(env.winner, env.frame, replay)


@dataclass
class EvalReport:
    wins: int = 0
    draws: int = 0
    losses: int = 0

    @property
    def games(self) -> int:
        return self.wins + self.draws + self.losses

    @property
    def win_rate(self) -> float:
        if self.games == 0:
            return 0.5
        return (self.wins + 0.5 * self.draws) / self.games

    def add(self, winner: Optional[int], seat: int) -> None:
        if winner is None:
            self.draws += 1
        elif winner == seat:
            self.wins += 1
        else:
            self.losses += 1

    def line(self) -> str:
        return f"games={self.games} wins={self.wins} draws={self.draws} losses={self.losses} win_rate={self.win_rate:.3f}"


def evaluate(env_cfg: EnvConfig, make_a: AgentFactory, make_b: AgentFactory, games: int, seed: int,
             progress: bool = False) -> EvalReport:
    """Win rate of A against B over seeded games played in mirrored pairs.

    Each map seed is played twice with the seats swapped, and the agent in a
    seat draws its randomness from (map seed, seat); an agent evaluated
    against itself therefore scores exactly 0.5.
    """
    report = EvalReport()
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=(games + 1) // 2)
    for g in tqdm(range(games), desc="eval", disable=not progress):
        map_seed = int(seeds[g // 2])
        seat_a = g % 2
        seat_seeds = (map_seed * 2 + 1, map_seed * 2 + 2)
        a = make_a(seat_seeds[seat_a])
        b = make_b(seat_seeds[1 - seat_a])
        players = (a, b) if seat_a == 0 else (b, a)
        result = play_game(env_cfg, players[0], players[1], map_seed)
        report.add(result.winner, seat_a)
    log.info("[eval] %s", report.line())
    return report
