"""Experience chunks passed from actors to the learner."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from ministar.domain.policy_net import HeadRecord
from ministar.drivers.microrts import ActionMasks, ArgsAction, MsState
from ministar.errors import TrajectoryError

Behavior = dict[str, Union[HeadRecord, list[HeadRecord]]]


@dataclass(frozen=True, eq=False)
class TrajectoryStep:
    observation: MsState
    opponent_observation: MsState
    masks: ActionMasks
    action: ArgsAction
    behavior: Behavior
    reward: float
    is_final: bool


@dataclass(eq=False)
class Trajectory:
    """Up to `sequence_length` consecutive steps of one player.

    `initial_hidden` is the core state before the first step. When the
    chunk stops short of the end of the game, the bootstrap fields hold
    the next observation so the learner can value the cut.
    """

    player_id: str
    policy_version: int
    initial_hidden: tuple[tuple[np.ndarray, np.ndarray], ...]
    steps: list[TrajectoryStep] = field(default_factory=list)
    bootstrap_observation: Optional[MsState] = None
    bootstrap_opponent_observation: Optional[MsState] = None
    bootstrap_masks: Optional[ActionMasks] = None

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def is_final(self) -> bool:
        return bool(self.steps) and self.steps[-1].is_final

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps], dtype=np.float64)

    def validate(self) -> None:
        if not self.steps:
            raise TrajectoryError("trajectory has no steps")
        if any(s.is_final for s in self.steps[:-1]):
            raise TrajectoryError("only the last step may end the game")
        needs_bootstrap = not self.is_final
        has_bootstrap = self.bootstrap_observation is not None and self.bootstrap_opponent_observation is not None
        if needs_bootstrap and not (has_bootstrap and self.bootstrap_masks is not None):
            raise TrajectoryError("unfinished trajectory is missing its bootstrap observation")
