"""Hand-written opponents and demonstrators.

Both read the live environment, so they are only usable on the actor side
of the game loop (never from observations alone).
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from ministar.drivers.microrts import (
    NOOP,
    QUEUEABLE,
    SELECTS_UNITS,
    TARGETS_LOCATION,
    TARGETS_UNIT,
    ActionType,
    ArgsAction,
    MicroRTS,
    Unit,
    UnitKind,
    chebyshev,
)
from ministar.errors import ConfigError

ScriptedPolicy = Callable[[MicroRTS, int], ArgsAction]

LEVELS = ("random", "greedy")


class RandomPolicy:
    """Uniform over every legal choice, one head at a time."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def __call__(self, env: MicroRTS, player: int) -> ArgsAction:
        rng = self.rng
        masks = env.action_masks(player)
        obs_ids = env.slot_ids(player)
        t = ActionType(int(rng.choice(np.flatnonzero(masks.type_mask))))
        if t == ActionType.NOOP:
            return NOOP
        delay = int(rng.integers(1, env.config.max_delay + 1))
        queue = bool(t in QUEUEABLE and rng.random() < 0.5)
        units: tuple[int, ...] = ()
        if SELECTS_UNITS[t]:
            slots = np.flatnonzero(masks.unit_selection_mask[t])
            k = int(rng.integers(1, min(len(slots), env.config.max_selected) + 1))
            units = tuple(sorted(obs_ids[int(i)] for i in rng.choice(slots, size=k, replace=False)))
        target_unit = None
        if t in TARGETS_UNIT:
            target_unit = obs_ids[int(rng.choice(np.flatnonzero(masks.target_unit_mask[t])))]
        location = None
        if t in TARGETS_LOCATION:
            ego = int(rng.choice(np.flatnonzero(masks.location_mask[t])))
            location = env.ego_to_board(player, ego)
        return ArgsAction(t, delay, queue, units, target_unit, location)


class GreedyPolicy:
    """Builds fighters when it can afford them, sends fighters at the nearest
    enemy and parks its worker on minerals."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def __call__(self, env: MicroRTS, player: int) -> ArgsAction:
        masks = env.action_masks(player)
        own = env.units(player)
        enemies = env.units(1 - player)
        fighters = [u for u in own if u.kind == UnitKind.FIGHTER][: env.config.max_selected]

        if masks.type_mask[ActionType.BUILD]:
            build = self._build(env, player, own, enemies)
            if build is not None:
                return build

        if masks.type_mask[ActionType.ATTACK] and fighters:
            target = _nearest(fighters[0], enemies)
            if not all(_attacking(env, f, target.id) for f in fighters):
                return ArgsAction(ActionType.ATTACK, selected_units=tuple(f.id for f in fighters), target_unit=target.id)

        worker = next((u for u in own if u.kind == UnitKind.WORKER), None)
        if worker is not None and worker.position not in env.mineral_cells and not env.orders(worker.id):
            free = [c for c in env.mineral_cells if env.unit_at(c) is None]
            if free:
                goal = min(free, key=lambda c: (chebyshev(worker.position, c), c))
                return ArgsAction(ActionType.MOVE, selected_units=(worker.id,), target_location=goal)

        return NOOP

    def _build(self, env: MicroRTS, player: int, own: list[Unit], enemies: list[Unit]) -> Optional[ArgsAction]:
        bases = [u for u in own if u.kind == UnitKind.BASE]
        if not bases:
            return None
        size = env.config.map_size
        masks = env.action_masks(player)
        cells = [env.ego_to_board(player, idx) for idx in np.flatnonzero(masks.location_mask[ActionType.BUILD])]
        if not cells:
            return None
        aim = enemies[0].position if enemies else (size // 2, size // 2)
        cell = min(cells, key=lambda c: (chebyshev(c, aim), c))
        return ArgsAction(ActionType.BUILD, selected_units=(bases[0].id,), target_location=cell)


def _nearest(origin: Unit, candidates: list[Unit]) -> Unit:
    return min(candidates, key=lambda u: (chebyshev(origin.position, u.position), u.id))


def _attacking(env: MicroRTS, unit: Unit, target_id: int) -> bool:
    orders = env.orders(unit.id)
    return bool(orders) and orders[0].action_type == ActionType.ATTACK and orders[0].target_unit == target_id


def scripted_policy(level: str, seed: int = 0) -> ScriptedPolicy:
    if level == "random":
        return RandomPolicy(seed)
    if level == "greedy":
        return GreedyPolicy(seed)
    raise ConfigError(f"unknown scripted level {level!r}; expected one of {LEVELS}", key="opponent")
