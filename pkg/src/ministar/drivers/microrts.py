"""Deterministic two-player grid RTS used as the game for every learner.

Each player starts with a base, a worker and a fighter on a seeded,
180-degree symmetric map. Commands take effect after a chosen delay,
units execute their order queues, and a player loses when its last base
falls. Observations are egocentric: player 1 sees the board rotated so
that both players look at the same picture of a symmetric start.
"""

from __future__ import annotations

import hashlib
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator

from ministar.errors import MinistarError, RejectedActionError

log = logging.getLogger(__name__)


class ActionType(IntEnum):
    NOOP = 0
    STOP = 1
    MOVE = 2
    ATTACK = 3
    BUILD = 4


class UnitKind(IntEnum):
    WORKER = 0
    FIGHTER = 1
    BASE = 2


N_ACTION_TYPES = len(ActionType)
N_UNIT_KINDS = len(UnitKind)


@dataclass(frozen=True)
class KindStats:
    max_health: int
    damage: int
    attack_range: int
    cooldown: int
    mobile: bool
    armor: int


KIND_STATS = {
    UnitKind.WORKER: KindStats(max_health=3, damage=0, attack_range=0, cooldown=0, mobile=True, armor=0),
    UnitKind.FIGHTER: KindStats(max_health=5, damage=2, attack_range=1, cooldown=2, mobile=True, armor=0),
    UnitKind.BASE: KindStats(max_health=10, damage=0, attack_range=0, cooldown=0, mobile=False, armor=1),
}

# which kinds obey which command
ACCEPTING_KINDS = {
    ActionType.NOOP: frozenset(),
    ActionType.STOP: frozenset({UnitKind.WORKER, UnitKind.FIGHTER}),
    ActionType.MOVE: frozenset({UnitKind.WORKER, UnitKind.FIGHTER}),
    ActionType.ATTACK: frozenset({UnitKind.FIGHTER}),
    ActionType.BUILD: frozenset({UnitKind.BASE}),
}
SELECTS_UNITS = {t: bool(kinds) for t, kinds in ACCEPTING_KINDS.items()}
TARGETS_UNIT = frozenset({ActionType.ATTACK})
TARGETS_LOCATION = frozenset({ActionType.MOVE, ActionType.BUILD})
QUEUEABLE = frozenset({ActionType.MOVE, ActionType.ATTACK, ActionType.BUILD})

ENTITY_FEATURES = (
    "is_own", "is_enemy", "is_worker", "is_fighter", "is_base",
    "row", "col", "health_frac", "health", "cooldown_frac",
    "has_orders", "damage", "armor",
)
ENTITY_FEATURE_SIZE = len(ENTITY_FEATURES)

SCALAR_LAYOUT = (
    ("minerals", 1),
    ("supply", 2),
    ("frame", 1),
    ("available_actions", N_ACTION_TYPES),
    ("own_counts", N_UNIT_KINDS),
    ("enemy_counts", N_UNIT_KINDS),
    ("own_health", 1),
    ("enemy_health", 1),
)
SCALAR_CONTEXT = ("available_actions", "own_counts", "enemy_counts")
SCALAR_SIZE = sum(width for _, width in SCALAR_LAYOUT)

SPATIAL_PLANES = ("height", "visibility", "minerals", "own_units", "enemy_units", "own_health", "enemy_health")

NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))


class EnvConfig(BaseModel):
    map_size: int = Field(8, ge=6, le=64)
    minimap_size: int = Field(16, ge=4)
    map_channels: int = Field(8, ge=len(SPATIAL_PLANES))
    max_entities: int = Field(8, ge=6)
    max_selected: int = Field(4, ge=1)
    max_delay: int = Field(4, ge=1)
    max_game_frames: int = Field(512, ge=1)
    build_cost: int = Field(6, ge=0)
    supply_cap: Optional[int] = Field(None, ge=3)
    sight_range: int = Field(3, ge=0)

    @model_validator(mode="after")
    def _check_geometry(self) -> "EnvConfig":
        if self.minimap_size % self.map_size:
            raise ValueError(f"minimap_size {self.minimap_size} is not a multiple of map_size {self.map_size}")
        if 2 * self.cap > self.max_entities:
            raise ValueError(f"supply cap {self.cap} per player overflows {self.max_entities} entity slots")
        return self

    @property
    def cap(self) -> int:
        return self.supply_cap if self.supply_cap is not None else self.max_entities // 2

    def digest(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode()).hexdigest()[:12]


@dataclass(frozen=True)
class ArgsAction:
    """One command. Units are given by id, locations as absolute board cells."""

    action_type: int
    delay: int = 1
    queue: bool = False
    selected_units: tuple[int, ...] = ()
    target_unit: Optional[int] = None
    target_location: Optional[tuple[int, int]] = None


NOOP = ArgsAction(ActionType.NOOP)


@dataclass
class Unit:
    id: int
    owner: int
    kind: UnitKind
    position: tuple[int, int]
    health: int
    weapon_cooldown: int = 0

    @property
    def stats(self) -> KindStats:
        return KIND_STATS[self.kind]


@dataclass(frozen=True)
class Order:
    action_type: ActionType
    target_unit: Optional[int] = None
    target_location: Optional[tuple[int, int]] = None


@dataclass(frozen=True, eq=False)
class ActionMasks:
    """Which choices are legal right now, indexed by action type.

    Entity masks follow the observation's slot order; location masks are
    flattened egocentric board cells.
    """

    type_mask: np.ndarray
    queue_mask: np.ndarray
    unit_selection_mask: np.ndarray
    target_unit_mask: np.ndarray
    location_mask: np.ndarray


@dataclass(frozen=True, eq=False)
class MsState:
    player: int
    frame: int
    map_size: int
    entity_state: np.ndarray
    entity_valid: np.ndarray
    entity_ids: tuple[int, ...]
    scalar_state: np.ndarray
    spatial_state: np.ndarray

    @property
    def num_entities(self) -> int:
        return int(self.entity_valid.sum())

    def slot_of(self, unit_id: int) -> int:
        try:
            return self.entity_ids.index(unit_id)
        except ValueError:
            raise RejectedActionError("unit_selection_mask", f"unit {unit_id} is not observed") from None

    def to_board(self, ego_index: int) -> tuple[int, int]:
        r, c = divmod(int(ego_index), self.map_size)
        return _mirror((r, c), self.player, self.map_size)

    def to_ego_index(self, cell: tuple[int, int]) -> int:
        r, c = _mirror(tuple(cell), self.player, self.map_size)
        return r * self.map_size + c

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.entity_state, self.entity_valid, self.scalar_state, self.spatial_state):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class StepResult:
    observations: tuple[MsState, MsState]
    rewards: tuple[float, float]
    is_final: bool
    winner: Optional[int] = None


@dataclass(order=True)
class _Pending:
    due: int
    seq: int
    player: int = field(compare=False)
    action: ArgsAction = field(compare=False)


RewardFn = Callable[["MicroRTS", int, float], float]


def outcome_reward(env: "MicroRTS", player: int, outcome: float) -> float:
    return outcome


def _mirror(cell: tuple[int, int], player: int, size: int) -> tuple[int, int]:
    if player == 0:
        return int(cell[0]), int(cell[1])
    return size - 1 - int(cell[0]), size - 1 - int(cell[1])


def chebyshev(a: tuple[int, int], b: tuple[int, int]) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


class MicroRTS:
    def __init__(self, config: EnvConfig | None = None, reward_fn: RewardFn | None = None):
        self.config = config or EnvConfig()
        self.reward_fn = reward_fn or outcome_reward
        self._units: dict[int, Unit] = {}
        self._orders: dict[int, deque[Order]] = {}
        self._pending: list[_Pending] = []
        self._minerals = [0, 0]
        self._frame = 0
        self._seq = 0
        self._next_id = 0
        self._final = True
        self._winner: Optional[int] = None
        self.height = np.zeros((self.config.map_size,) * 2, dtype=np.int64)
        self.mineral_cells: frozenset[tuple[int, int]] = frozenset()
        self.seed: Optional[int] = None

    # ===== PUBLIC STATE =====

    @property
    def frame(self) -> int:
        return self._frame

    @property
    def is_final(self) -> bool:
        return self._final

    @property
    def winner(self) -> Optional[int]:
        return self._winner

    @property
    def minerals(self) -> tuple[int, int]:
        return self._minerals[0], self._minerals[1]

    def units(self, owner: Optional[int] = None) -> list[Unit]:
        return [u for _, u in sorted(self._units.items()) if owner is None or u.owner == owner]

    def unit(self, unit_id: int) -> Optional[Unit]:
        return self._units.get(unit_id)

    def unit_at(self, cell: tuple[int, int]) -> Optional[Unit]:
        for u in self._units.values():
            if u.position == tuple(cell):
                return u
        return None

    def orders(self, unit_id: int) -> tuple[Order, ...]:
        return tuple(self._orders.get(unit_id, ()))

    def supply(self, player: int) -> int:
        return sum(1 for u in self._units.values() if u.owner == player)

    def slot_ids(self, player: int) -> list[int]:
        """Unit ids in the entity-slot order of `player`'s observation."""
        return [u.id for u in self._slots(player)]

    def ego_to_board(self, player: int, ego_index: int) -> tuple[int, int]:
        r, c = divmod(int(ego_index), self.config.map_size)
        return _mirror((r, c), player, self.config.map_size)

    # ===== LIFECYCLE =====

    def reset(self, seed: int) -> tuple[MsState, MsState]:
        cfg = self.config
        rng = np.random.default_rng(seed)
        size = cfg.map_size
        half = size // 2
        raw = rng.integers(0, 3, size=(size, size))
        self.height = np.maximum(raw, np.rot90(raw, 2))

        cells = [(r, c) for r in range(half) for c in range(half)]
        base_candidates = [(r, c) for r, c in cells if r <= half - 2 and c <= half - 2]
        base = base_candidates[int(rng.integers(len(base_candidates)))]
        free = [cell for cell in cells if cell != base]
        picks = rng.choice(len(free), size=4, replace=False)
        worker, fighter, ore_a, ore_b = (free[int(i)] for i in picks)

        self._units = {}
        self._orders = {}
        self._pending = []
        self._minerals = [0, 0]
        self._frame = 0
        self._seq = 0
        self._next_id = 0
        self._final = False
        self._winner = None
        self.seed = seed
        for player in (0, 1):
            for kind, cell in ((UnitKind.BASE, base), (UnitKind.WORKER, worker), (UnitKind.FIGHTER, fighter)):
                self._spawn(player, kind, _mirror(cell, player, size))
        self.mineral_cells = frozenset(_mirror(c, p, size) for c in (ore_a, ore_b) for p in (0, 1))
        log.debug("[env] reset seed=%s base=%s", seed, base)
        return self.observe(0), self.observe(1)

    def _spawn(self, owner: int, kind: UnitKind, cell: tuple[int, int]) -> Unit:
        unit = Unit(self._next_id, owner, kind, cell, KIND_STATS[kind].max_health)
        self._units[unit.id] = unit
        self._orders[unit.id] = deque()
        self._next_id += 1
        return unit

    # ===== OBSERVATION =====

    def _slots(self, player: int) -> list[Unit]:
        own = [u for u in self.units() if u.owner == player]
        enemy = [u for u in self.units() if u.owner != player]
        return (own + enemy)[: self.config.max_entities]

    def observe(self, player: int) -> MsState:
        cfg = self.config
        size = cfg.map_size
        slots = self._slots(player)
        entity = np.zeros((cfg.max_entities, ENTITY_FEATURE_SIZE), dtype=np.float32)
        valid = np.zeros(cfg.max_entities, dtype=bool)
        ids = [-1] * cfg.max_entities
        for i, u in enumerate(slots):
            r, c = _mirror(u.position, player, size)
            st = u.stats
            entity[i] = (
                u.owner == player, u.owner != player,
                u.kind == UnitKind.WORKER, u.kind == UnitKind.FIGHTER, u.kind == UnitKind.BASE,
                r / (size - 1), c / (size - 1),
                u.health / st.max_health, u.health / 10.0,
                u.weapon_cooldown / max(st.cooldown, 1),
                bool(self._orders.get(u.id)),
                st.damage / 2.0, st.armor / 2.0,
            )
            valid[i] = True
            ids[i] = u.id
        masks = self.action_masks(player)
        return MsState(
            player=player,
            frame=self._frame,
            map_size=size,
            entity_state=entity,
            entity_valid=valid,
            entity_ids=tuple(ids),
            scalar_state=self._scalar(player, masks),
            spatial_state=self._spatial(player),
        )

    def _scalar(self, player: int, masks: ActionMasks) -> np.ndarray:
        cfg = self.config
        own = [u for u in self._units.values() if u.owner == player]
        enemy = [u for u in self._units.values() if u.owner != player]

        def counts(units):
            return [sum(1 for u in units if u.kind == k) / cfg.max_entities for k in UnitKind]

        full = cfg.cap * KIND_STATS[UnitKind.BASE].max_health
        values = [
            min(1.0, self._minerals[player] / max(4 * cfg.build_cost, 1)),
            len(own) / cfg.max_entities, cfg.cap / cfg.max_entities,
            self._frame / cfg.max_game_frames,
            *masks.type_mask.astype(float),
            *counts(own),
            *counts(enemy),
            sum(u.health for u in own) / full,
            sum(u.health for u in enemy) / full,
        ]
        return np.asarray(values, dtype=np.float32)

    def _spatial(self, player: int) -> np.ndarray:
        cfg = self.config
        size = cfg.map_size
        planes = np.zeros((len(SPATIAL_PLANES), size, size), dtype=np.float32)
        planes[0] = self.height / 2.0
        for cell in self.mineral_cells:
            planes[2][cell] = 1.0
        for u in self._units.values():
            own = u.owner == player
            planes[3 if own else 4][u.position] = 1.0
            planes[5 if own else 6][u.position] = u.health / u.stats.max_health
            if own:
                r, c = u.position
                r0, c0 = max(0, r - cfg.sight_range), max(0, c - cfg.sight_range)
                planes[1, r0:r + cfg.sight_range + 1, c0:c + cfg.sight_range + 1] = 1.0
        if player == 1:
            planes = np.rot90(planes, 2, axes=(1, 2))
        scale = cfg.minimap_size // size
        up = planes.repeat(scale, axis=1).repeat(scale, axis=2)
        out = np.zeros((cfg.map_channels, cfg.minimap_size, cfg.minimap_size), dtype=np.float32)
        out[: len(SPATIAL_PLANES)] = up
        return out

    # ===== MASKS =====

    def action_masks(self, player: int) -> ActionMasks:
        cfg = self.config
        size = cfg.map_size
        slots = self._slots(player)
        n_types = N_ACTION_TYPES
        unit_sel = np.zeros((n_types, cfg.max_entities), dtype=bool)
        target_unit = np.zeros((n_types, cfg.max_entities), dtype=bool)
        location = np.zeros((n_types, size * size), dtype=bool)
        occupied = {u.position for u in self._units.values()}
        own_bases = [u for u in self._units.values() if u.owner == player and u.kind == UnitKind.BASE]

        for i, u in enumerate(slots):
            if u.owner == player:
                for t in ActionType:
                    unit_sel[t, i] = u.kind in ACCEPTING_KINDS[t]
            else:
                target_unit[ActionType.ATTACK, i] = True

        for r in range(size):
            for c in range(size):
                if (r, c) in occupied:
                    continue
                ego = _mirror((r, c), player, size)
                idx = ego[0] * size + ego[1]
                location[ActionType.MOVE, idx] = True
                if any(chebyshev(b.position, (r, c)) == 1 for b in own_bases):
                    location[ActionType.BUILD, idx] = True

        type_mask = np.zeros(n_types, dtype=bool)
        type_mask[ActionType.NOOP] = True
        type_mask[ActionType.STOP] = unit_sel[ActionType.STOP].any()
        type_mask[ActionType.MOVE] = unit_sel[ActionType.MOVE].any() and location[ActionType.MOVE].any()
        type_mask[ActionType.ATTACK] = unit_sel[ActionType.ATTACK].any() and target_unit[ActionType.ATTACK].any()
        type_mask[ActionType.BUILD] = (
            unit_sel[ActionType.BUILD].any()
            and location[ActionType.BUILD].any()
            and self._minerals[player] >= cfg.build_cost
            and self.supply(player) < cfg.cap
        )
        queue_mask = np.array([t in QUEUEABLE for t in ActionType], dtype=bool)
        return ActionMasks(type_mask, queue_mask, unit_sel, target_unit, location)

    def validate(self, player: int, action: ArgsAction) -> None:
        """Raise RejectedActionError naming the first mask the action violates."""
        cfg = self.config
        masks = self.action_masks(player)
        t = action.action_type
        if not 0 <= t < N_ACTION_TYPES or not masks.type_mask[t]:
            raise RejectedActionError("type_mask", f"action type {t} is not available")
        t = ActionType(t)
        if not 1 <= action.delay <= cfg.max_delay:
            raise RejectedActionError("delay", f"delay {action.delay} outside 1..{cfg.max_delay}")
        if action.queue and not masks.queue_mask[t]:
            raise RejectedActionError("queue_mask", f"{t.name} cannot be queued")

        ids = [u.id for u in self._slots(player)]
        units = action.selected_units
        if SELECTS_UNITS[t]:
            if not units or len(units) > cfg.max_selected or len(set(units)) != len(units):
                raise RejectedActionError("unit_selection_mask", f"bad selection {units}")
            for uid in units:
                if uid not in ids or not masks.unit_selection_mask[t, ids.index(uid)]:
                    raise RejectedActionError("unit_selection_mask", f"unit {uid} cannot take {t.name}")
        elif units:
            raise RejectedActionError("unit_selection_mask", f"{t.name} takes no units")

        if t in TARGETS_UNIT:
            uid = action.target_unit
            if uid is None or uid not in ids or not masks.target_unit_mask[t, ids.index(uid)]:
                raise RejectedActionError("target_unit_mask", f"unit {uid} is not a valid target")
        elif action.target_unit is not None:
            raise RejectedActionError("target_unit_mask", f"{t.name} takes no target unit")

        if t in TARGETS_LOCATION:
            loc = action.target_location
            size = cfg.map_size
            if loc is None or not (0 <= loc[0] < size and 0 <= loc[1] < size):
                raise RejectedActionError("location_mask", f"location {loc} is off the board")
            ego = _mirror(loc, player, size)
            if not masks.location_mask[t, ego[0] * size + ego[1]]:
                raise RejectedActionError("location_mask", f"location {loc} is not valid for {t.name}")
        elif action.target_location is not None:
            raise RejectedActionError("location_mask", f"{t.name} takes no location")

    # ===== STEP =====

    def step(self, action0: ArgsAction, action1: ArgsAction) -> StepResult:
        if self._final:
            raise MinistarError("game is over; call reset")
        actions = (action0, action1)
        for player, action in enumerate(actions):
            self.validate(player, action)
        for player, action in enumerate(actions):
            if action.action_type != ActionType.NOOP:
                self._pending.append(_Pending(self._frame + action.delay - 1, self._seq, player, action))
                self._seq += 1

        self._deliver()
        self._move_phase()
        self._attack_phase()
        self._build_phase()
        self._cleanup()
        self._frame += 1

        outcome = self._check_terminal()
        rewards = (
            float(self.reward_fn(self, 0, outcome)),
            float(self.reward_fn(self, 1, -outcome)),
        )
        return StepResult((self.observe(0), self.observe(1)), rewards, self._final, self._winner)

    def _deliver(self) -> None:
        self._pending.sort()
        due = [p for p in self._pending if p.due <= self._frame]
        self._pending = [p for p in self._pending if p.due > self._frame]
        for p in due:
            a = p.action
            t = ActionType(a.action_type)
            for uid in a.selected_units:
                unit = self._units.get(uid)
                if unit is None or unit.owner != p.player:
                    continue
                queue = self._orders[uid]
                if t == ActionType.STOP:
                    queue.clear()
                    continue
                order = Order(t, a.target_unit, a.target_location)
                if not a.queue:
                    queue.clear()
                queue.append(order)

    def _step_toward(self, unit: Unit, goal: tuple[int, int], occupied: set[tuple[int, int]]) -> None:
        size = self.config.map_size
        here = chebyshev(unit.position, goal)
        best, best_key = None, None
        for dr, dc in NEIGHBOURS:
            cell = (unit.position[0] + dr, unit.position[1] + dc)
            if not (0 <= cell[0] < size and 0 <= cell[1] < size) or cell in occupied:
                continue
            d = chebyshev(cell, goal)
            key = (d, abs(cell[0] - goal[0]) + abs(cell[1] - goal[1]))
            if d < here and (best_key is None or key < best_key):
                best, best_key = cell, key
        if best is not None:
            occupied.discard(unit.position)
            occupied.add(best)
            unit.position = best

    def _move_phase(self) -> None:
        occupied = {u.position for u in self._units.values()}
        for uid, unit in sorted(self._units.items()):
            queue = self._orders[uid]
            if not queue or not unit.stats.mobile:
                continue
            order = queue[0]
            if order.action_type == ActionType.MOVE:
                goal = order.target_location
                if unit.position != goal:
                    self._step_toward(unit, goal, occupied)
                if unit.position == goal or (goal in occupied and chebyshev(unit.position, goal) <= 1):
                    queue.popleft()
            elif order.action_type == ActionType.ATTACK:
                target = self._units.get(order.target_unit)
                if target is None:
                    queue.popleft()
                elif chebyshev(unit.position, target.position) > unit.stats.attack_range:
                    self._step_toward(unit, target.position, occupied)

    def _attack_phase(self) -> None:
        damage: dict[int, int] = {}
        for uid, unit in sorted(self._units.items()):
            queue = self._orders[uid]
            if not queue or queue[0].action_type != ActionType.ATTACK or unit.weapon_cooldown > 0:
                continue
            target = self._units.get(queue[0].target_unit)
            st = unit.stats
            if target is None or chebyshev(unit.position, target.position) > st.attack_range:
                continue
            damage[target.id] = damage.get(target.id, 0) + max(1, st.damage - target.stats.armor)
            unit.weapon_cooldown = st.cooldown
        for uid, amount in damage.items():
            self._units[uid].health -= amount

    def _build_phase(self) -> None:
        cfg = self.config
        for uid, unit in sorted(self._units.items()):
            queue = self._orders[uid]
            if not queue or queue[0].action_type != ActionType.BUILD:
                continue
            order = queue.popleft()
            player = unit.owner
            if (
                self.unit_at(order.target_location) is None
                and self._minerals[player] >= cfg.build_cost
                and self.supply(player) < cfg.cap
            ):
                self._minerals[player] -= cfg.build_cost
                self._spawn(player, UnitKind.FIGHTER, tuple(order.target_location))

    def _cleanup(self) -> None:
        for uid in [uid for uid, u in self._units.items() if u.health <= 0]:
            del self._units[uid]
            del self._orders[uid]
        for uid, queue in self._orders.items():
            while queue and queue[0].action_type == ActionType.ATTACK and queue[0].target_unit not in self._units:
                queue.popleft()
        for unit in self._units.values():
            if unit.weapon_cooldown > 0:
                unit.weapon_cooldown -= 1
            if unit.kind == UnitKind.WORKER and unit.position in self.mineral_cells and not self._orders[unit.id]:
                self._minerals[unit.owner] += 1

    def _check_terminal(self) -> float:
        alive = [any(u.owner == p and u.kind == UnitKind.BASE for u in self._units.values()) for p in (0, 1)]
        if not all(alive):
            self._final = True
            if alive[0]:
                self._winner = 0
                return 1.0
            if alive[1]:
                self._winner = 1
                return -1.0
            return 0.0
        if self._frame >= self.config.max_game_frames:
            self._final = True
        return 0.0


@dataclass
class Replay:
    """Everything needed to reproduce a game bit for bit."""

    seed: int
    config_digest: str
    frames: list[tuple[ArgsAction, ArgsAction]] = field(default_factory=list)
    winner: Optional[int] = None

    def play_back(self, config: EnvConfig) -> MicroRTS:
        if config.digest() != self.config_digest:
            raise MinistarError(f"replay recorded under config {self.config_digest}, not {config.digest()}")
        env = MicroRTS(config)
        env.reset(self.seed)
        for a0, a1 in self.frames:
            env.step(a0, a1)
        return env
