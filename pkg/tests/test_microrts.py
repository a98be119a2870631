import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ministar.drivers.microrts import (
    NOOP,
    ActionType,
    ArgsAction,
    EnvConfig,
    MicroRTS,
    Replay,
    UnitKind,
)
from ministar.drivers.scripted import GreedyPolicy, RandomPolicy, scripted_policy
from ministar.errors import ConfigError, MinistarError, RejectedActionError


def fresh(seed=0, **kw):
    env = MicroRTS(EnvConfig(**kw))
    env.reset(seed)
    return env


def own(env, player, kind):
    return next(u for u in env.units(player) if u.kind == kind)


# ===== reset and observation =====

def test_reset_is_deterministic():
    a, b = fresh(7), fresh(7)
    for p in (0, 1):
        assert a.observe(p).fingerprint() == b.observe(p).fingerprint()
    assert any(fresh(s).observe(0).fingerprint() != a.observe(0).fingerprint() for s in range(8, 12))


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_start_is_mirror_symmetric_from_each_side(seed):
    env = fresh(seed)
    o0, o1 = env.observe(0), env.observe(1)
    np.testing.assert_array_equal(o0.entity_state, o1.entity_state)
    np.testing.assert_array_equal(o0.scalar_state, o1.scalar_state)
    np.testing.assert_array_equal(o0.spatial_state, o1.spatial_state)
    assert env.supply(0) == env.supply(1) == 3


def test_observation_shapes_follow_config():
    cfg = EnvConfig()
    obs = fresh().observe(0)
    assert obs.entity_state.shape[0] == cfg.max_entities
    assert obs.spatial_state.shape == (cfg.map_channels, cfg.minimap_size, cfg.minimap_size)
    assert obs.num_entities == 6
    assert obs.entity_ids[6:] == (-1,) * (cfg.max_entities - 6)


def test_own_units_come_first():
    env = fresh(3)
    for p in (0, 1):
        obs = env.observe(p)
        owners = [env.unit(uid).owner for uid in obs.entity_ids if uid >= 0]
        assert owners == [p] * 3 + [1 - p] * 3


@given(st.integers(0, 63), st.integers(0, 1))
def test_egocentric_index_roundtrip(index, player):
    obs = fresh().observe(player)
    cell = obs.to_board(index)
    assert obs.to_ego_index(cell) == index
    if player == 1:
        r, c = divmod(index, obs.map_size)
        assert cell == (obs.map_size - 1 - r, obs.map_size - 1 - c)


def test_config_rejects_bad_geometry():
    with pytest.raises(ValueError):
        EnvConfig(map_size=8, minimap_size=12)
    with pytest.raises(ValueError):
        EnvConfig(max_entities=8, supply_cap=5)


# ===== masks and validation =====

def test_initial_masks():
    env = fresh()
    m = env.action_masks(0)
    assert m.type_mask[ActionType.NOOP] and m.type_mask[ActionType.MOVE] and m.type_mask[ActionType.ATTACK]
    assert not m.type_mask[ActionType.BUILD]  # no minerals yet
    slots = env.slot_ids(0)
    fighter = own(env, 0, UnitKind.FIGHTER)
    worker = own(env, 0, UnitKind.WORKER)
    assert m.unit_selection_mask[ActionType.ATTACK, slots.index(fighter.id)]
    assert not m.unit_selection_mask[ActionType.ATTACK, slots.index(worker.id)]
    assert m.target_unit_mask[ActionType.ATTACK, 3:6].all() and not m.target_unit_mask[ActionType.ATTACK, :3].any()
    assert m.queue_mask.tolist() == [False, False, True, True, True]


def test_rejections_name_the_violated_mask():
    env = fresh()
    worker = own(env, 0, UnitKind.WORKER)
    fighter = own(env, 0, UnitKind.FIGHTER)
    base = own(env, 0, UnitKind.BASE)
    enemy = own(env, 1, UnitKind.BASE)
    cases = {
        "type_mask": ArgsAction(ActionType.BUILD, selected_units=(base.id,), target_location=(0, 0)),
        "delay": ArgsAction(ActionType.MOVE, delay=0, selected_units=(worker.id,), target_location=(4, 4)),
        "queue_mask": ArgsAction(ActionType.STOP, queue=True, selected_units=(worker.id,)),
        "unit_selection_mask": ArgsAction(ActionType.ATTACK, selected_units=(worker.id,), target_unit=enemy.id),
        "target_unit_mask": ArgsAction(ActionType.ATTACK, selected_units=(fighter.id,), target_unit=worker.id),
        "location_mask": ArgsAction(ActionType.MOVE, selected_units=(fighter.id,), target_location=base.position),
    }
    for mask, action in cases.items():
        with pytest.raises(RejectedActionError) as info:
            env.validate(0, action)
        assert info.value.mask == mask


def test_duplicate_selection_is_rejected():
    env = fresh()
    fighter = own(env, 0, UnitKind.FIGHTER)
    enemy = own(env, 1, UnitKind.FIGHTER)
    with pytest.raises(RejectedActionError):
        env.validate(0, ArgsAction(ActionType.ATTACK, selected_units=(fighter.id, fighter.id), target_unit=enemy.id))


def test_rejected_action_leaves_state_untouched():
    env = fresh()
    before = env.observe(0).fingerprint()
    with pytest.raises(RejectedActionError):
        env.step(ArgsAction(ActionType.STOP), NOOP)
    assert env.frame == 0
    assert env.observe(0).fingerprint() == before


def fuzz(games, seed):
    """Random mask-respecting play; returns (actions checked, rejections)."""
    checked = rejected = 0
    for g in range(games):
        env = fresh(seed + g)
        bots = RandomPolicy(seed + 100 + g), RandomPolicy(seed + 200 + g)
        while not env.is_final:
            actions = bots[0](env, 0), bots[1](env, 1)
            for p, a in enumerate(actions):
                checked += 1
                try:
                    env.validate(p, a)
                except RejectedActionError:
                    rejected += 1
            env.step(*actions)
    return checked, rejected


def test_masked_random_actions_are_always_accepted():
    checked, rejected = fuzz(2, 0)
    assert checked > 0 and rejected == 0


@pytest.mark.slow
def test_ten_thousand_masked_actions_are_accepted():
    checked, rejected = fuzz(12, 1000)
    assert checked >= 10_000
    assert rejected == 0


# ===== dynamics =====

def test_all_noop_game_ends_in_a_draw_at_frame_limit():
    env = fresh(max_game_frames=20)
    while not env.is_final:
        r = env.step(NOOP, NOOP)
        assert r.rewards == (0.0, 0.0)
    assert env.frame == 20 and env.winner is None


def test_delayed_order_arrives_on_time():
    env = fresh()
    worker = own(env, 0, UnitKind.WORKER)
    free = [env.ego_to_board(0, int(i)) for i in np.flatnonzero(env.action_masks(0).location_mask[ActionType.MOVE])]
    goal = max(free, key=lambda c: (max(abs(c[0] - worker.position[0]), abs(c[1] - worker.position[1])), c))
    env.step(ArgsAction(ActionType.MOVE, delay=3, selected_units=(worker.id,), target_location=goal), NOOP)
    assert env.orders(worker.id) == ()
    env.step(NOOP, NOOP)
    assert env.orders(worker.id) == ()
    env.step(NOOP, NOOP)
    assert env.orders(worker.id)[0].target_location == goal


def test_worker_on_minerals_funds_a_build():
    env = fresh(5, max_game_frames=200)
    greedy = GreedyPolicy()
    built = False
    while not env.is_final and env.frame < 200:
        env.step(greedy(env, 0), NOOP)
        if len(env.units(0)) > 3:
            built = True
            break
    assert built
    assert sum(1 for u in env.units(0) if u.kind == UnitKind.FIGHTER) == 2


@given(st.integers(0, 1000))
@settings(max_examples=5, deadline=None)
def test_unit_health_never_increases(seed):
    env = fresh(seed, max_game_frames=150)
    bots = RandomPolicy(seed), GreedyPolicy()
    seen = {u.id: u.health for u in env.units()}
    while not env.is_final:
        env.step(bots[0](env, 0), bots[1](env, 1))
        for player in (0, 1):
            survivors = [u for u in env.units(player) if u.id in seen]
            assert sum(u.health for u in survivors) <= sum(seen[u.id] for u in survivors)
        for u in env.units():
            if u.id not in seen:
                assert u.kind == UnitKind.FIGHTER and u.health == u.stats.max_health
            assert u.health <= seen.get(u.id, u.health)
            seen[u.id] = u.health


def test_rewards_are_zero_sum_and_terminal_only():
    env = fresh(2)
    bots = GreedyPolicy(), RandomPolicy(2)
    total = [0.0, 0.0]
    while not env.is_final:
        r = env.step(bots[0](env, 0), bots[1](env, 1))
        assert r.rewards[0] == -r.rewards[1]
        if not r.is_final:
            assert r.rewards == (0.0, 0.0)
        total = [total[0] + r.rewards[0], total[1] + r.rewards[1]]
    expected = {0: 1.0, 1: -1.0, None: 0.0}[env.winner]
    assert total[0] == expected


def test_step_after_game_over_raises():
    env = fresh(max_game_frames=1)
    env.step(NOOP, NOOP)
    with pytest.raises(MinistarError):
        env.step(NOOP, NOOP)


def test_reward_hook_replaces_outcome():
    env = MicroRTS(EnvConfig(max_game_frames=3), reward_fn=lambda e, p, outcome: 0.25)
    env.reset(0)
    assert env.step(NOOP, NOOP).rewards == (0.25, 0.25)


# ===== replays and scripted players =====

def test_replay_playback_reproduces_the_game():
    cfg = EnvConfig()
    env = MicroRTS(cfg)
    env.reset(11)
    bots = GreedyPolicy(), RandomPolicy(4)
    replay = Replay(11, cfg.digest())
    while not env.is_final:
        a = bots[0](env, 0), bots[1](env, 1)
        replay.frames.append(a)
        env.step(*a)
    again = replay.play_back(cfg)
    assert again.winner == env.winner
    assert again.observe(0).fingerprint() == env.observe(0).fingerprint()


def test_replay_refuses_other_config():
    replay = Replay(0, EnvConfig().digest())
    with pytest.raises(MinistarError):
        replay.play_back(EnvConfig(max_game_frames=9))


def test_scripted_policy_levels():
    assert isinstance(scripted_policy("random", 1), RandomPolicy)
    assert isinstance(scripted_policy("greedy"), GreedyPolicy)
    with pytest.raises(ConfigError):
        scripted_policy("grandmaster")


@pytest.mark.slow
def test_greedy_beats_random():
    wins = games = 0
    for seed in range(40):
        env = fresh(seed)
        seat = seed % 2
        bots = {seat: GreedyPolicy(), 1 - seat: RandomPolicy(seed)}
        while not env.is_final:
            env.step(bots[0](env, 0), bots[1](env, 1))
        games += 1
        wins += env.winner == seat
    assert wins / games > 0.8
