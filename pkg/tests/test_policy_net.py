import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import attack_action, move_action
from ministar.domain.encoders import EntityEncoder, ScalarEncoder
from ministar.domain.heads import HeadOutput, squash
from ministar.domain.net_config import ARCHITECTURE_FIELDS, NetConfig, profile
from ministar.domain.policy_net import (
    HEAD_NAMES,
    PolicyNet,
    argmax_accuracy,
    ego_to_minimap_index,
    minimap_index_to_ego,
    minimap_location_mask,
)
from ministar.domain.sl import sl_loss
from ministar.drivers.microrts import (
    ENTITY_FEATURE_SIZE,
    N_ACTION_TYPES,
    NOOP,
    SCALAR_LAYOUT,
    SCALAR_SIZE,
    ActionType,
    MicroRTS,
)
from ministar.drivers.scripted import RandomPolicy
from ministar.errors import ConfigError, DimensionError, RejectedActionError
from ministar.ndgrad import GradTape, Tensor, ops, precision
from ministar.ndgrad.nn import MultiHeadAttention


# ===== configuration =====

# the reduced-architecture column the mini profile reproduces
MINI = dict(
    batch_size=96, sequence_length=64, max_entities=32, max_selected=384, minimap_size=64,
    embedding_size=1543, map_channels=18, scalar_encoder_fc_input=864, scalar_context_fc_input=448,
    scalar_feature_size=7327, entity_embedding_size=64, lstm_hidden_dim=128, lstm_layers=1,
    n_resblocks=4, original_1024=256, original_512=128, original_256=64, original_128=48,
    original_64=32, original_32=16, context_size=128, location_head_max_map_channels=32,
    autoregressive_embedding_size=256, baseline_input_size=1152, league_learner_num=4, actorloop_num=512,
)


def test_mini_profile_matches_reduced_architecture():
    cfg = profile("mini")
    assert set(ARCHITECTURE_FIELDS) == set(MINI)
    assert {k: getattr(cfg, k) for k in ARCHITECTURE_FIELDS} == MINI
    assert cfg == NetConfig()


def test_tiny_profile_widths_add_up(net_cfg):
    assert net_cfg.scalar_embedding_size + 2 * net_cfg.original_256 == net_cfg.embedding_size
    assert net_cfg.map_skip_size == 2


def test_profile_errors():
    with pytest.raises(ConfigError):
        profile("huge")
    with pytest.raises(ValueError):
        profile("tiny", minimap_size=20)
    with pytest.raises(ValueError):
        profile("tiny", embedding_size=32)


# ===== encoders =====

def random_entities(rng, n_valid, max_entities):
    state = np.zeros((max_entities, ENTITY_FEATURE_SIZE), dtype=np.float32)
    state[:n_valid] = rng.normal(size=(n_valid, ENTITY_FEATURE_SIZE))
    valid = np.zeros(max_entities, dtype=bool)
    valid[:n_valid] = True
    return state, valid


@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
@settings(max_examples=15, deadline=None)
def test_entity_encoder_is_permutation_equivariant(seed, n_valid):
    cfg = profile("tiny")
    enc = EntityEncoder(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(seed)
    state, valid = random_entities(rng, n_valid, cfg.max_entities)
    perm = np.arange(cfg.max_entities)
    perm[:n_valid] = rng.permutation(n_valid)
    a = enc(state, valid)
    b = enc(state[perm], valid[perm])
    np.testing.assert_allclose(b.entity_embeddings.data, a.entity_embeddings.data[perm], rtol=1e-4, atol=1e-5)
    np.testing.assert_allclose(b.embedded_entity.data, a.embedded_entity.data, rtol=1e-4, atol=1e-5)
    assert not a.entity_embeddings.data[n_valid:].any()


def test_entity_encoder_with_no_entities(net_cfg):
    enc = EntityEncoder(net_cfg, np.random.default_rng(0))
    state, valid = random_entities(np.random.default_rng(1), 0, net_cfg.max_entities)
    out = enc(state, valid)
    assert out.no_entities
    assert out.entity_embeddings.shape == (net_cfg.max_entities, net_cfg.entity_embedding_size)
    assert not out.entity_embeddings.data.any() and not out.embedded_entity.data.any()


def test_entity_encoder_rejects_wrong_shape(net_cfg):
    enc = EntityEncoder(net_cfg, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        enc(np.zeros((3, ENTITY_FEATURE_SIZE)), np.ones(3, dtype=bool))


def test_attention_rows_are_distributions_over_valid_entities():
    rng = np.random.default_rng(4)
    attn = MultiHeadAttention(16, 2, rng)
    valid = np.array([True] * 5 + [False] * 3)
    _, weights = attn(Tensor(rng.normal(size=(8, 16))), valid)
    assert weights.shape == (2, 8, 8)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, rtol=1e-5)
    assert np.all(weights[:, :, ~valid] < 1e-6)


def test_entity_encoder_returns_attention_per_layer(net_cfg):
    enc = EntityEncoder(net_cfg, np.random.default_rng(0))
    assert len(enc.layers) == 3
    state, valid = random_entities(np.random.default_rng(5), 5, net_cfg.max_entities)
    out = enc(state, valid)
    assert len(out.attention) == net_cfg.transformer_layers == 3
    n = net_cfg.max_entities
    for weights in out.attention:
        assert weights.shape == (net_cfg.transformer_heads, n, n)
        np.testing.assert_allclose(weights[:, valid, :].sum(axis=-1), 1.0, rtol=1e-5)
        assert not weights[:, :, ~valid].any()
    assert enc(*random_entities(np.random.default_rng(5), 0, n)).attention == []


def test_scalar_context_ignores_non_context_elements(net_cfg):
    enc = ScalarEncoder(net_cfg, np.random.default_rng(0))
    state = np.random.default_rng(2).uniform(size=SCALAR_SIZE).astype(np.float32)
    offsets = {}
    start = 0
    for name, width in SCALAR_LAYOUT:
        offsets[name] = start
        start += width
    bumped = state.copy()
    bumped[offsets["frame"]] += 5.0
    bumped[offsets["minerals"]] += 5.0
    emb_a, ctx_a = enc(state)
    emb_b, ctx_b = enc(bumped)
    np.testing.assert_array_equal(ctx_a.data, ctx_b.data)
    assert emb_a.shape == (net_cfg.scalar_embedding_size,)
    assert ctx_a.shape == (net_cfg.context_size,)


def test_spatial_skip_shape(net, env, net_cfg):
    skip, embedded = net.spatial_encoder(env.observe(0).spatial_state)
    assert skip.shape == (net_cfg.original_128, 2, 2)
    assert embedded.shape == (net_cfg.original_256,)


# ===== heads =====

def test_head_shapes_and_masked_probabilities(net, env, net_cfg):
    obs, masks = env.observe(0), env.action_masks(0)
    out = net.step(obs, masks, net.initial_state(), forced=move_action(env))
    assert out.heads["action_type"].logits.shape == (N_ACTION_TYPES,)
    assert out.heads["delay"].logits.shape == (net_cfg.max_delay,)
    assert out.heads["queue"].logits.shape == (2,)
    assert out.heads["target_unit"].logits.shape == (net_cfg.max_entities,)
    loc = out.heads["location"]
    assert loc.logits.shape == (net_cfg.minimap_size ** 2,)
    probs = ops.masked_softmax_np(out.heads["action_type"].logits.data, masks.type_mask)
    assert np.all(probs[~masks.type_mask] == 0)
    assert math.isclose(float(probs.sum()), 1.0, rel_tol=1e-5)
    loc_probs = ops.masked_softmax_np(loc.logits.data, loc.mask)
    assert np.all(loc_probs[~loc.mask] == 0)
    assert loc.mask.sum() == masks.location_mask[ActionType.MOVE].sum()


def test_unused_heads_return_sentinels(net, env, net_cfg):
    out = net.step(env.observe(0), env.action_masks(0), net.initial_state(), forced=NOOP)
    assert out.action == NOOP
    assert out.heads["selected_units"] == []
    for name in ("queue", "target_unit", "location"):
        assert not out.heads[name].used
        assert not out.heads[name].logits.data.any()
    assert out.heads["queue"].index == 0
    assert out.heads["target_unit"].index is None and out.heads["location"].index is None
    assert argmax_accuracy(out.heads["selected_units"]) is None
    assert sl_loss(out.heads, NOOP).item() == sl_loss(out.heads, NOOP, {"selected_units": 0.0}).item()


def test_sentinel_constructor():
    s = HeadOutput.sentinel(6)
    assert s.logits.shape == (6,) and s.mask.all() and s.index is None and not s.used


def test_delay_does_not_reach_earlier_heads(net, env):
    obs, masks, h = env.observe(0), env.action_masks(0), net.initial_state()
    early = net.step(obs, masks, h, forced=move_action(env, delay=1))
    late = net.step(obs, masks, h, forced=move_action(env, delay=4))
    np.testing.assert_array_equal(early.heads["action_type"].logits.data, late.heads["action_type"].logits.data)
    np.testing.assert_array_equal(early.heads["delay"].logits.data, late.heads["delay"].logits.data)
    assert not np.array_equal(early.heads["queue"].logits.data, late.heads["queue"].logits.data)


def test_delay_head_adds_its_choice_embedding(net):
    head = net.delay_head
    ar = Tensor(np.random.default_rng(0).normal(size=net.cfg.autoregressive_embedding_size))
    out, ar2 = head(ar, forced=2)
    update = head.embed2(ops.relu(head.embed1(ops.one_hot(2, head.n, dtype=np.float32))))
    np.testing.assert_allclose(ar2.data - ar.data, update.data, rtol=1e-5, atol=1e-6)
    assert out.index == 2


def test_selected_units_never_repeat(net, env):
    rng = np.random.default_rng(0)
    obs, masks = env.observe(0), env.action_masks(0)
    for _ in range(30):
        out = net.step(obs, masks, net.initial_state(), rng=rng)
        units = out.action.selected_units
        assert len(units) == len(set(units)) <= net.cfg.max_selected
        steps = out.heads["selected_units"]
        if units:
            assert steps[-1].index == net.cfg.max_entities or len(units) == net.cfg.max_selected
            assert not steps[0].mask[net.cfg.max_entities]


def test_attack_fills_target_and_leaves_location_unused(net, env):
    obs, masks, h = env.observe(0), env.action_masks(0), net.initial_state()
    attack = attack_action(env)
    out = net.step(obs, masks, h, forced=attack)
    assert out.action.target_unit == attack.target_unit
    assert out.heads["target_unit"].used
    assert out.heads["location"].index is None


def test_baseline_squash_values():
    with precision(np.float64):
        assert squash(Tensor(0.0)).item() == 0.0
        assert math.isclose(squash(Tensor(2 / math.pi)).item(), 0.5, rel_tol=1e-12)
        for x in (1e6, -1e6):
            assert -1.0 < squash(Tensor(x)).item() < 1.0


def test_value_is_bounded(net, env):
    out = net.step(env.observe(0), env.action_masks(0), net.initial_state(), greedy=True)
    v = net.value(out, env.observe(1)).item()
    assert -1.0 < v < 1.0


# ===== whole network =====

def test_same_seed_same_network_and_choices(net_cfg, env):
    a, b = PolicyNet(net_cfg, seed=5), PolicyNet(net_cfg, seed=5)
    for name, value in a.state_dict().items():
        np.testing.assert_array_equal(value, b.state_dict()[name])
    obs, masks = env.observe(0), env.action_masks(0)
    out_a = a.step(obs, masks, a.initial_state(), rng=np.random.default_rng(9))
    out_b = b.step(obs, masks, b.initial_state(), rng=np.random.default_rng(9))
    assert out_a.action == out_b.action
    np.testing.assert_array_equal(out_a.heads["action_type"].logits.data, out_b.heads["action_type"].logits.data)


def test_sampled_actions_are_accepted_by_the_environment(net, env_cfg):
    for seed in range(2):
        env = MicroRTS(env_cfg)
        env.reset(seed)
        hidden = net.initial_state()
        rng = np.random.default_rng(seed)
        bot = RandomPolicy(seed)
        while not env.is_final:
            out = net.step(env.observe(0), env.action_masks(0), hidden, rng=rng)
            hidden = out.hidden
            try:
                env.validate(0, out.action)
            except RejectedActionError as exc:  # pragma: no cover - reported as a failure
                pytest.fail(f"network proposed a rejected action: {exc}")
            env.step(out.action, bot(env, 1))


def test_unroll_matches_step_by_step(net, env):
    obs, masks, actions, logits = [], [], [], []
    hidden = net.initial_state()
    rng = np.random.default_rng(1)
    for _ in range(5):
        o, m = env.observe(0), env.action_masks(0)
        out = net.step(o, m, hidden, rng=rng)
        hidden = out.hidden
        obs.append(o)
        masks.append(m)
        actions.append(out.action)
        logits.append(out.heads["action_type"].logits.data)
        env.step(out.action, NOOP)
    replayed = net.unroll(obs, masks, actions, net.initial_state())
    for out, expected, action in zip(replayed, logits, actions):
        assert out.action == action
        np.testing.assert_allclose(out.heads["action_type"].logits.data, expected, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(replayed[-1].hidden.layers[0][0].data, hidden.layers[0][0].data, rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("index", [0, 5, 17, 255])
def test_minimap_location_roundtrip(index):
    ego = minimap_index_to_ego(index, 8, 16)
    top_left = ego_to_minimap_index(ego, 8, 16)
    assert minimap_index_to_ego(top_left, 8, 16) == ego
    board = np.zeros(64, dtype=bool)
    board[ego] = True
    assert np.flatnonzero(minimap_location_mask(board, 8, 16)).tolist() == [top_left]


def test_loss_gradient_matches_finite_differences(net_cfg, env):
    """Imitation loss on one frame against central differences on 20 parameter entries."""
    with precision(np.float64):
        policy = PolicyNet(net_cfg, seed=2)
        obs, masks = env.observe(0), env.action_masks(0)
        target = move_action(env)

        def loss():
            out = policy.step(obs, masks, policy.initial_state(), forced=target)
            return sl_loss(out.heads, target)

        params = policy.parameters()
        with GradTape() as tape:
            value = loss()
        names = sorted(params)
        grads = dict(zip(names, tape.gradient(value, [params[n] for n in names])))

        rng = np.random.default_rng(0)
        eps = 1e-6
        for name in rng.choice(names, size=20, replace=False):
            p = params[name]
            flat = int(rng.integers(p.size))
            idx = np.unravel_index(flat, p.shape)
            base = np.array(p.data, dtype=np.float64)
            shifted = base.copy()
            shifted[idx] += eps
            p.data = shifted
            hi = loss().item()
            shifted = base.copy()
            shifted[idx] -= eps
            p.data = shifted
            lo = loss().item()
            p.data = base
            numeric = (hi - lo) / (2 * eps)
            assert grads[name][idx] == pytest.approx(numeric, rel=1e-3, abs=1e-6), name


def test_forced_heads_are_all_named(net, env):
    out = net.step(env.observe(0), env.action_masks(0), net.initial_state(), forced=attack_action(env))
    assert set(out.heads) == set(HEAD_NAMES)
