import threading

import numpy as np
import pytest

from ministar.adapters.league_store import load_league, save_league
from ministar.adapters.metrics_csv import CsvSink, read_metrics
from ministar.app.league_loop import LEAGUE_FIELDS, run_league
from ministar.domain.league import (
    League,
    LeagueConfig,
    MatchAssignment,
    PayoffMatrix,
    Weighting,
    pfsp_probabilities,
    pfsp_sample,
    pfsp_weight,
)
from ministar.domain.net_config import profile
from ministar.domain.policy_net import PolicyNet
from ministar.domain.rl import RLConfig
from ministar.drivers.microrts import EnvConfig
from ministar.errors import FormatError, LeagueError

PARAMS = {"w": np.arange(3, dtype=np.float32)}


def league(**kw):
    return League(LeagueConfig(**kw), PARAMS, seed=0)


def beat(lg, a, b, wins, losses):
    match = MatchAssignment(a, b, None, 0)
    for _ in range(wins):
        lg.report_outcome(match, a)
    for _ in range(losses):
        lg.report_outcome(match, b)


def historicals(lg, *players):
    """Freeze one historical copy of each player through the step rule."""
    out = []
    for p in players:
        lg.add_steps(p, lg.cfg.checkpoint_steps)
        out.append(lg.maybe_checkpoint(p).id)
    return out


# ===== PFSP =====

def test_weight_functions():
    for w in Weighting:
        assert pfsp_weight(1.0, w) == 0.0
    assert pfsp_weight(0.5, "variance") == 0.25
    assert pfsp_weight(0.5, "squared") == 0.25
    assert pfsp_weight(0.2, "linear_capped") == 0.5
    assert pfsp_weight(0.3, "linear") == pytest.approx(0.7)
    with pytest.raises(LeagueError):
        pfsp_weight(0.5, "cubic")
    with pytest.raises(LeagueError):
        pfsp_weight(1.5, "linear")


def test_weights_are_monotone_except_variance():
    grid = np.linspace(0, 1, 101)
    for w in (Weighting.LINEAR, Weighting.LINEAR_CAPPED, Weighting.SQUARED):
        values = [pfsp_weight(p, w) for p in grid]
        assert all(a >= b for a, b in zip(values, values[1:]))
    variance = [pfsp_weight(p, Weighting.VARIANCE) for p in grid]
    assert int(np.argmax(variance)) == 50
    assert all(a <= b for a, b in zip(variance[:51], variance[1:51]))
    assert all(a >= b for a, b in zip(variance[50:], variance[51:]))


def test_pfsp_probabilities():
    np.testing.assert_allclose(pfsp_probabilities([0.5, 1.0, 0.0], "squared"), [0.2, 0.0, 0.8])
    np.testing.assert_allclose(pfsp_probabilities([0.3], "linear"), [1.0])
    np.testing.assert_allclose(pfsp_probabilities([1.0, 1.0], "linear"), [0.5, 0.5])
    with pytest.raises(LeagueError):
        pfsp_probabilities([], "linear")


@pytest.mark.parametrize("weighting", list(Weighting))
def test_pfsp_sampling_frequencies(weighting):
    ids = ["a", "b", "c", "d"]
    rates = [0.1, 0.4, 0.5, 0.9]
    rng = np.random.default_rng(0)
    draws = [pfsp_sample(ids, rates, weighting, rng) for _ in range(100_000)]
    freq = np.array([draws.count(i) for i in ids]) / len(draws)
    np.testing.assert_allclose(freq, pfsp_probabilities(rates, weighting), atol=0.01)


def test_pfsp_never_picks_a_zero_weight_candidate():
    rng = np.random.default_rng(1)
    picks = {pfsp_sample(["x", "y"], [1.0, 0.6], "squared", rng) for _ in range(500)}
    assert picks == {"y"}
    with pytest.raises(LeagueError):
        pfsp_sample([], [], "linear", rng)


# ===== payoff =====

def test_payoff_rates():
    p = PayoffMatrix()
    assert p.win_rate("a", "b") == 0.5
    p.record("a", "b", 1)
    assert p.win_rate("a", "b") == 1.0 and p.win_rate("b", "a") == 0.0
    p.record("a", "b", -1)
    assert p.win_rate("a", "b") == 0.5
    p.record("b", "a", 0)
    assert p.counts("a", "b") == (1, 1, 1)
    p.record("a", "a", 1)
    assert p.win_rate("a", "a") == 0.5
    with pytest.raises(LeagueError):
        p.record("a", "b", 2)


def test_self_play_game_counts_once():
    p = PayoffMatrix()
    p.record("a", "a", 1)
    p.record("a", "a", -1)
    assert p.games("a", "a") == 2
    assert p.counts("a", "a") == (0, 2, 0)
    assert p.win_rate("a", "a") == 0.5
    assert p.games("a", "b") == 0


def test_concurrent_reports_are_exact():
    lg = league()
    players = ["MP0", "ME0", "LE0"]

    def worker(k):
        rng = np.random.default_rng(k)
        for _ in range(1000):
            a, b = rng.choice(players, size=2, replace=False)
            winner = [a, b, None][int(rng.integers(3))]
            lg.report_outcome(MatchAssignment(str(a), str(b), None, 0), None if winner is None else str(winner))

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    total = sum(lg.payoff.games(a, b) for a in players for b in players if a < b)
    assert total == 8000
    for a in players:
        for b in players:
            if a != b and lg.payoff.games(a, b):
                assert lg.payoff.win_rate(a, b) + lg.payoff.win_rate(b, a) == pytest.approx(1.0)
                w, d, l = lg.payoff.counts(a, b)
                assert (l, d, w) == lg.payoff.counts(b, a)


# ===== matchmaking =====

def test_initial_players_and_round_robin():
    lg = league()
    assert [p.id for p in lg.active] == ["MP0", "ME0", "LE0"]
    assert [lg.next_match().learner for _ in range(6)] == ["MP0", "ME0", "LE0"] * 2


def test_main_player_without_historicals_plays_main_players():
    lg = league()
    for branch in (None, 1, 2):
        m = lg.choose_opponent("MP0", branch)
        assert m.opponent == "MP0" and m.weighting is None


def test_main_player_branch_one_with_one_weak_historical():
    lg = league()
    (old,) = historicals(lg, "ME0")
    beat(lg, "MP0", old, 0, 4)
    for _ in range(50):
        m = lg.choose_opponent("MP0", branch=1)
        assert m.opponent == old and m.weighting == Weighting.SQUARED


def test_main_player_branch_one_distribution():
    lg = league()
    olds = historicals(lg, "ME0", "LE0")
    beat(lg, "MP0", olds[0], 3, 1)
    beat(lg, "MP0", olds[1], 1, 3)
    picks = [lg.choose_opponent("MP0", branch=1).opponent for _ in range(10_000)]
    freq = np.array([picks.count(o) for o in olds]) / len(picks)
    rates = [lg.payoff.win_rate("MP0", o) for o in olds]
    np.testing.assert_allclose(freq, pfsp_probabilities(rates, "squared"), atol=0.02)


def test_main_player_branch_two_falls_back_to_its_history_when_too_hard():
    lg = league()
    (mp_old,) = historicals(lg, "MP0")
    m = lg.choose_opponent("MP0", branch=2)
    # rare: fewer than min_games against itself
    assert m.opponent == mp_old and m.weighting == Weighting.VARIANCE


def test_main_exploiter_rules():
    lg = league()
    m = lg.choose_opponent("ME0")
    assert m.opponent == "MP0"
    beat(lg, "ME0", "MP0", 1, 19)
    assert lg.choose_opponent("ME0").opponent == "MP0"  # no history yet
    (mp_old,) = historicals(lg, "MP0")
    m = lg.choose_opponent("ME0")
    assert m.opponent == mp_old and m.weighting == Weighting.VARIANCE
    beat(lg, "ME0", "MP0", 19, 0)
    assert lg.choose_opponent("ME0").opponent == "MP0"


def test_league_exploiter_rules():
    lg = league()
    assert lg.choose_opponent("LE0").opponent in {"MP0", "ME0"}
    olds = historicals(lg, "MP0", "ME0")
    beat(lg, "LE0", olds[0], 0, 5)
    beat(lg, "LE0", olds[1], 5, 0)
    picks = {lg.choose_opponent("LE0").opponent for _ in range(200)}
    assert picks == {olds[0]}


def test_assignments_reference_registered_players():
    lg = league()
    historicals(lg, "MP0")
    for _ in range(300):
        m = lg.next_match()
        assert m.learner in lg.players and m.opponent in lg.players
        assert not lg.player(m.learner).is_historical


def test_historical_players_do_not_train():
    lg = league()
    (old,) = historicals(lg, "MP0")
    with pytest.raises(LeagueError):
        lg.choose_opponent(old)
    with pytest.raises(LeagueError):
        lg.update_params(old, PARAMS)
    before = lg.snapshot_digest(old)
    lg.update_params("MP0", {"w": np.ones(3, dtype=np.float32)})
    assert lg.snapshot_digest(old) == before != lg.snapshot_digest("MP0")


# ===== checkpoints =====

def test_checkpoint_on_high_win_rate_against_every_historical():
    lg = league()
    olds = historicals(lg, "ME0", "LE0")
    beat(lg, "MP0", olds[0], 8, 2)
    beat(lg, "MP0", olds[1], 9, 1)
    frozen = lg.maybe_checkpoint("MP0")
    assert frozen is not None and frozen.parent == "MP0" and frozen.is_historical


def test_no_checkpoint_when_one_historical_holds():
    lg = league()
    olds = historicals(lg, "ME0", "LE0")
    beat(lg, "MP0", olds[0], 8, 2)
    beat(lg, "MP0", olds[1], 6, 4)
    assert lg.maybe_checkpoint("MP0") is None


def test_checkpoint_needs_enough_games():
    lg = league()
    (old,) = historicals(lg, "ME0")
    beat(lg, "MP0", old, 2, 0)
    assert lg.maybe_checkpoint("MP0") is None


def test_checkpoint_on_steps_despite_poor_results():
    lg = league(checkpoint_steps=100)
    (old,) = historicals(lg, "ME0")
    beat(lg, "MP0", old, 0, 10)
    lg.add_steps("MP0", 99)
    assert lg.maybe_checkpoint("MP0") is None
    lg.add_steps("MP0", 1)
    frozen = lg.maybe_checkpoint("MP0")
    assert frozen is not None and frozen.steps_trained == 100
    assert lg.maybe_checkpoint("MP0") is None


# ===== persistence =====

def test_saved_league_matches_identically(tmp_path):
    lg = league()
    historicals(lg, "MP0", "ME0")
    for _ in range(20):
        m = lg.next_match()
        lg.report_outcome(m, m.learner)
    save_league(lg, tmp_path / "league")
    back = load_league(tmp_path / "league")
    assert back.payoff.rows() == lg.payoff.rows()
    assert {p: back.snapshot_digest(p) for p in back.players} == {p: lg.snapshot_digest(p) for p in lg.players}
    assert [back.next_match() for _ in range(100)] == [lg.next_match() for _ in range(100)]


def test_load_league_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_league(tmp_path / "none")
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "manifest.txt").write_text("not a league\n", encoding="utf-8")
    with pytest.raises(FormatError):
        load_league(tmp_path / "bad")


# ===== loop =====

def test_league_loop_is_reproducible(tmp_path):
    net = profile("tiny")
    env_cfg = EnvConfig(max_game_frames=20)
    init = PolicyNet(net, seed=0).state_dict()
    results = []
    for run_id in range(2):
        lg = League(LeagueConfig(checkpoint_steps=16), init, seed=3)
        sink = CsvSink(tmp_path / f"league{run_id}.csv", LEAGUE_FIELDS)
        run = run_league(lg, net, env_cfg, RLConfig(use_kl=False), matches=4, seed=7, sink=sink)
        assert run.matches == 4
        results.append((lg.payoff.rows(), {p: lg.snapshot_digest(p) for p in lg.players}, run.checkpoints))
    assert results[0] == results[1]
    rows = read_metrics(tmp_path / "league0.csv")
    assert [r["match"] for r in rows] == [1, 2, 3, 4]
    assert all(c in results[0][1] for c in results[0][2])
