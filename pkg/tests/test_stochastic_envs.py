import json
import math

import numpy as np
import pytest
from scipy.stats import chisquare

from settings_manager import SettingsManager
from stochastic_envs import (CLASSIC_WALLS, DOWN, DROPOFF, EAST, LEFT, NORTH, PICKUP, RIGHT, SOUTH, TAXI_MOVES, WEST,
                             CollectionError, EnvError, LakeConfig, LakeEnv, LakeState, QLearningConfig, QTable,
                             TaxiConfig, TaxiEnv, TaxiState, collect_lake_dataset, collect_taxi_dataset,
                             encode_taxi, episode_seed, evaluate_greedy, lake_step, make_env, make_rng, q_learning,
                             rollout, taxi_reset, taxi_step)

OPEN_LAKE = ("SFF", "FFF", "FFG")


@pytest.fixture
def still_taxi():
    return TaxiConfig(slip=0.0)


def small_taxi(**overrides):
    params = dict(rows=2, cols=2, walls=(), slip=0.0, max_steps=200)
    params.update(overrides)
    return TaxiConfig(**params)


class TestRandomStreams:

    def test_reproducible(self):
        np.testing.assert_array_equal(make_rng(3).random(5), make_rng(3).random(5))

    def test_substreams_differ(self):
        assert not np.array_equal(make_rng(3, stream=1).random(5), make_rng(3, stream=2).random(5))
        np.testing.assert_array_equal(make_rng(3, stream=1).random(5), make_rng(3, stream=1).random(5))

    def test_episode_seed(self):
        assert episode_seed(0b1010, 0b0110) == 0b1100
        assert episode_seed(7, 0) == 7


class TestTaxi:

    def test_move(self, still_taxi):
        s = TaxiState((2, 2), (0, 0), (4, 4))
        nxt, reward, done = taxi_step(s, SOUTH, still_taxi, make_rng(0))
        assert nxt.taxi == (3, 2)
        assert (reward, done, nxt.event, nxt.steps) == (-1.0, False, "move", 1)

    def test_boundary(self, still_taxi):
        nxt, reward, _ = taxi_step(TaxiState((0, 0), (4, 4), (0, 4)), NORTH, still_taxi, make_rng(0))
        assert nxt.taxi == (0, 0)
        assert (reward, nxt.event) == (-6.0, "boundary")

    def test_wall(self, still_taxi):
        assert ((0, 1), (0, 2)) in CLASSIC_WALLS
        nxt, reward, _ = taxi_step(TaxiState((0, 1), (4, 4), (0, 4)), EAST, still_taxi, make_rng(0))
        assert nxt.taxi == (0, 1)
        assert (reward, nxt.event) == (-5.0, "wall")
        nxt, _, _ = taxi_step(TaxiState((0, 2), (4, 4), (0, 4)), WEST, still_taxi, make_rng(0))
        assert nxt.event == "wall"

    def test_pickup_and_delivery(self, still_taxi):
        s = TaxiState((1, 1), (1, 1), (2, 1))
        s, reward, _ = taxi_step(s, PICKUP, still_taxi, make_rng(0))
        assert s.passenger is None and reward == -1.0 and s.event == "pickup"
        s, _, _ = taxi_step(s, SOUTH, still_taxi, make_rng(0))
        s, reward, done = taxi_step(s, DROPOFF, still_taxi, make_rng(0))
        assert (reward, done, s.delivered, s.event) == (19.0, True, True, "delivery")

    def test_illegal_actions(self, still_taxi):
        s = TaxiState((1, 1), (3, 3), (1, 2))
        for action in (PICKUP, DROPOFF):
            nxt, reward, _ = taxi_step(s, action, still_taxi, make_rng(0))
            assert (reward, nxt.event) == (-11.0, "illegal")

    def test_step_limit(self):
        cfg = TaxiConfig(slip=0.0, max_steps=1)
        nxt, _, done = taxi_step(TaxiState((2, 2), (0, 0), (4, 4)), SOUTH, cfg, make_rng(0))
        assert done and not nxt.delivered
        with pytest.raises(EnvError, match="finished"):
            taxi_step(nxt, SOUTH, cfg, make_rng(0))

    def test_action_range(self, still_taxi):
        with pytest.raises(EnvError, match="out of range"):
            taxi_step(TaxiState((0, 0), (1, 1), (2, 2)), 6, still_taxi, make_rng(0))

    def test_slip_goes_sideways(self):
        cfg = TaxiConfig(walls=(), slip=0.3)
        rng = make_rng(4)
        s = TaxiState((2, 2), (0, 0), (4, 4))
        outcomes = [taxi_step(s, SOUTH, cfg, rng)[0] for _ in range(4000)]
        slipped = np.mean([o.slipped for o in outcomes])
        assert abs(slipped - 0.3) < 0.03
        assert all(o.taxi == (3, 2) for o in outcomes if not o.slipped)
        assert all(o.taxi != (3, 2) for o in outcomes if o.slipped)

    def test_reset_separates_destination(self):
        cfg = TaxiConfig()
        for seed in range(200):
            s = taxi_reset(cfg, seed)
            assert s.destination != s.passenger

    def test_state_ids_are_distinct(self):
        cfg = small_taxi()
        cells = [(r, c) for r in range(2) for c in range(2)]
        ids = {encode_taxi(TaxiState(t, p, d), cfg) for t in cells for p in cells + [None] for d in cells}
        assert len(ids) == 4 * 5 * 4
        assert max(ids) == TaxiEnv(cfg).n_states - 1

    def test_config_validation(self):
        with pytest.raises(EnvError, match="wall"):
            TaxiConfig(walls=(((0, 0), (2, 2)),))
        with pytest.raises(EnvError, match="slip"):
            TaxiConfig(slip=1.0)

    def test_config_round_trip(self):
        cfg = TaxiConfig(slip=0.2, max_steps=50)
        assert TaxiConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestLake:

    def test_deterministic_moves(self):
        cfg = LakeConfig(p=1.0)
        s, reward, done = lake_step(LakeState((0, 0)), RIGHT, cfg, make_rng(0))
        assert (s.cell, reward, done, s.event) == ((0, 1), 0.0, False, "move")
        s, _, _ = lake_step(LakeState((0, 0)), LEFT, cfg, make_rng(0))
        assert s.cell == (0, 0)

    def test_hole_and_goal(self):
        cfg = LakeConfig(p=1.0)
        s, reward, done = lake_step(LakeState((0, 1)), DOWN, cfg, make_rng(0))
        assert (s.cell, reward, done, s.event) == ((1, 1), 0.0, True, "hole")
        s, reward, done = lake_step(LakeState((3, 2)), RIGHT, cfg, make_rng(0))
        assert (reward, done, s.event) == (1.0, True, "goal")

    def test_slip_is_perpendicular(self):
        cfg = LakeConfig(grid=OPEN_LAKE, p=1.0 / 3.0)
        rng = make_rng(9)
        cells = [lake_step(LakeState((1, 1)), DOWN, cfg, rng)[0].cell for _ in range(3000)]
        counts = {cell: cells.count(cell) / len(cells) for cell in set(cells)}
        assert set(counts) == {(2, 1), (1, 0), (1, 2)}
        for frac in counts.values():
            assert abs(frac - 1 / 3) < 0.04

    def test_config_validation(self):
        with pytest.raises(EnvError, match="unknown tiles"):
            LakeConfig(grid=("SX", "FG"))
        with pytest.raises(EnvError, match="start"):
            LakeConfig(grid=("SS", "FG"))
        with pytest.raises(EnvError, match="p must"):
            LakeConfig(p=0.0)

    def test_builtin_maps(self):
        cfg = LakeConfig.from_dict({"size": 8, "p": 0.5})
        assert cfg.rows == 8 and cfg.p == 0.5
        with pytest.raises(EnvError):
            LakeConfig.from_dict({"size": 5})


class TestEnvObjects:

    def test_taxi_reset_is_seeded(self):
        env = TaxiEnv()
        assert env.reset(11) == env.reset(11)
        assert env.n_states == 25 * 26 * 25
        assert env.state_cards == (25, 26, 25)

    def test_step_before_reset(self):
        with pytest.raises(EnvError, match="reset"):
            LakeEnv().step(0)

    def test_lake_ids(self):
        env = LakeEnv()
        assert env.reset(0) == 0
        assert env.n_states == 16 and env.state_cards == (16,)

    def test_make_env(self):
        assert isinstance(make_env("taxi"), TaxiEnv)
        assert isinstance(make_env("lake", LakeConfig(p=0.5)), LakeEnv)
        with pytest.raises(EnvError, match="unknown environment"):
            make_env("cartpole")


class TestQLearning:

    def test_epsilon_schedule(self):
        cfg = QLearningConfig(episodes=100, decay_fraction=0.5)
        assert cfg.epsilon(0) == 1.0
        assert cfg.epsilon(25) == pytest.approx(0.525)
        assert cfg.epsilon(50) == pytest.approx(0.05)
        assert cfg.epsilon(99) == pytest.approx(0.05)

    def test_solves_deterministic_lake(self):
        env = LakeEnv(LakeConfig(p=1.0))
        q = q_learning(env, QLearningConfig(episodes=2000, seed=1))
        stats = evaluate_greedy(q, env, episodes=5, seed=0)
        assert stats.success_rate == 1.0
        assert stats.mean_return == 1.0

    def test_seeded(self):
        env = LakeEnv(LakeConfig(p=0.5))
        a = q_learning(env, QLearningConfig(episodes=50, seed=2))
        b = q_learning(env, QLearningConfig(episodes=50, seed=2))
        np.testing.assert_array_equal(a.values, b.values)

    def test_qtable_file(self, tmp_path):
        q = QTable(np.arange(6, dtype=np.float64).reshape(2, 3), {"episodes": 3})
        path = str(tmp_path / "qtable.npz")
        q.save(path)
        loaded = QTable.load(path)
        np.testing.assert_array_equal(loaded.values, q.values)
        assert loaded.params == {"episodes": 3}
        assert loaded.greedy(1) == 2

    def test_qtable_rejects_nan(self):
        with pytest.raises(EnvError):
            QTable(np.array([[np.nan]]))


class TestCollection:

    def test_rollout(self):
        env = LakeEnv(LakeConfig(p=1.0))
        route = {0: DOWN, 4: DOWN, 8: RIGHT, 9: RIGHT, 10: DOWN, 14: RIGHT}
        traj = rollout(env, route.get, seed=0)
        assert traj.states == [0, 4, 8, 9, 10, 14]
        assert traj.total_return == 1.0
        assert traj.terminal

    def test_taxi_keeps_successes_only(self):
        env = TaxiEnv(small_taxi())
        zeros = QTable(np.zeros((env.n_states, env.n_actions)))
        kept = collect_taxi_dataset(zeros, env, n=10, seed=0, epsilon=1.0)
        assert len(kept) == 10
        assert all(t.rewards[-1] == 19.0 and t.terminal for t in kept)

    def test_taxi_budget(self):
        env = TaxiEnv(small_taxi(max_steps=5))
        zeros = QTable(np.zeros((env.n_states, env.n_actions)))
        with pytest.raises(CollectionError, match="successful"):
            collect_taxi_dataset(zeros, env, n=2, seed=0, epsilon=0.0, max_rollouts=3)

    def test_lake_is_seeded_and_unfiltered(self):
        env = LakeEnv(LakeConfig(p=1.0 / 3.0))
        zeros = QTable(np.zeros((env.n_states, env.n_actions)))
        a = collect_lake_dataset(zeros, env, epsilon=0.5, n=20, seed=4)
        b = collect_lake_dataset(zeros, env, epsilon=0.5, n=20, seed=4)
        assert len(a) == 20
        assert [t.states for t in a] == [t.states for t in b]
        assert any(t.total_return == 0.0 for t in a)


@pytest.fixture(scope="module")
def trained_taxi():
    settings = SettingsManager()
    env = TaxiEnv(settings.taxi_config())
    return settings, env, q_learning(env, settings.qlearning_config("taxi", seed=0))


def three_sigma(p, n):
    return 3.0 * math.sqrt(p * (1.0 - p) / n)


@pytest.mark.slow
class TestEnvStatistics:

    def test_taxi_slip_rate_and_direction(self):
        cfg = TaxiConfig(walls=(), slip=0.3)
        rng = make_rng(21)
        start = TaxiState((2, 2), (0, 0), (4, 4))
        moves = (SOUTH, NORTH, EAST, WEST)
        n = 30000
        sideways = np.zeros((4, 4), dtype=np.int64)
        for i in range(n):
            action = moves[i % 4]
            nxt = taxi_step(start, action, cfg, rng)[0]
            moved = (nxt.taxi[0] - 2, nxt.taxi[1] - 2)
            direction = next(d for d in moves if TAXI_MOVES[d] == moved)
            assert (direction != action) == nxt.slipped
            if nxt.slipped:
                sideways[moves.index(action), moves.index(direction)] += 1
        slipped = sideways.sum()
        assert abs(slipped / n - 0.3) <= three_sigma(0.3, n)
        observed = sideways[~np.eye(4, dtype=bool)]
        expected = np.repeat(sideways.sum(axis=1) / 3.0, 3)
        assert chisquare(observed, expected).pvalue > 1e-3

    def test_taxi_reset_occupancy_is_uniform(self):
        cfg = TaxiConfig()
        rng = make_rng(22)
        starts = [taxi_reset(cfg, rng) for _ in range(50000)]
        flat = lambda cell: cell[0] * cfg.cols + cell[1]
        taxi = np.bincount([flat(s.taxi) for s in starts], minlength=cfg.n_cells)
        pairs = np.bincount([flat(s.passenger) * cfg.n_cells + flat(s.destination) for s in starts],
                            minlength=cfg.n_cells ** 2).reshape(cfg.n_cells, cfg.n_cells)
        assert np.trace(pairs) == 0
        for counts in (taxi, pairs.sum(axis=1), pairs[~np.eye(cfg.n_cells, dtype=bool)]):
            assert chisquare(counts).pvalue > 1e-3

    def test_lake_intended_move_frequency(self):
        cfg = LakeConfig(grid=OPEN_LAKE, p=1.0 / 3.0)
        rng = make_rng(23)
        n = 30000
        intended = sum(not lake_step(LakeState((1, 1)), i % 4, cfg, rng)[0].slipped for i in range(n))
        assert abs(intended / n - 1.0 / 3.0) <= three_sigma(1.0 / 3.0, n)

    def test_taxi_greedy_agent_is_well_trained(self, trained_taxi):
        _, env, qtable = trained_taxi
        stats = evaluate_greedy(qtable, env, episodes=1000, seed=1)
        assert stats.success_rate > 0.95

    def test_taxi_dataset_return_band(self, trained_taxi):
        settings, env, qtable = trained_taxi
        coll = settings.section("collection")
        kept = collect_taxi_dataset(qtable, env, n=coll["taxi_trajectories"], seed=0, epsilon=coll["taxi_epsilon"],
                                    max_rollouts=coll["max_rollouts_factor"] * coll["taxi_trajectories"])
        assert all(t.rewards[-1] == 19.0 for t in kept)
        assert -160.0 <= np.mean([t.total_return for t in kept]) <= -100.0

    def test_lake_agent_average_return(self):
        settings = SettingsManager()
        env = LakeEnv(settings.lake_config())
        qtable = q_learning(env, settings.qlearning_config("lake", seed=0))
        stats = evaluate_greedy(qtable, env, episodes=1000, seed=1)
        assert stats.mean_return == pytest.approx(0.7, abs=0.1)
