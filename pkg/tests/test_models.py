import json

import numpy as np
import pytest

from models import (CategoricalDist, EpisodeMetrics, EvidenceMask, RawTrajectory, RunReport, TrifleError, ValueMap,
                    Variable)


class TestVariable:

    def test_round_trip(self):
        v = Variable(3, 5, "rtg[0]")
        assert Variable.from_dict(v.to_dict()) == v

    def test_rejects_unary(self):
        with pytest.raises(TrifleError, match="cardinality"):
            Variable(0, 1)


class TestEvidenceMask:

    def test_entries(self):
        mask = EvidenceMask.of({0: 2}, {3: [0, 1]})
        assert mask.entry(0) == 2
        assert mask.entry(3) == frozenset({0, 1})
        assert mask.entry(5) is None
        assert mask.is_unobserved(5) and not mask.is_unobserved(3)
        assert mask.variables == [0, 3]

    def test_observe_replaces_restriction(self):
        mask = EvidenceMask.of(restricted={1: [0, 2]}).observe(1, 2)
        assert mask.observed == {1: 2} and mask.restricted == {}

    def test_restrict_replaces_observation(self):
        mask = EvidenceMask.of({1: 0}).restrict(1, [1, 2])
        assert mask.observed == {} and mask.restricted == {1: frozenset({1, 2})}

    def test_merge(self):
        merged = EvidenceMask.of({0: 1}).merge(EvidenceMask.of({0: 1, 2: 0}))
        assert merged.observed == {0: 1, 2: 0}
        with pytest.raises(TrifleError, match="conflicting"):
            EvidenceMask.of({0: 1}).merge(EvidenceMask.of({0: 0}))

    def test_invalid(self):
        with pytest.raises(TrifleError, match="both observed and restricted"):
            EvidenceMask({0: 1}, {0: frozenset({1})})
        with pytest.raises(TrifleError, match="empty restriction"):
            EvidenceMask.of(restricted={0: []})
        with pytest.raises(TrifleError, match="negative"):
            EvidenceMask.of({0: -1})

    def test_json_round_trip(self):
        mask = EvidenceMask.of({4: 1}, {2: [3, 0]})
        assert EvidenceMask.from_dict(json.loads(json.dumps(mask.to_dict()))) == mask


class TestValueMapAndDist:

    def test_value_map(self):
        vm = ValueMap.of([0, 1.5, -2])
        assert len(vm) == 3 and vm(1) == 1.5
        assert vm.scaled(2.0).values == (0.0, 3.0, -4.0)
        with pytest.raises(TrifleError):
            ValueMap.of([float("inf")])

    def test_dist_expectation(self):
        dist = CategoricalDist.of([0.25, 0.25, 0.5])
        assert dist.expectation(ValueMap.of([0, 4, 2])) == pytest.approx(2.0)
        np.testing.assert_allclose(dist.as_array(), [0.25, 0.25, 0.5])

    def test_dist_must_normalize(self):
        with pytest.raises(TrifleError, match="sum to"):
            CategoricalDist.of([0.5, 0.4])
        with pytest.raises(TrifleError, match="nonnegative"):
            CategoricalDist.of([1.5, -0.5])


class TestTrajectoryAndReports:

    def test_trajectory(self):
        t = RawTrajectory([0, 1], [2, 3], [-1.0, 20.0])
        assert len(t) == 2 and t.total_return == 19.0
        assert RawTrajectory.from_dict(json.loads(json.dumps(t.to_dict()))) == t

    def test_trajectory_validation(self):
        with pytest.raises(TrifleError, match="no steps"):
            RawTrajectory([], [], [])
        with pytest.raises(TrifleError, match="length"):
            RawTrajectory([0, 1], [0], [0.0, 0.0])

    def test_episode_means(self):
        m = EpisodeMetrics(0, 7, predicted=[1.0, 3.0], optimality=[0.5])
        assert m.mean_predicted == 2.0 and m.mean_realized is None and m.mean_optimality == 0.5
        row = m.to_row()
        assert row["seed"] == 7 and row["success"] == 0 and row["mean_realized"] is None

    def test_report_dict(self):
        report = RunReport({"policy": "random"}, [EpisodeMetrics(0, 0), EpisodeMetrics(1, 1)])
        data = report.to_dict()
        assert data["n_episodes"] == 2 and data["correlation"] is None
        json.dumps(data)
