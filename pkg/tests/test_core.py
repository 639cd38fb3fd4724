import math

import numpy as np
import pytest

from nedispatch.core import (
    DEFAULT_TYPE_MIX,
    DRIVER_TRANSITIONS,
    Driver,
    DriverState,
    MarketParams,
    NotificationPlan,
    NotificationProfile,
    Rider,
    Scenario,
    TraceError,
    ValidationError,
    load_trace,
    sample_scenario,
    score,
    validate_plan,
    write_trace,
)
from nedispatch.valuation import BA, FA


class TestScore:
    def test_reference_distances(self):
        assert score(Rider(0, (0, 0)), Driver(0, (0, 0), 0.5)) == 1.0
        assert score(Rider(0, (0, 0)), Driver(0, (1, 0), 0.5)) == 0.5
        assert score(Rider(0, (0, 0)), Driver(0, (3, 4), 0.5)) == pytest.approx(1 / 6, abs=1e-12)

    def test_decreasing_in_distance(self, rng):
        r = Rider(0, (0.0, 0.0))
        dists = np.sort(rng.random(20) * 5)
        vals = [score(r, Driver(0, (d, 0.0), 0.5)) for d in dists]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestTypes:
    def test_driver_probability_range(self):
        with pytest.raises(ValidationError):
            Driver(1, (0, 0), 1.3)

    def test_params_validation(self):
        with pytest.raises(ValidationError):
            MarketParams(p=1.2)
        with pytest.raises(ValidationError):
            MarketParams(cap_u=0)
        with pytest.raises(ValidationError):
            MarketParams(theta=-0.1)
        assert MarketParams().replace(cap_u=5).cap_u == 5

    def test_profile_on_simplex(self):
        with pytest.raises(ValidationError):
            NotificationProfile((0.5, 0.6))
        assert NotificationProfile.degenerate(3).q == (1.0, 0.0, 0.0, 0.0)
        assert NotificationProfile.from_counts([0, 0, 0]).q == (1.0, 0.0, 0.0)
        assert NotificationProfile.from_counts([1, 3]).q == (0.25, 0.75)

    def test_lifecycle_is_acyclic_into_terminals(self):
        assert DRIVER_TRANSITIONS[DriverState.MATCHED] == frozenset()
        assert DriverState.DEPARTED in DRIVER_TRANSITIONS[DriverState.ACCEPTED_PENDING]
        assert DriverState.MATCHED not in DRIVER_TRANSITIONS[DriverState.IDLE]


class TestSampleScenario:
    def test_deterministic(self):
        a = sample_scenario(6, 8, seed=4, radius=1.5)
        b = sample_scenario(6, 8, seed=4, radius=1.5)
        assert a == b

    def test_no_riders(self):
        s = sample_scenario(0, 5, seed=1)
        assert s.riders == () and s.weights == {}
        assert len(s.drivers) == 5

    def test_type_mix_levels(self):
        s = sample_scenario(0, 4000, seed=2)
        probs = np.array([d.accept_prob for d in s.drivers])
        assert set(np.unique(probs)) <= set(DEFAULT_TYPE_MIX)
        assert np.mean(probs == 0.1) == pytest.approx(0.1, abs=0.02)

    def test_complete_graph_without_radius(self):
        s = sample_scenario(3, 4, seed=0)
        assert len(s.weights) == 12
        r, d = s.riders[1], s.drivers[2]
        assert s.weights[(r.id, d.id)] == pytest.approx(score(r, d), abs=1e-15)

    def test_bad_inputs(self):
        with pytest.raises(ValidationError):
            sample_scenario(2, 2, sigma=0.0)
        with pytest.raises(ValidationError):
            sample_scenario(2, 2, type_mix={0.5: 0.7, 0.9: 0.2})

    def test_gaussian_spread(self):
        s = sample_scenario(3000, 0, sigma=2.0, seed=3)
        xs = np.array([r.pos for r in s.riders])
        assert xs.std() == pytest.approx(2.0, rel=0.05)


class TestTrace:
    def write(self, tmp_path, riders, drivers):
        rp, dp = tmp_path / "riders.csv", tmp_path / "drivers.csv"
        rp.write_text(riders)
        dp.write_text(drivers)
        return rp, dp

    def test_counts(self, tmp_path):
        rp, dp = self.write(
            tmp_path,
            "id,arrival_time_s,x,y\n1,0,0,0\n2,3,1,1\n",
            "id,arrival_time_s,x,y,accept_prob\n1,0,0,1,0.5\n2,0,2,2,0.9\n3,5,0,0,0.1\n",
        )
        s = load_trace(rp, dp)
        assert (len(s.riders), len(s.drivers), len(s.weights)) == (2, 3, 6)

    def test_empty_files(self, tmp_path):
        rp, dp = self.write(tmp_path, "", "")
        s = load_trace(rp, dp)
        assert s.riders == () and s.drivers == ()

    def test_probability_out_of_range(self, tmp_path):
        rp, dp = self.write(
            tmp_path,
            "id,arrival_time_s,x,y\n1,0,0,0\n",
            "id,arrival_time_s,x,y,accept_prob\n1,0,0,1,1.3\n",
        )
        with pytest.raises(ValidationError, match="drivers.csv:2"):
            load_trace(rp, dp)

    def test_malformed_row_names_line(self, tmp_path):
        rp, dp = self.write(tmp_path, "id,arrival_time_s,x,y\n1,0,0,0\n2,zero,0,0\n", "")
        with pytest.raises(TraceError, match=":3"):
            load_trace(rp, dp)

    def test_duplicate_id(self, tmp_path):
        rp, dp = self.write(tmp_path, "id,arrival_time_s,x,y\n1,0,0,0\n1,0,1,0\n", "")
        with pytest.raises(ValidationError, match="duplicate"):
            load_trace(rp, dp)

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nowhere.csv"):
            load_trace(tmp_path / "nowhere.csv", tmp_path / "d.csv")

    def test_round_trip(self, tmp_path):
        s = sample_scenario(5, 7, seed=9, arrival_window_s=30.0)
        write_trace(s, tmp_path / "r.csv", tmp_path / "d.csv")
        back = load_trace(tmp_path / "r.csv", tmp_path / "d.csv")
        assert back.riders == s.riders and back.drivers == s.drivers
        assert back.weights == s.weights


class TestValidatePlan:
    @pytest.fixture
    def scenario(self):
        riders = [Rider(1, (0, 0)), Rider(2, (5, 5))]
        drivers = [Driver(1, (0, 0), 0.9), Driver(2, (9, 0), 0.9), Driver(3, (5, 5), 0.4)]
        weights = {(1, 1): 1.0, (1, 2): 0.1, (2, 3): 1.0, (2, 1): 0.2}
        return Scenario(riders, drivers, weights)

    def test_singletons_are_feasible(self, scenario):
        plan = NotificationPlan({1: (1,), 2: (3,)})
        assert validate_plan(plan, scenario, MarketParams(), FA) == []

    def test_shared_driver(self, scenario):
        plan = NotificationPlan({1: (1,), 2: (1,)})
        found = validate_plan(plan, scenario, MarketParams(), BA)
        assert sum("disjointness" in v for v in found) == 1

    def test_fa_threshold_violation(self, scenario):
        plan = NotificationPlan({1: (1, 2)})
        found = validate_plan(plan, scenario, MarketParams(), FA)
        assert len(found) == 1 and "threshold" in found[0] and "driver 2" in found[0]
        assert validate_plan(plan, scenario, MarketParams(), BA) == []

    def test_cardinality(self, scenario):
        plan = NotificationPlan({1: (1, 2)})
        found = validate_plan(plan, scenario, MarketParams(cap_u=1), BA)
        assert any("cardinality" in v for v in found)

    def test_unknown_ids(self, scenario):
        with pytest.raises(ValidationError):
            validate_plan(NotificationPlan({9: (1,)}), scenario, MarketParams(), FA)
        with pytest.raises(ValidationError):
            validate_plan(NotificationPlan({1: (9,)}), scenario, MarketParams(), FA)
