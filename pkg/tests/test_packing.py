import numpy as np
import pytest
from conftest import brute_force_packing

from nedispatch.core import MarketParams, NotificationPlan, validate_plan
from nedispatch.matching import matching_value, max_weight_matching
from nedispatch.packing import (
    PACKERS,
    ComponentTooLarge,
    CycleSnapshot,
    PackingConfig,
    components,
    get_packer,
    pack_ed,
    pack_ed_plus,
    pack_greedy,
    pack_opt,
    pack_rejection_aware,
    plan_value,
    repair_plan,
)
from nedispatch.valuation import BA, FA, KAccept, value

HEURISTICS = ("ed", "greedy", "rejection_aware", "ed_plus")


def snapshot(weights, probs):
    riders = sorted({r for r, _ in weights})
    return CycleSnapshot(tuple(riders), tuple(sorted(probs)), weights, probs)


def random_snapshot(rng, max_riders=4, max_drivers=6, density=0.6):
    nr, nd = int(rng.integers(1, max_riders + 1)), int(rng.integers(1, max_drivers + 1))
    probs = {d: float(rng.choice([0.1, 0.33, 0.66, 0.9])) for d in range(nd)}
    w = {(r, d): float(rng.random()) for r in range(nr) for d in range(nd) if rng.random() < density}
    return CycleSnapshot(tuple(range(nr)), tuple(range(nd)), w, probs)


def one_rider():
    return snapshot({(1, 1): 1.0, (1, 2): 0.1}, {1: 0.9, 2: 0.9})


class TestExclusive:
    def test_diagonal(self):
        snap = snapshot({(1, 1): 3, (1, 2): 1, (2, 1): 1, (2, 2): 3}, {1: 0.5, 2: 0.5})
        assert dict(pack_ed(snap).sets) == {1: (1,), 2: (2,)}

    def test_no_drivers(self):
        snap = CycleSnapshot((1, 2), (), {}, {})
        assert len(pack_ed(snap)) == 0

    def test_feasible_singletons(self, rng):
        snap = random_snapshot(rng)
        plan = pack_ed(snap)
        assert validate_plan(plan, snap, MarketParams(cap_u=1), FA) == []


class TestOptimal:
    def test_first_accept_keeps_best_only(self):
        assert dict(pack_opt(one_rider(), MarketParams(cap_u=2), FA).sets) == {1: (1,)}

    def test_best_accept_takes_both(self):
        assert dict(pack_opt(one_rider(), MarketParams(cap_u=2), BA).sets) == {1: (1, 2)}

    def test_singletons_reduce_to_weighted_matching(self, rng):
        for _ in range(30):
            snap = random_snapshot(rng, 3, 3, density=0.8)
            weighted = {k: w * snap.probs[k[1]] for k, w in snap.weights.items()}
            want = matching_value(weighted, max_weight_matching(weighted))
            for proto in (FA, BA):
                plan = pack_opt(snap, MarketParams(cap_u=1), proto)
                assert plan_value(plan, snap, proto) == pytest.approx(want, abs=1e-12)

    def test_equals_assignment_enumeration(self, rng):
        for _ in range(30):
            snap = random_snapshot(rng, 3, 4)
            for proto in (FA, BA, KAccept(2)):
                for params in (MarketParams(cap_u=2), MarketParams(cap_u=3, theta=0.1)):
                    plan = pack_opt(snap, params, proto)
                    want = brute_force_packing(
                        snap.weights, snap.probs, snap.riders, snap.drivers, params.cap_u, params.theta,
                        lambda offers: value(proto, offers),
                    )
                    assert plan_value(plan, snap, proto) == pytest.approx(want, abs=1e-9)
                    assert validate_plan(plan, snap, params, proto) == []

    def test_tie_break_is_lexicographic(self):
        snap = snapshot({(1, 1): 1.0, (1, 2): 1.0, (2, 1): 1.0, (2, 2): 1.0}, {1: 0.5, 2: 0.5})
        plan = pack_opt(snap, MarketParams(cap_u=1), BA)
        assert dict(plan.sets) == {1: (1,), 2: (2,)}

    def test_component_cap(self, rng):
        w = {(r, d): 0.5 for r in range(5) for d in range(10)}
        snap = CycleSnapshot(tuple(range(5)), tuple(range(10)), w, {d: 0.5 for d in range(10)})
        with pytest.raises(ComponentTooLarge):
            pack_opt(snap, MarketParams(), FA, config=PackingConfig(node_cap=12))
        plan = pack_opt(snap, MarketParams(), FA, config=PackingConfig(node_cap=12, fallback="greedy"))
        assert validate_plan(plan, snap, MarketParams(), FA) == []

    def test_components_split(self):
        snap = snapshot({(1, 1): 1.0, (2, 2): 1.0, (2, 3): 0.5}, {1: 0.5, 2: 0.5, 3: 0.5, 4: 0.5})
        assert components(snap) == [([1], [1]), ([2], [2, 3])]

    @pytest.mark.parametrize("prune", [True, False])
    def test_pruning_is_lossless_for_best_accept(self, rng, prune):
        for _ in range(20):
            snap = random_snapshot(rng, 2, 7, density=0.5)
            params = MarketParams(cap_u=2)
            a = pack_opt(snap, params, BA, config=PackingConfig(prune=prune))
            b = pack_opt(snap, params, BA, config=PackingConfig(prune=False))
            assert plan_value(a, snap, BA) == pytest.approx(plan_value(b, snap, BA), abs=1e-12)


class TestGreedy:
    def test_single_pair(self):
        snap = snapshot({(1, 1): 0.5}, {1: 0.4})
        assert dict(pack_greedy(snap, MarketParams(), BA).sets) == {1: (1,)}
        snap = snapshot({(1, 1): 0.5}, {1: 0.0})
        assert len(pack_greedy(snap, MarketParams(), BA)) == 0

    def test_negative_marginal_not_added(self):
        assert dict(pack_greedy(one_rider(), MarketParams(cap_u=2), FA).sets) == {1: (1,)}

    def test_large_threshold_empties_plan(self, rng):
        snap = random_snapshot(rng)
        assert len(pack_greedy(snap, MarketParams(theta=2.0), BA)) == 0

    def test_half_of_optimum_under_best_accept(self, rng):
        for _ in range(60):
            snap = random_snapshot(rng, 3, 5)
            params = MarketParams(cap_u=len(snap.drivers))
            greedy = plan_value(pack_greedy(snap, params, BA), snap, BA)
            best = plan_value(pack_opt(snap, params, BA), snap, BA)
            assert greedy >= 0.5 * best - 1e-12


class TestRejectionAware:
    def test_likely_drivers_reduce_to_exclusive(self, rng):
        for _ in range(20):
            snap = random_snapshot(rng)
            snap = CycleSnapshot(snap.riders, snap.drivers, snap.weights, {d: 0.5 for d in snap.drivers})
            got = pack_rejection_aware(snap, MarketParams(), FA, np.random.default_rng(0))
            assert dict(got.sets) == dict(pack_ed(snap).sets)

    def test_batches_unlikely_drivers(self):
        snap = snapshot({(1, 1): 0.9, (1, 2): 0.8, (1, 3): 0.7}, {1: 0.1, 2: 0.1, 3: 0.9})
        plan = pack_rejection_aware(snap, MarketParams(), BA, np.random.default_rng(0), PackingConfig(repair=False))
        assert dict(plan.sets) == {1: (1, 2, 3)}

    def test_no_drivers(self):
        snap = CycleSnapshot((1,), (), {}, {})
        assert len(pack_rejection_aware(snap, MarketParams(), BA, np.random.default_rng(0))) == 0


class TestExclusivePlus:
    def test_best_accept_adds_second_driver(self):
        plan = pack_ed_plus(one_rider(), MarketParams(cap_u=2), BA, np.random.default_rng(0))
        assert dict(plan.sets) == {1: (1, 2)}

    def test_first_accept_refuses_harmful_driver(self):
        plan = pack_ed_plus(one_rider(), MarketParams(cap_u=2), FA, np.random.default_rng(0))
        assert dict(plan.sets) == {1: (1,)}

    def test_no_leftovers_equals_exclusive(self):
        snap = snapshot({(1, 1): 1.0, (2, 2): 0.4}, {1: 0.5, 2: 0.5})
        plan = pack_ed_plus(snap, MarketParams(cap_u=2), BA, np.random.default_rng(0))
        assert dict(plan.sets) == dict(pack_ed(snap).sets)


class TestAllPackers:
    def test_registry(self):
        assert set(PACKERS) == {"ed", "opt", "greedy", "rejection_aware", "ed_plus"}
        with pytest.raises(ValueError):
            get_packer("nope")

    @pytest.mark.parametrize("name", sorted(PACKERS))
    def test_plans_are_feasible(self, rng, name):
        packer = get_packer(name)
        for i in range(60):
            snap = random_snapshot(rng, 4, 6)
            proto = (FA, BA, KAccept(2))[i % 3]
            params = MarketParams(cap_u=1 + i % 3, theta=(0.0, 0.05)[i % 2])
            if name == "ed":
                params = params.replace(theta=0.0)
            plan = packer(snap, params, proto, np.random.default_rng(i))
            assert validate_plan(plan, snap, params, proto) == []

    def test_optimum_dominates(self, rng):
        for i in range(40):
            snap = random_snapshot(rng, 4, 6)
            proto = (FA, BA)[i % 2]
            params = MarketParams(cap_u=3)
            best = plan_value(pack_opt(snap, params, proto), snap, proto)
            for name in HEURISTICS:
                plan = get_packer(name)(snap, params, proto, np.random.default_rng(i))
                assert plan_value(plan, snap, proto) <= best + 1e-12

    @pytest.mark.parametrize("name", sorted(PACKERS))
    def test_deterministic(self, rng, name):
        snap = random_snapshot(rng, 4, 6)
        a = get_packer(name)(snap, MarketParams(), BA, np.random.default_rng(5))
        b = get_packer(name)(snap, MarketParams(), BA, np.random.default_rng(5))
        assert a == b

    def test_repair_restores_threshold(self):
        snap = one_rider()
        bad = NotificationPlan({1: (1, 2)})
        fixed = repair_plan(bad, snap, MarketParams(cap_u=2), FA)
        assert validate_plan(fixed, snap, MarketParams(cap_u=2), FA) == []
        assert dict(fixed.sets) == {1: (1,)}
