import numpy as np
import pytest

from merge_planner.linear_op import (
    DiagGaussian,
    DiagOperator,
    shrinkage,
    surrogate_target,
    w2_objective,
)
from merge_planner.pareto_dp import (
    FrontierCapExceeded,
    ParetoFrontier,
    PreferenceVector,
    brute_force_optimum,
    dominates,
    insert_and_prune,
    pareto_dp,
)
from merge_planner.schedule import make_cosine_schedule
from merge_planner.strategy import (
    evaluate_plan,
    format_plan,
    plan_progressive,
    plan_sequential_boot,
    plan_sequential_consistency,
    plan_vanilla,
)


def _op(entries, interval=(1, 1)):
    return DiagOperator(entries=entries, interval=interval)


class TestPreferenceVector:
    def test_from_variances(self):
        rho = PreferenceVector.from_variances(DiagGaussian([5.0, 1.0, 0.2]))
        np.testing.assert_array_equal(rho.rho, [1.0, -1.0, -1.0])

    def test_boundary_lam_equal_one_prefers_smaller(self):
        rho = PreferenceVector.from_variances(DiagGaussian([1.0]))
        assert rho.rho[0] == -1.0

    def test_rejects_non_sign_entries(self):
        with pytest.raises(ValueError):
            PreferenceVector(rho=np.array([1.0, 0.5]))


class TestDominates:
    def test_equal_operators_do_not_dominate(self):
        rho = PreferenceVector(rho=np.array([1.0, -1.0]))
        a = _op([0.5, 0.5])
        assert not dominates(a, a, rho)

    def test_scalar_prefer_larger(self):
        rho = PreferenceVector(rho=np.array([1.0]))
        assert dominates(_op([0.9]), _op([0.8]), rho)
        assert not dominates(_op([0.8]), _op([0.9]), rho)

    def test_mixed_preferences_block_dominance(self):
        rho = PreferenceVector(rho=np.array([1.0, -1.0]))
        b = _op([0.9, 0.5])
        c = _op([0.8, 0.4])
        assert not dominates(b, c, rho)
        assert not dominates(c, b, rho)

    def test_dimension_mismatch(self):
        rho = PreferenceVector(rho=np.array([1.0]))
        with pytest.raises(ValueError):
            dominates(_op([0.9]), _op([0.8, 0.7]), rho)


class TestInsertAndPrune:
    def setup_method(self):
        self.rho = PreferenceVector(rho=np.array([1.0, -1.0]))

    def test_empty_insert(self):
        frontier = ParetoFrontier(interval=(1, 1))
        insert_and_prune(frontier, _op([0.5, 0.5]), self.rho)
        assert len(frontier) == 1

    def test_dominated_candidate_discarded(self):
        frontier = ParetoFrontier(interval=(1, 1))
        insert_and_prune(frontier, _op([0.9, 0.4]), self.rho)
        insert_and_prune(frontier, _op([0.8, 0.5]), self.rho)  # worse on both
        assert len(frontier) == 1
        np.testing.assert_array_equal(frontier.items[0].entries, [0.9, 0.4])

    def test_dominating_candidate_sweeps(self):
        frontier = ParetoFrontier(interval=(1, 1))
        insert_and_prune(frontier, _op([0.7, 0.7]), self.rho)
        insert_and_prune(frontier, _op([0.6, 0.5]), self.rho)  # incomparable pair
        assert len(frontier) == 2
        insert_and_prune(frontier, _op([0.8, 0.4]), self.rho)  # beats both
        assert len(frontier) == 1
        np.testing.assert_array_equal(frontier.items[0].entries, [0.8, 0.4])

    def test_incomparable_accumulate(self):
        frontier = ParetoFrontier(interval=(1, 1))
        insert_and_prune(frontier, _op([0.9, 0.9]), self.rho)
        insert_and_prune(frontier, _op([0.5, 0.5]), self.rho)
        assert len(frontier) == 2

    def test_exact_duplicate_discarded(self):
        frontier = ParetoFrontier(interval=(1, 1))
        insert_and_prune(frontier, _op([0.5, 0.5]), self.rho)
        insert_and_prune(frontier, _op([0.5, 0.5]), self.rho)
        assert len(frontier) == 1

    def test_interval_mismatch(self):
        frontier = ParetoFrontier(interval=(1, 2))
        with pytest.raises(ValueError):
            insert_and_prune(frontier, _op([0.5, 0.5], interval=(1, 1)), self.rho)

    def test_frontier_soundness_random(self):
        rng = np.random.default_rng(31)
        rho = PreferenceVector(rho=np.array([1.0, -1.0, 1.0]))
        frontier = ParetoFrontier(interval=(1, 1))
        for _ in range(300):
            insert_and_prune(frontier, _op(rng.uniform(0, 2, size=3)), rho)
        for i, b in enumerate(frontier.items):
            for j, c in enumerate(frontier.items):
                if i != j:
                    assert not dominates(b, c, rho)


class TestMergeMapMonotonicity:
    def test_strictly_increasing_in_both_arguments(self):
        rng = np.random.default_rng(47)
        for _ in range(500):
            x, y = rng.uniform(0.01, 3.0, size=2)
            g = rng.uniform(0.01, 0.99)
            dx, dy = rng.uniform(1e-4, 0.1, size=2)
            f = (1 - g) * x * y + g * y
            assert (1 - g) * (x + dx) * y + g * y > f
            assert (1 - g) * x * (y + dy) + g * (y + dy) > f


class TestParetoDp:
    def test_oracle_equivalence_random(self):
        rng = np.random.default_rng(61)
        for T in (2, 3, 4, 5, 6):
            sched = make_cosine_schedule(T)
            for d in (1, 2, 3):
                for s in (1.6, 3.2, 6.4):
                    lam = 2.0 * (1.0 - rng.random(d))
                    data = DiagGaussian(lam)
                    shrink = shrinkage(sched, data, s)
                    surr = surrogate_target(sched, data)
                    dp = pareto_dp(sched, data, shrink, surr)
                    bf = brute_force_optimum(sched, data, shrink, surr)
                    assert abs(dp.objective - bf.objective) <= 1e-12

    def test_returned_plan_reproduces_objective(self):
        sched = make_cosine_schedule(6)
        data = DiagGaussian([1.05, 0.95])
        shrink = shrinkage(sched, data, 6.4)
        surr = surrogate_target(sched, data)
        dp = pareto_dp(sched, data, shrink, surr, keep_plans=True)
        assert dp.plan is not None
        replayed = evaluate_plan(dp.plan, sched, data, shrink)
        assert w2_objective(replayed, surr) == pytest.approx(dp.objective, abs=1e-15)

    def test_scalar_frontier_collapse(self):
        sched = make_cosine_schedule(8)
        data = DiagGaussian([0.6])
        shrink = shrinkage(sched, data, 3.2)
        surr = surrogate_target(sched, data)
        dp = pareto_dp(sched, data, shrink, surr)
        assert all(size == 1 for size in dp.frontier_sizes.values())

    def test_frontier_sizes_cover_all_intervals(self):
        sched = make_cosine_schedule(5)
        data = DiagGaussian([1.05, 0.95])
        shrink = shrinkage(sched, data, 6.4)
        surr = surrogate_target(sched, data)
        dp = pareto_dp(sched, data, shrink, surr)
        expected = {(t1, t2) for t1 in range(1, 6) for t2 in range(t1, 6)}
        assert set(dp.frontier_sizes) == expected

    def test_never_worse_than_canonical(self):
        sched = make_cosine_schedule(16)
        for lam in np.geomspace(0.2, 5.0, 9):
            data = DiagGaussian([lam])
            shrink = shrinkage(sched, data, 6.4)
            surr = surrogate_target(sched, data)
            dp = pareto_dp(sched, data, shrink, surr, keep_plans=False)
            for plan in (
                plan_vanilla(16),
                plan_progressive(16),
                plan_sequential_boot(16),
                plan_sequential_consistency(16),
            ):
                obj = w2_objective(evaluate_plan(plan, sched, data, shrink), surr)
                assert dp.objective <= obj + 1e-12

    def test_keep_plans_false_drops_plan(self):
        sched = make_cosine_schedule(4)
        data = DiagGaussian([0.5])
        shrink = shrinkage(sched, data, 6.4)
        surr = surrogate_target(sched, data)
        dp = pareto_dp(sched, data, shrink, surr, keep_plans=False)
        assert dp.plan is None
        assert dp.best.interval == (1, 4)

    def test_frontier_cap_aborts(self):
        sched = make_cosine_schedule(8)
        data = DiagGaussian([1.05, 0.95])
        shrink = shrinkage(sched, data, 6.4)
        surr = surrogate_target(sched, data)
        uncapped = pareto_dp(sched, data, shrink, surr)
        assert max(uncapped.frontier_sizes.values()) > 1
        with pytest.raises(FrontierCapExceeded):
            pareto_dp(sched, data, shrink, surr, max_frontier_size=1)

    def test_deterministic_output(self):
        sched = make_cosine_schedule(7)
        data = DiagGaussian([1.08, 0.97])
        shrink = shrinkage(sched, data, 6.4)
        surr = surrogate_target(sched, data)
        a = pareto_dp(sched, data, shrink, surr)
        b = pareto_dp(sched, data, shrink, surr)
        assert a.objective == b.objective
        assert format_plan(a.plan) == format_plan(b.plan)
        np.testing.assert_array_equal(a.best.entries, b.best.entries)

    def test_zero_training_time_freezes_to_final_step(self):
        # gamma = 1 everywhere: every merge returns its right block, so every
        # plan collapses to the final single-step operator
        sched = make_cosine_schedule(6)
        data = DiagGaussian([0.5])
        shrink = shrinkage(sched, data, 0.0)
        surr = surrogate_target(sched, data)
        dp = pareto_dp(sched, data, shrink, surr)
        final_step = sched.sigma[5]
        assert dp.best.entries[0] == final_step
        assert dp.objective == pytest.approx(
            (surr.entries[0] - final_step) ** 2, abs=1e-15
        )


class TestBruteForce:
    def test_t1_single_leaf(self):
        sched = make_cosine_schedule(1)
        data = DiagGaussian([0.5])
        shrink = shrinkage(sched, data, 6.4)
        surr = surrogate_target(sched, data)
        bf = brute_force_optimum(sched, data, shrink, surr)
        assert format_plan(bf.plan) == "(1:1)"

    def test_t2_common_value(self):
        sched = make_cosine_schedule(2)
        data = DiagGaussian([0.5])
        shrink = shrinkage(sched, data, 6.4)
        surr = surrogate_target(sched, data)
        bf = brute_force_optimum(sched, data, shrink, surr)
        dp = pareto_dp(sched, data, shrink, surr)
        assert bf.objective == dp.objective
        # ties broken by the lexicographically smallest serialization
        assert format_plan(bf.plan) == "((1:1)(2:2))"

    def test_mixed_two_dim_matches_dp(self):
        sched = make_cosine_schedule(4)
        data = DiagGaussian([1.05, 0.95])
        shrink = shrinkage(sched, data, 6.4)
        surr = surrogate_target(sched, data)
        bf = brute_force_optimum(sched, data, shrink, surr)
        dp = pareto_dp(sched, data, shrink, surr)
        assert bf.objective == dp.objective

    def test_guard(self):
        sched = make_cosine_schedule(9)
        data = DiagGaussian([1.0])
        shrink = shrinkage(sched, data, 6.4)
        surr = surrogate_target(sched, data)
        with pytest.raises(ValueError, match="limited"):
            brute_force_optimum(sched, data, shrink, surr)
