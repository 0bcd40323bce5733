"""Allocation strategies, exact solver, apply semantics, UPC baseline, and
the external-solver text bridge."""

import numpy as np
import pytest

from dpplanner.accounting import AlphaGrid, RdpVector
from dpplanner.allocation import (
    Allocation,
    AllocationConflictError,
    GeneralProblem,
    GeneralRequest,
    GeneralSegment,
    InfeasibleAllocationError,
    Problem,
    ProblemRequest,
    ProblemSegment,
    account_upc,
    allocate_dpf,
    allocate_dpk,
    allocate_fcfs,
    apply_allocation,
    build_problem,
    export_lp,
    import_lp_solution,
    solve_exact,
    solve_exact_general,
    verify_allocation,
)
from dpplanner.population import (
    AttributeSchema,
    GroupState,
    LedgerStore,
    RotationState,
    UnlockPolicy,
)
from dpplanner.segmentation import CellInterval, RequestRecord, prune

from support import brute_force_optimum, random_problem

GRID1 = AlphaGrid((2.0,))
GRID2 = AlphaGrid((2.0, 4.0))


def problem_from(costs, weights, budget, arrivals=None, n_ord=1):
    """Single shared segment touching every request."""
    n = len(costs)
    arrivals = arrivals or list(range(n))
    reqs = tuple(
        ProblemRequest(
            request_id=i,
            cost=np.full(n_ord, float(costs[i])),
            weight=float(weights[i]),
            arrival_time=float(arrivals[i]),
            segment_idxs=(0,),
        )
        for i in range(n)
    )
    seg = ProblemSegment(0, np.full(n_ord, float(budget)), frozenset(range(n)))
    return Problem(reqs, (seg,), (0,), "utility")


class TestBuildProblem:
    def store_and_records(self, epsilon=0.5):
        from dpplanner.segmentation import compute_segments

        store = build_store(domain=4, groups=1, epsilon=epsilon)
        reqs = [record(0, 0, 4, 0.3, utility=2.0), record(1, 0, 4, 0.3, utility=1.0)]
        segments = compute_segments(reqs, store)
        return reqs, segments

    def test_empty_residual_is_trivial(self):
        p = build_problem([], [], "utility", [0])
        out = allocate_fcfs(p)
        assert out.accepted == frozenset() and out.objective_value == 0.0

    def test_structure_counts(self):
        # two requests over one contested segment: two binary decisions, one
        # OR-over-orders constraint family
        reqs, segments = self.store_and_records()
        result = prune(reqs, segments)
        p = build_problem(result.residual_requests, result.contested, "utility", [0])
        assert len(p.requests) == 2
        assert len(p.segments) == 1
        assert p.n_orders == 2
        assert all(r.segment_idxs == (0,) for r in p.requests)

    def test_demand_outside_predicate_is_zero(self):
        from dpplanner.segmentation import compute_segments

        store = build_store(domain=8, groups=1, epsilon=0.5)
        reqs = [
            record(0, 0, 4, 0.3),  # cells 0..3
            record(1, 0, 4, 0.3),
            record(2, 4, 4, 0.4),  # cells 4..7, contested by itself? no: alone fits
            record(3, 4, 4, 0.4),
        ]
        segments = compute_segments(reqs, store)
        result = prune(reqs, segments)
        p = build_problem(result.residual_requests, result.contested, "utility", [0])
        assert len(p.segments) == 2
        for req in p.requests:
            for idx, seg in enumerate(p.segments):
                if idx not in req.segment_idxs:
                    assert req.request_id not in seg.members

    def test_objective_mode_switches_weights(self):
        reqs, segments = self.store_and_records()
        result = prune(reqs, segments)
        util = build_problem(result.residual_requests, result.contested, "utility", [0])
        count = build_problem(
            result.residual_requests, result.contested, "request_count", [0]
        )
        assert {r.weight for r in util.requests} == {2.0, 1.0}
        assert {r.weight for r in count.requests} == {1.0}


class TestFcfs:
    def test_all_fit(self):
        p = problem_from([0.1, 0.1, 0.1], [1, 1, 1], budget=1.0)
        out = allocate_fcfs(p)
        assert out.accepted == frozenset({0, 1, 2})

    def test_sequential_feasibility(self):
        p = problem_from([0.4, 0.4, 0.1], [1, 1, 1], budget=0.5)
        out = allocate_fcfs(p)
        assert out.accepted == frozenset({0, 2})

    def test_order_sensitivity(self):
        p = problem_from([0.4, 0.4, 0.1], [1, 1, 1], budget=0.5, arrivals=[2, 1, 0])
        out = allocate_fcfs(p)
        assert out.accepted == frozenset({2, 1})


class TestDpf:
    def test_uniform_matches_fcfs_count(self):
        p = problem_from([0.2] * 4, [1] * 4, budget=0.5)
        assert len(allocate_dpf(p).accepted) == len(allocate_fcfs(p).accepted)

    def test_cheap_dominant_first(self):
        p = problem_from([0.2, 0.9], [1, 1], budget=1.0)
        out = allocate_dpf(p)
        assert 0 in out.accepted

    def test_weight_flips_order(self):
        # contested budget admits exactly one of the two big requests
        base_costs = [0.6, 0.6, 0.39]
        p1 = problem_from(base_costs, [1.0, 1.0, 1.0], budget=1.0)
        first = allocate_dpf(p1)
        assert first.accepted == frozenset({2, 0})
        # doubling the second request's weight halves its key: accepted set flips
        p2 = problem_from(base_costs, [1.0, 2.0, 1.0], budget=1.0)
        second = allocate_dpf(p2)
        assert second.accepted == frozenset({2, 1})


class TestDpk:
    def test_knapsack_instance_matches_brute_force(self):
        # instance where the density order is exactly optimal
        costs = [0.4, 0.3, 0.2, 0.15, 0.1]
        weights = [8, 5, 3, 2, 1]
        p = problem_from(costs, weights, budget=0.9)
        out = allocate_dpk(p)
        best_obj, best_set = brute_force_optimum(p)
        assert best_set == frozenset({0, 1, 2})
        assert out.objective_value == pytest.approx(best_obj)
        assert out.accepted == best_set

    def test_zero_cost_always_first(self):
        p = problem_from([0.0, 0.5, 0.5], [1, 3, 3], budget=0.5)
        out = allocate_dpk(p)
        assert 0 in out.accepted

    def test_beats_fcfs_on_random_instances(self):
        rng = np.random.default_rng(21)
        wins = 0
        trials = 60
        for _ in range(trials):
            p = random_problem(rng, max_requests=12)
            if allocate_dpk(p).objective_value >= allocate_fcfs(p).objective_value:
                wins += 1
        assert wins >= 0.9 * trials


class TestSolveExact:
    def test_no_constraints_accepts_all(self):
        reqs = tuple(
            ProblemRequest(i, np.zeros(1), 1.0, float(i), ()) for i in range(4)
        )
        p = Problem(reqs, (), (0,), "utility")
        out = solve_exact(p)
        assert out.accepted == frozenset(range(4)) and out.proved_optimal

    def test_small_named_instance(self):
        p = problem_from([0.6, 0.6, 0.4], [2, 2, 3], budget=1.0)
        out = solve_exact(p)
        assert out.objective_value == pytest.approx(5.0)
        assert 2 in out.accepted and len(out.accepted) == 2

    def test_matches_brute_force_on_random(self):
        rng = np.random.default_rng(42)
        for _ in range(40):
            p = random_problem(rng)
            ours = solve_exact(p, time_limit=20.0)
            assert ours.proved_optimal
            best_obj, _ = brute_force_optimum(p)
            assert ours.objective_value == pytest.approx(best_obj, abs=1e-9)

    def test_weight_scaling_keeps_set(self):
        rng = np.random.default_rng(7)
        p = random_problem(rng, max_requests=10)
        base = solve_exact(p)
        for factor in (2.0, 0.5):
            scaled = Problem(
                tuple(
                    ProblemRequest(r.request_id, r.cost, r.weight * factor,
                                   r.arrival_time, r.segment_idxs)
                    for r in p.requests
                ),
                p.segments, p.groups, p.objective_mode,
            )
            out = solve_exact(scaled)
            assert out.accepted == base.accepted

    def test_time_limit_returns_best_found(self):
        rng = np.random.default_rng(3)
        p = random_problem(rng, max_requests=12)
        out = solve_exact(p, time_limit=0.0)
        assert not out.proved_optimal
        verify_allocation(p, out.accepted)

    def test_exact_at_least_heuristics(self):
        rng = np.random.default_rng(17)
        for _ in range(25):
            p = random_problem(rng)
            best = solve_exact(p, time_limit=20.0).objective_value
            for algo in (allocate_fcfs, allocate_dpf, allocate_dpk):
                assert best >= algo(p).objective_value - 1e-9


class TestVerify:
    def test_witness_orders_reported(self):
        p = problem_from([0.3, 0.3], [1, 1], budget=1.0)
        out = allocate_fcfs(p)
        witnesses = verify_allocation(p, out.accepted)
        assert witnesses == {0: 0}

    def test_violation_raises(self):
        p = problem_from([0.6, 0.6], [1, 1], budget=1.0)
        with pytest.raises(InfeasibleAllocationError):
            verify_allocation(p, {0, 1})


class TestGeneralForm:
    def brute(self, gp: GeneralProblem):
        from itertools import combinations, product

        best = (-1.0, frozenset())
        reqs = gp.requests
        n = len(reqs)
        for mask in range(2**n):
            chosen = [reqs[i] for i in range(n) if (mask >> i) & 1]
            options = [list(combinations(gp.groups, r.groups_required)) for r in chosen]
            for assign in product(*options):
                sums: dict = {}
                for r, combo in zip(chosen, assign):
                    for si in r.segment_idxs:
                        for g in combo:
                            key = (si, g)
                            sums[key] = sums.get(key, 0.0) + r.cost
                ok = True
                for si, seg in enumerate(gp.segments):
                    n_ord = len(next(iter(seg.budgets.values())))
                    order_ok = np.ones(n_ord, dtype=bool)
                    for g in gp.groups:
                        total = sums.get((si, g), np.zeros(n_ord))
                        order_ok &= total <= seg.budgets[g] + 1e-12
                    if not order_ok.any():
                        ok = False
                        break
                if ok:
                    obj = sum(r.weight for r in chosen)
                    if obj > best[0]:
                        best = (obj, frozenset(r.request_id for r in chosen))
                    break
        return best

    def make(self, rng, n_groups=2):
        n_req = int(rng.integers(2, 5))
        n_ord = 2
        groups = tuple(range(n_groups))
        segs = []
        for si in range(2):
            segs.append(
                GeneralSegment(
                    segment_id=si,
                    budgets={g: rng.uniform(0.3, 1.0, n_ord) for g in groups},
                    members=frozenset(range(n_req)),
                )
            )
        reqs = tuple(
            GeneralRequest(
                request_id=i,
                cost=rng.uniform(0.1, 0.6, n_ord),
                weight=float(rng.integers(1, 6)),
                arrival_time=float(i),
                groups_required=int(rng.integers(1, n_groups + 1)),
                segment_idxs=(0, 1),
            )
            for i in range(n_req)
        )
        return GeneralProblem(reqs, tuple(segs), groups)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(31)
        for _ in range(15):
            gp = self.make(rng)
            accepted, assign, obj, proved = solve_exact_general(gp, time_limit=20.0)
            assert proved
            expected_obj, _ = self.brute(gp)
            assert obj == pytest.approx(expected_obj, abs=1e-9)
            for rid, combo in assign.items():
                req = next(r for r in gp.requests if r.request_id == rid)
                assert len(combo) == req.groups_required

    def test_full_demand_collapses_to_y(self):
        # with D_i = |N| the general form equals the collapsed solver on floors
        rng = np.random.default_rng(5)
        for _ in range(10):
            gp = self.make(rng)
            gp = GeneralProblem(
                tuple(
                    GeneralRequest(r.request_id, r.cost, r.weight, r.arrival_time,
                                   len(gp.groups), r.segment_idxs)
                    for r in gp.requests
                ),
                gp.segments,
                gp.groups,
            )
            _, _, obj, _ = solve_exact_general(gp, time_limit=20.0)
            floors = tuple(
                ProblemSegment(
                    seg.segment_id,
                    np.min(np.vstack(list(seg.budgets.values())), axis=0),
                    seg.members,
                )
                for seg in gp.segments
            )
            collapsed = Problem(
                tuple(
                    ProblemRequest(r.request_id, r.cost, r.weight, r.arrival_time,
                                   r.segment_idxs)
                    for r in gp.requests
                ),
                floors,
                gp.groups,
                "utility",
            )
            assert solve_exact(collapsed).objective_value == pytest.approx(obj, abs=1e-9)


def build_store(domain=8, epsilon=1.0, groups=2, window_k=2):
    grid = GRID2
    policy = UnlockPolicy(0.0, RdpVector(grid, np.full(2, epsilon)), window_k)
    state = RotationState(
        round_index=0, active=tuple(GroupState(g, window_k) for g in range(groups))
    )
    return LedgerStore(policy, AttributeSchema(domain), state)


def record(rid, start, length, cost, fraction=1.0, utility=1.0):
    return RequestRecord(
        request_id=rid,
        predicate=CellInterval(start, length),
        sample_fraction=fraction,
        cost=RdpVector(GRID2, np.full(2, float(cost))),
        utility=utility,
        arrival_time=float(rid),
    )


class TestApplyAllocation:
    def test_empty_allocation_noop(self):
        store = build_store()
        out = apply_allocation([], store, round_index=0)
        assert not out.charges and not out.policies

    def test_charges_every_demanded_block(self):
        store = build_store(domain=4, groups=2)
        out = apply_allocation([record(0, 1, 2, 0.25)], store, round_index=0)
        assert set(out.charges) == {(0, 1), (0, 2), (1, 1), (1, 2)}
        for vec in out.charges.values():
            np.testing.assert_allclose(vec, 0.25)

    def test_charges_sum_accepted_demands(self):
        store = build_store(domain=4, groups=1, epsilon=2.0)
        out = apply_allocation(
            [record(0, 0, 2, 0.25), record(1, 1, 2, 0.5)], store, round_index=0
        )
        np.testing.assert_allclose(out.charges[(0, 1)], 0.75)
        np.testing.assert_allclose(out.charges[(0, 0)], 0.25)
        np.testing.assert_allclose(out.charges[(0, 2)], 0.5)

    def test_replay_rejected_atomically(self):
        store = build_store(domain=4, groups=1, epsilon=1.0)
        reqs = [record(0, 0, 4, 0.6)]
        apply_allocation(reqs, store, round_index=0)
        before = {k: v.consumed.eps.copy() for k, v in store.blocks.items()}
        with pytest.raises(AllocationConflictError):
            apply_allocation(reqs, store, round_index=0)
        after = {k: v.consumed.eps for k, v in store.blocks.items()}
        for key in before:
            np.testing.assert_array_equal(before[key], after[key])

    def test_policy_records_carry_grant(self):
        store = build_store(domain=4, groups=2)
        out = apply_allocation(
            [record(5, 1, 2, 0.2, fraction=0.25)], store, round_index=3,
            policy_id_start=7, delta_reference=1e-7,
        )
        pol = out.policies[0]
        assert pol.policy_id == 7
        assert pol.application_id == 5
        assert pol.round_index == 3
        assert pol.sample_fraction == 0.25
        assert pol.group_ids == (0, 1)
        assert pol.predicate == CellInterval(1, 2)
        np.testing.assert_allclose(pol.granted.eps, 0.2)


class TestAccountUpc:
    def test_full_fraction_charges_all_groups(self):
        store = build_store(domain=4, groups=4, window_k=4)
        rng = np.random.default_rng(0)
        pinned, segments = account_upc([record(0, 0, 2, 0.3, fraction=1.0)], store, rng)
        assert pinned[0].charged_groups == (0, 1, 2, 3)
        # predicates are ignored in accounting: whole domain
        assert pinned[0].predicate == CellInterval(0, 4)
        assert len(segments) == 4

    def test_quarter_fraction_rounds_half_up(self):
        store = build_store(domain=4, groups=12, window_k=12)
        rng = np.random.default_rng(1)
        pinned, _ = account_upc([record(0, 0, 2, 0.3, fraction=0.25)], store, rng)
        assert len(pinned[0].charged_groups) == 3

    def test_group_segments_have_own_budgets(self):
        store = build_store(domain=4, groups=2, epsilon=1.0)
        store.charge_block(0, 0, RdpVector(GRID2, np.array([0.4, 0.4])))
        rng = np.random.default_rng(2)
        _, segments = account_upc([record(0, 0, 4, 0.3, fraction=1.0)], store, rng)
        budgets = {next(iter(s.per_group_remaining)): s.floor.eps[0] for s in segments}
        assert budgets[0] == pytest.approx(0.6)
        assert budgets[1] == pytest.approx(1.0)

    def test_full_fraction_block_set_matches_subsampled(self):
        # at f=1 the UPC baseline charges exactly the blocks a subsampled-mode
        # full-domain request charges, only at the unamplified cost
        rng = np.random.default_rng(4)
        store_a = build_store(domain=4, groups=3, window_k=4)
        pinned, _ = account_upc([record(0, 0, 4, 0.2, fraction=1.0)], store_a, rng)
        upc_out = apply_allocation(pinned, store_a, round_index=0)
        store_b = build_store(domain=4, groups=3, window_k=4)
        sub_out = apply_allocation(
            [record(0, 0, 4, 0.2, fraction=1.0)], store_b, round_index=0
        )
        assert set(upc_out.charges) == set(sub_out.charges)
        for key, vec in upc_out.charges.items():
            np.testing.assert_array_equal(vec, sub_out.charges[key])

    def test_pipeline_round_trip(self):
        store = build_store(domain=8, groups=4, window_k=4, epsilon=0.5)
        rng = np.random.default_rng(3)
        reqs = [record(i, 0, 8, 0.2, fraction=0.5, utility=float(i + 1)) for i in range(4)]
        pinned, segments = account_upc(reqs, store, rng)
        result = prune(pinned, segments)
        problem = build_problem(
            result.residual_requests, result.contested, "utility",
            [g.group_id for g in store.active_groups()],
        )
        out = allocate_dpk(problem)
        verify_allocation(problem, out.accepted)
        by_id = {r.request_id: r for r in pinned}
        accepted = [by_id[i] for i in sorted(set(result.auto_accept) | out.accepted)]
        apply_allocation(accepted, store, round_index=0)


class TestLpBridge:
    def test_export_structure(self, tmp_path):
        p = problem_from([0.6, 0.6, 0.4], [2, 2, 3], budget=1.0)
        path = tmp_path / "problem.lp"
        export_lp(p, path)
        text = path.read_text()
        assert text.startswith("\\ dpplanner problem export schema=dpplanner-lp/1")
        assert "Maximize" in text and "Subject To" in text and "Binary" in text
        assert "y_0" in text and "z_0_0" in text
        assert "card_0" in text

    def test_solution_import_round_trip(self, tmp_path):
        p = problem_from([0.6, 0.6, 0.4], [2, 2, 3], budget=1.0)
        sol = tmp_path / "solution.txt"
        sol.write_text("# solver output\ny_0 1\ny_1 0\ny_2 1\nz_0_0 0\n")
        out = import_lp_solution(p, sol)
        assert out.accepted == frozenset({0, 2})
        assert out.objective_value == pytest.approx(5.0)

    def test_infeasible_solution_rejected(self, tmp_path):
        p = problem_from([0.6, 0.6], [1, 1], budget=1.0)
        sol = tmp_path / "solution.txt"
        sol.write_text("y_0 1\ny_1 1\n")
        with pytest.raises(InfeasibleAllocationError):
            import_lp_solution(p, sol)
