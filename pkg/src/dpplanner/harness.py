"""Round-loop simulator tying accounting, rotation, segmentation, and
allocation together, plus metrics aggregation for multi-seed reports."""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .accounting import (
    AdpBudget,
    AlphaGrid,
    GAUSSIAN_FAMILY,
    Mechanism,
    RdpVector,
    amplify_poisson_gaussian,
    amplify_poisson_generic,
    amplify_poisson_pure,
    budget_from_adp,
    calibrate_gaussian_sigma,
    pure_dp_to_rdp,
    rdp_to_adp,
    scale,
)
from .allocation import (
    Allocation,
    PolicyRecord,
    account_upc,
    allocate_dpf,
    allocate_dpk,
    allocate_fcfs,
    apply_allocation,
    build_problem,
    solve_exact,
    verify_allocation,
)
from .population import (
    AttributeSchema,
    LedgerStore,
    RotationState,
    UnlockPolicy,
)
from .presets import SimulationConfig
from .segmentation import RequestRecord, compute_segments, prune
from .workload import WorkloadInstance, WorkloadRequest, generate

__all__ = [
    "RoundMetrics",
    "SimulationResult",
    "run_simulation",
    "plan_round",
    "to_planner_record",
    "audit_max_adp",
    "aggregate_runs",
    "compare_aggregates",
]

log = logging.getLogger(__name__)

_ALGORITHMS: dict[str, Callable] = {
    "fcfs": allocate_fcfs,
    "dpf": allocate_dpf,
    "dpk": allocate_dpk,
}


@dataclass
class RoundMetrics:
    round_index: int
    offered_requests: int = 0
    accepted_requests: int = 0
    offered_utility: float = 0.0
    accepted_utility: float = 0.0
    auto_accepted: int = 0
    auto_rejected: int = 0
    residual_size: int = 0
    objective_value: float = 0.0
    exact_objective: float | None = None
    solver_proved: bool | None = None
    offered_by_tier: dict = field(default_factory=dict)
    accepted_by_tier: dict = field(default_factory=dict)
    order_utilization: tuple = ()
    wall_ms: float = 0.0


@dataclass
class SimulationResult:
    config: SimulationConfig
    metrics: list
    store: LedgerStore
    policies: list
    max_adp_epsilon: float
    instance: WorkloadInstance


@functools.lru_cache(maxsize=None)
def _amplified_cost(
    kind: Mechanism,
    eps: float,
    delta: float,
    repetitions: int,
    fraction: float,
    grid: AlphaGrid,
) -> RdpVector:
    """Per-block charge after Poisson-subsampling amplification at gamma =
    sampled-population fraction."""
    if kind in GAUSSIAN_FAMILY:
        sigma = calibrate_gaussian_sigma(eps, delta, repetitions)
        return scale(amplify_poisson_gaussian(sigma, fraction, grid), repetitions)
    base = pure_dp_to_rdp(eps, grid)
    bound = amplify_poisson_generic(base, eps, fraction, grid)
    # exact pure-DP amplification is tighter at high orders; both are valid
    pure = amplify_poisson_pure(eps, fraction, grid) if fraction > 0 else bound
    return RdpVector(grid, np.minimum(bound.eps, pure.eps))


def to_planner_record(w: WorkloadRequest, grid: AlphaGrid, accounting: str) -> RequestRecord:
    """Planner-side request: the per-block charge is the amplified cost in
    subsampled mode and the raw mechanism cost in the UPC baseline."""
    if accounting == "subsampled":
        cost = _amplified_cost(
            w.mechanism, w.target_epsilon, w.target_delta, w.repetitions,
            w.sample_fraction, grid,
        )
    else:
        cost = w.base_cost
    return RequestRecord(
        request_id=w.request_id,
        predicate=w.predicate,
        sample_fraction=w.sample_fraction,
        cost=cost,
        weight=w.weight,
        utility=w.utility,
        arrival_time=w.arrival_minutes,
        tier=w.tier,
        mechanism=w.mechanism.value,
    )


@dataclass
class PlanOutcome:
    auto_accepted: tuple
    auto_rejected: tuple
    solver_accepted: frozenset
    allocation: Allocation
    policies: tuple
    residual_size: int
    exact_objective: float | None
    next_policy_id: int


def plan_round(
    records: Sequence[RequestRecord],
    store: LedgerStore,
    config: SimulationConfig,
    rng: np.random.Generator,
    round_index: int,
    next_policy_id: int,
) -> PlanOutcome:
    """One planning pass: segments -> prune -> allocate -> apply."""
    if config.accounting == "upc":
        records, segments = account_upc(records, store, rng)
    else:
        segments = compute_segments(records, store)
    by_id = {r.request_id: r for r in records}

    pruned = prune(records, segments)
    auto_records = [by_id[i] for i in pruned.auto_accept]
    res_auto = apply_allocation(
        auto_records, store, round_index, next_policy_id, config.budget_delta
    )
    next_policy_id += len(res_auto.policies)

    groups = tuple(g.group_id for g in store.active_groups())
    problem = build_problem(
        pruned.residual_requests, pruned.contested, config.objective, groups
    )
    if config.algorithm == "exact":
        allocation = solve_exact(problem, config.solver_time_limit)
    else:
        allocation = _ALGORITHMS[config.algorithm](problem)
    verify_allocation(problem, allocation.accepted)

    exact_objective = None
    if config.compare_exact and config.algorithm != "exact":
        reference = solve_exact(problem, config.solver_time_limit)
        exact_objective = reference.objective_value if reference.proved_optimal else None

    accepted_records = [by_id[i] for i in sorted(allocation.accepted)]
    res_main = apply_allocation(
        accepted_records, store, round_index, next_policy_id, config.budget_delta
    )
    next_policy_id += len(res_main.policies)

    return PlanOutcome(
        auto_accepted=pruned.auto_accept,
        auto_rejected=pruned.auto_reject,
        solver_accepted=allocation.accepted,
        allocation=allocation,
        policies=res_auto.policies + res_main.policies,
        residual_size=len(pruned.residual_requests),
        exact_objective=exact_objective,
        next_policy_id=next_policy_id,
    )


def _order_utilization(store: LedgerStore, budget: RdpVector) -> tuple:
    peak = None
    for consumed in store.consumed_arrays():
        peak = consumed if peak is None else np.maximum(peak, consumed)
    if peak is None:
        return tuple(0.0 for _ in range(len(budget.eps)))
    with np.errstate(invalid="ignore", divide="ignore"):
        util = np.where(
            np.isfinite(budget.eps) & (budget.eps > 0), peak / budget.eps, 0.0
        )
    return tuple(float(u) for u in util)


def run_simulation(
    config: SimulationConfig,
    instance: WorkloadInstance | None = None,
) -> SimulationResult:
    """Simulate the configured number of rounds and audit the final ledgers.

    Deterministic in (config, instance): identical inputs reproduce every
    metric and policy byte except wall-clock fields.
    """
    grid = AlphaGrid(config.grid_orders)
    budget = budget_from_adp(
        AdpBudget(config.budget_epsilon, config.budget_delta), grid
    )
    policy = UnlockPolicy(config.delta_slack, budget, config.rotation.window_k)
    state = RotationState.bootstrap(config.rotation.window_k)
    store = LedgerStore(policy, AttributeSchema(config.workload.domain_size), state)
    if instance is None:
        instance = generate(
            config.workload, grid,
            assignment_horizon_t=config.rotation.assignment_horizon_t,
        )
    rng = np.random.default_rng(config.seed)

    def _fill_populations() -> None:
        counts = instance.group_populations
        store.state = dataclasses.replace(
            store.state,
            active=tuple(
                dataclasses.replace(g, population=counts.get(g.group_id, 0))
                for g in store.state.active
            ),
        )

    _fill_populations()
    metrics: list[RoundMetrics] = []
    policies: list[PolicyRecord] = []
    next_policy_id = 0
    for round_index in range(config.workload.rounds):
        t0 = time.monotonic()
        if round_index > 0:
            store.advance()
            _fill_populations()
        batch = instance.batches[round_index]
        records = [to_planner_record(w, grid, config.accounting) for w in batch]
        outcome = plan_round(records, store, config, rng, round_index, next_policy_id)
        next_policy_id = outcome.next_policy_id
        policies.extend(outcome.policies)

        accepted_ids = set(outcome.auto_accepted) | set(outcome.solver_accepted)
        by_id = {w.request_id: w for w in batch}
        m = RoundMetrics(round_index=round_index)
        m.offered_requests = len(batch)
        m.accepted_requests = len(accepted_ids)
        m.offered_utility = sum(w.utility for w in batch)
        m.accepted_utility = sum(by_id[i].utility for i in accepted_ids)
        m.auto_accepted = len(outcome.auto_accepted)
        m.auto_rejected = len(outcome.auto_rejected)
        m.residual_size = outcome.residual_size
        m.objective_value = outcome.allocation.objective_value
        m.exact_objective = outcome.exact_objective
        m.solver_proved = (
            outcome.allocation.proved_optimal if config.algorithm == "exact" else None
        )
        for w in batch:
            m.offered_by_tier[w.tier] = m.offered_by_tier.get(w.tier, 0) + 1
            if w.request_id in accepted_ids:
                m.accepted_by_tier[w.tier] = m.accepted_by_tier.get(w.tier, 0) + 1
        m.order_utilization = _order_utilization(store, budget)
        m.wall_ms = (time.monotonic() - t0) * 1000.0
        metrics.append(m)
        log.info(
            "round %d: offered=%d accepted=%d utility=%.4f",
            round_index, m.offered_requests, m.accepted_requests, m.accepted_utility,
        )

    max_adp = audit_max_adp(store, config.budget_delta)
    return SimulationResult(
        config=config,
        metrics=metrics,
        store=store,
        policies=policies,
        max_adp_epsilon=max_adp,
        instance=instance,
    )


def audit_max_adp(store: LedgerStore, delta: float) -> float:
    """Worst converted ADP epsilon over every block ever touched."""
    consumed = list(store.consumed_arrays())
    if not consumed:
        return 0.0
    alphas = store.grid.as_array()
    conv = np.vstack(consumed) + math.log(1.0 / delta) / (alphas - 1.0)
    conv = np.where(np.isfinite(conv), conv, np.inf)
    return float(conv.min(axis=1).max())


# --- reporting ---------------------------------------------------------------


def aggregate_runs(runs: Sequence[dict]) -> dict:
    """Mean and sigma across runs of per-round and cumulative series.

    Each run is a dict with ``rows`` (per-round metric dicts) and ``meta``.
    """
    if not runs:
        raise ValueError("no runs to aggregate")
    n_rounds = len(runs[0]["rows"])
    for run in runs:
        if len(run["rows"]) != n_rounds:
            raise ValueError("runs have different round counts")

    def series(name: str) -> np.ndarray:
        return np.array([[row[name] for row in run["rows"]] for run in runs])

    out: dict = {"n_runs": len(runs), "n_rounds": n_rounds, "per_round": {}, "cumulative": {}}
    for name in ("accepted_utility", "accepted_requests", "offered_utility", "offered_requests"):
        data = series(name)
        out["per_round"][name] = {
            "mean": data.mean(axis=0).tolist(),
            "std": data.std(axis=0).tolist(),
        }
        totals = data.sum(axis=1)
        out["cumulative"][name] = {
            "mean": float(totals.mean()),
            "std": float(totals.std()),
        }
    for tier in ("mouse", "hare", "elephant"):
        name = f"accepted_{tier}"
        data = series(name)
        out["cumulative"][name] = {
            "mean": float(data.sum(axis=1).mean()),
            "std": float(data.sum(axis=1).std()),
        }
    return out


def compare_aggregates(base: dict, other: dict) -> dict:
    """Ratios of cumulative means (base over other), e.g. subsampled vs UPC."""
    if base["n_rounds"] != other["n_rounds"]:
        raise ValueError("cannot compare runs with different round counts")
    ratios = {}
    for name, stats in base["cumulative"].items():
        denom = other["cumulative"].get(name, {}).get("mean", 0.0)
        ratios[name] = stats["mean"] / denom if denom else math.inf
    return ratios
