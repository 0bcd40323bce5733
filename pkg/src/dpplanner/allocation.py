"""Per-round request selection over contested segments.

The residual problem after pruning is a 0/1 multidimensional knapsack with an
OR over RDP orders: each contested segment constrains the summed per-order
cost of the accepted requests demanding it, and the constraint is satisfied
as soon as one order stays within the segment's remaining budget.

Selection strategies: arrival order (FCFS), increasing dominant share per
weight (DPF), decreasing weight per normalised demand (DPK), and an exact
branch-and-bound.  All paths are re-verified post hoc against the segment
constraints.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .accounting import FILTER_ATOL, RdpVector
from .population import LedgerStore
from .segmentation import CellInterval, RequestRecord, Segment

__all__ = [
    "Problem",
    "ProblemRequest",
    "ProblemSegment",
    "Allocation",
    "ApplyResult",
    "PolicyRecord",
    "AllocationConflictError",
    "InfeasibleAllocationError",
    "build_problem",
    "allocate_fcfs",
    "allocate_dpf",
    "allocate_dpk",
    "solve_exact",
    "verify_allocation",
    "account_upc",
    "apply_allocation",
    "GeneralProblem",
    "GeneralRequest",
    "GeneralSegment",
    "solve_exact_general",
    "export_lp",
    "import_lp_solution",
]


class AllocationConflictError(RuntimeError):
    """The allocation no longer fits the ledgers it is being applied to."""


class InfeasibleAllocationError(RuntimeError):
    """Post-hoc verification found a contested segment without a witness order."""


@dataclass(frozen=True)
class ProblemRequest:
    request_id: int
    cost: np.ndarray
    weight: float
    arrival_time: float
    segment_idxs: tuple[int, ...]


@dataclass(frozen=True)
class ProblemSegment:
    segment_id: int
    budget: np.ndarray  # remaining floor per order
    members: frozenset


@dataclass(frozen=True)
class Problem:
    requests: tuple[ProblemRequest, ...]
    segments: tuple[ProblemSegment, ...]
    groups: tuple[int, ...]
    objective_mode: str = "utility"

    @property
    def n_orders(self) -> int:
        if self.segments:
            return len(self.segments[0].budget)
        if self.requests:
            return len(self.requests[0].cost)
        return 0


@dataclass(frozen=True)
class Allocation:
    accepted: frozenset
    objective_value: float
    admitting_orders: dict
    proved_optimal: bool = False


def build_problem(
    residual: Sequence[RequestRecord],
    contested: Sequence[Segment],
    mode: str,
    groups: Sequence[int],
) -> Problem:
    """Residual optimisation problem; weights follow the objective mode."""
    if mode not in ("utility", "request_count"):
        raise ValueError(f"unknown objective mode {mode!r}")
    residual_ids = {r.request_id for r in residual}
    segs = tuple(
        ProblemSegment(
            segment_id=seg.segment_id,
            budget=np.asarray(seg.floor.eps),
            members=frozenset(seg.signature & residual_ids),
        )
        for seg in contested
    )
    seg_idx_by_request: dict[int, list[int]] = {}
    for idx, seg in enumerate(segs):
        for rid in seg.members:
            seg_idx_by_request.setdefault(rid, []).append(idx)
    reqs = tuple(
        ProblemRequest(
            request_id=r.request_id,
            cost=np.asarray(r.cost.eps),
            weight=float(r.utility) if mode == "utility" else 1.0,
            arrival_time=r.arrival_time,
            segment_idxs=tuple(seg_idx_by_request.get(r.request_id, ())),
        )
        for r in residual
    )
    return Problem(requests=reqs, segments=segs, groups=tuple(groups), objective_mode=mode)


def _fits(sums: np.ndarray, cost: np.ndarray, budget: np.ndarray) -> bool:
    total = sums + cost
    return bool((np.isfinite(budget) & (total <= budget + FILTER_ATOL)).any())


def _admitting_orders(problem: Problem, sums: list[np.ndarray], accepted: set) -> dict:
    orders: dict = {}
    for i, seg in enumerate(problem.segments):
        if not (seg.members & accepted):
            continue  # no new charge; per-block filters remain authoritative
        ok = np.flatnonzero(np.isfinite(seg.budget) & (sums[i] <= seg.budget + FILTER_ATOL))
        orders[seg.segment_id] = int(ok[0]) if ok.size else None
    return orders


def _greedy(problem: Problem, ordered: Sequence[ProblemRequest]) -> Allocation:
    sums = [np.zeros(len(seg.budget)) for seg in problem.segments]
    accepted: set = set()
    objective = 0.0
    for req in ordered:
        if all(_fits(sums[si], req.cost, problem.segments[si].budget) for si in req.segment_idxs):
            for si in req.segment_idxs:
                sums[si] = sums[si] + req.cost
            accepted.add(req.request_id)
            objective += req.weight
    return Allocation(
        accepted=frozenset(accepted),
        objective_value=objective,
        admitting_orders=_admitting_orders(problem, sums, accepted),
    )


def allocate_fcfs(problem: Problem) -> Allocation:
    """Scan in arrival order, accept whatever still fits."""
    ordered = sorted(problem.requests, key=lambda r: (r.arrival_time, r.request_id))
    return _greedy(problem, ordered)


def _ratio(cost: np.ndarray, budget: np.ndarray) -> np.ndarray:
    # per-order demand share; infinite where the budget has no capacity
    out = np.full(cost.shape, np.inf)
    ok = np.isfinite(budget) & (budget > 0)
    out[ok] = cost[ok] / budget[ok]
    return out


def allocate_dpf(problem: Problem) -> Allocation:
    """Dominant-share order: min over orders of the worst segment share, per weight."""

    def key(req: ProblemRequest) -> tuple:
        if req.segment_idxs:
            worst = np.max(
                [_ratio(req.cost, problem.segments[si].budget) for si in req.segment_idxs],
                axis=0,
            )
            share = float(np.min(worst))
        else:
            share = 0.0
        k = share / req.weight if req.weight > 0 else math.inf
        return (k, req.arrival_time, req.request_id)

    return _greedy(problem, sorted(problem.requests, key=key))


def _dpk_key(problem: Problem, req: ProblemRequest) -> tuple:
    denom = 0.0
    for si in req.segment_idxs:
        denom += float(np.min(_ratio(req.cost, problem.segments[si].budget)))
    eff = req.weight / denom if denom > 0 else math.inf
    return (-eff, req.arrival_time, req.request_id)


def allocate_dpk(problem: Problem) -> Allocation:
    """Weight per normalised demand, largest first.

    A second greedy pass in plain weight order guards against lumpy
    high-weight requests that the density order starves; the better of the
    two passes is returned (ties keep the density pass).
    """
    by_density = _greedy(
        problem, sorted(problem.requests, key=lambda r: _dpk_key(problem, r))
    )
    by_weight = _greedy(
        problem,
        sorted(problem.requests, key=lambda r: (-r.weight, r.arrival_time, r.request_id)),
    )
    if by_weight.objective_value > by_density.objective_value:
        return by_weight
    return by_density


def solve_exact(problem: Problem, time_limit: float = 60.0) -> Allocation:
    """Branch-and-bound maximising total weight under the segment constraints.

    Depth-first over requests in normalised-demand order, seeded with the
    greedy incumbent; LP-free bound of current weight plus the sum of
    remaining weights.  Returns best-found with ``proved_optimal=False``
    when the time limit trips.
    """
    reqs = sorted(problem.requests, key=lambda r: _dpk_key(problem, r))
    if not reqs:
        return Allocation(frozenset(), 0.0, {}, proved_optimal=True)
    n = len(reqs)
    n_seg = len(problem.segments)
    n_ord = problem.n_orders

    suffix = np.zeros(n + 1)
    for i in range(n - 1, -1, -1):
        suffix[i] = suffix[i + 1] + reqs[i].weight

    budgets = (
        np.vstack([seg.budget for seg in problem.segments])
        if n_seg
        else np.zeros((0, n_ord))
    )
    budget_finite = np.isfinite(budgets)
    budget_slack = np.where(budget_finite, budgets + FILTER_ATOL, -np.inf)
    seg_idx = [np.asarray(r.segment_idxs, dtype=np.intp) for r in reqs]

    warm = allocate_dpk(problem)
    best_obj = warm.objective_value - 1e-15  # re-derive the set via the search
    best_set: tuple = tuple(sorted(warm.accepted))

    sums = np.zeros((n_seg, n_ord))
    chosen: list[int] = []
    deadline = time.monotonic() + time_limit
    state = {"timed_out": time.monotonic() >= deadline, "nodes": 0}

    def dfs(i: int, cur: float) -> None:
        nonlocal best_obj, best_set
        state["nodes"] += 1
        if state["timed_out"] or (
            (state["nodes"] & 0x3FF) == 0 and time.monotonic() > deadline
        ):
            state["timed_out"] = True
            return
        if cur > best_obj:
            best_obj = cur
            best_set = tuple(chosen)
        if i == n or cur + suffix[i] <= best_obj:
            return
        req = reqs[i]
        idxs = seg_idx[i]
        if idxs.size:
            totals = sums[idxs] + req.cost
            feasible = bool((totals <= budget_slack[idxs]).any(axis=1).all())
        else:
            feasible = True
        if feasible:
            if idxs.size:
                saved = sums[idxs].copy()
                sums[idxs] = totals
            chosen.append(req.request_id)
            dfs(i + 1, cur + req.weight)
            chosen.pop()
            if idxs.size:
                sums[idxs] = saved
        dfs(i + 1, cur)

    dfs(0, 0.0)

    accepted = frozenset(best_set)
    objective = sum(r.weight for r in reqs if r.request_id in accepted)
    final_sums = [np.zeros(n_ord) for _ in range(n_seg)]
    for req in reqs:
        if req.request_id in accepted:
            for si in req.segment_idxs:
                final_sums[si] = final_sums[si] + req.cost
    return Allocation(
        accepted=accepted,
        objective_value=objective,
        admitting_orders=_admitting_orders(problem, final_sums, set(accepted)),
        proved_optimal=not state["timed_out"],
    )


def verify_allocation(problem: Problem, accepted: Iterable[int]) -> dict:
    """Independent post-hoc check: every charged contested segment has a
    witnessing order.  Raises :class:`InfeasibleAllocationError` otherwise."""
    accepted = set(accepted)
    witnesses: dict = {}
    for seg in problem.segments:
        charged = seg.members & accepted
        if not charged:
            continue
        total = np.zeros(len(seg.budget))
        for req in problem.requests:
            if req.request_id in charged:
                total = total + req.cost
        ok = np.flatnonzero(np.isfinite(seg.budget) & (total <= seg.budget + FILTER_ATOL))
        if ok.size == 0:
            raise InfeasibleAllocationError(
                f"segment {seg.segment_id} has no admitting order"
            )
        witnesses[seg.segment_id] = int(ok[0])
    return witnesses


def account_upc(
    requests: Sequence[RequestRecord],
    store: LedgerStore,
    rng: np.random.Generator,
) -> tuple[list[RequestRecord], list[Segment]]:
    """User-parallel-composition baseline accounting.

    Each request charges its unamplified cost to ``round_half_up(f * K)``
    uniformly chosen active groups (all groups at f = 1), and attribute
    predicates are ignored in accounting, so every constraint is a whole
    group.  Returns the pinned request records plus one segment per active
    group, ready for the usual classify/prune/allocate pipeline.
    """
    active = [g.group_id for g in store.active_groups()]
    k = len(active)
    domain = store.schema.domain_size
    full = CellInterval(0, domain)
    pinned: list[RequestRecord] = []
    for r in requests:
        n = k if r.sample_fraction >= 1.0 else max(1, int(math.floor(r.sample_fraction * k + 0.5)))
        chosen = tuple(sorted(active[i] for i in rng.choice(k, size=n, replace=False)))
        pinned.append(replace(r, predicate=full, charged_groups=chosen))

    segments: list[Segment] = []
    for idx, gid in enumerate(active):
        sig = frozenset(r.request_id for r in pinned if gid in r.charged_groups)
        if not sig:
            continue
        unlocked = store.unlocked_arr(gid)
        rem = unlocked.copy()
        for (g, cell), consumed in store.touched_items():
            if g != gid:
                continue
            rem = np.minimum(rem, unlocked - consumed)
        floor = RdpVector(store.grid, rem)
        segments.append(
            Segment(
                segment_id=idx,
                signature=sig,
                runs=((0, domain),),
                cell_count=domain,
                per_group_remaining={gid: floor},
                floor=floor,
            )
        )
    return pinned, segments


@dataclass(frozen=True)
class PolicyRecord:
    """Access-policy document for one accepted request."""

    policy_id: int
    round_index: int
    application_id: int
    group_ids: tuple[int, ...]
    predicate: CellInterval | frozenset
    granted: RdpVector
    delta_reference: float
    sample_fraction: float
    mechanism: str = ""
    tier: str = ""


@dataclass(frozen=True)
class ApplyResult:
    charges: dict  # (group_id, cell) -> np.ndarray
    policies: tuple[PolicyRecord, ...]


def apply_allocation(
    accepted: Sequence[RequestRecord],
    store: LedgerStore,
    round_index: int,
    policy_id_start: int = 0,
    delta_reference: float = 0.0,
) -> ApplyResult:
    """Charge every block demanded by the accepted requests, atomically.

    All per-block round totals are filter-checked against the current ledgers
    before anything commits; a stale allocation raises
    :class:`AllocationConflictError` and leaves the store untouched.
    """
    domain = store.schema.domain_size
    active = [g.group_id for g in store.active_groups()]
    grid = store.grid
    n_orders = len(grid)

    totals: dict[int, np.ndarray] = {}
    for r in accepted:
        groups = r.charged_groups if r.charged_groups is not None else active
        cost = np.asarray(r.cost.eps)
        runs = (
            r.predicate.runs(domain)
            if isinstance(r.predicate, CellInterval)
            else [(c, 1) for c in sorted(r.predicate)]
        )
        for gid in groups:
            arr = totals.get(gid)
            if arr is None:
                arr = np.zeros((domain, n_orders))
                totals[gid] = arr
            for start, length in runs:
                arr[start : start + length] += cost

    staged = []
    charges: dict[tuple[int, int], np.ndarray] = {}
    for gid, arr in totals.items():
        cells = np.flatnonzero(arr.any(axis=1))
        if cells.size == 0:
            continue
        charge_rows = arr[cells]
        new_totals, ok = store.bulk_admit(gid, cells, charge_rows)
        if not ok.all():
            bad = int(cells[np.flatnonzero(~ok)[0]])
            raise AllocationConflictError(
                f"allocation no longer fits block ({gid}, {bad})"
            )
        staged.append((gid, cells, charge_rows, new_totals))
        for i, cell in enumerate(cells):
            charges[(gid, int(cell))] = charge_rows[i]
    for gid, cells, charge_rows, new_totals in staged:
        store.bulk_commit(gid, cells, charge_rows, new_totals)

    policies = []
    next_id = policy_id_start
    for r in sorted(accepted, key=lambda x: x.request_id):
        groups = r.charged_groups if r.charged_groups is not None else tuple(active)
        policies.append(
            PolicyRecord(
                policy_id=next_id,
                round_index=round_index,
                application_id=r.request_id,
                group_ids=tuple(groups),
                predicate=r.predicate,
                granted=r.cost,
                delta_reference=delta_reference,
                sample_fraction=r.sample_fraction,
                mechanism=r.mechanism,
                tier=r.tier,
            )
        )
        next_id += 1
    return ApplyResult(charges=charges, policies=tuple(policies))


# --- general form: per-group budgets, partial group demands -----------------


@dataclass(frozen=True)
class GeneralRequest:
    request_id: int
    cost: np.ndarray
    weight: float
    arrival_time: float
    groups_required: int  # D_i; the subsampling configuration uses |N|
    segment_idxs: tuple[int, ...]


@dataclass(frozen=True)
class GeneralSegment:
    segment_id: int
    budgets: dict  # group_id -> np.ndarray
    members: frozenset


@dataclass(frozen=True)
class GeneralProblem:
    requests: tuple[GeneralRequest, ...]
    segments: tuple[GeneralSegment, ...]
    groups: tuple[int, ...]


def solve_exact_general(problem: GeneralProblem, time_limit: float = 60.0):
    """Exact solver for the general form with group-assignment variables.

    A request needs ``groups_required`` of the active groups; a segment's
    budget constraint must hold at one common order across all its groups.
    Returns ``(accepted ids, {id: assigned groups}, objective, proved)``.
    """
    from itertools import combinations

    groups = problem.groups
    reqs = sorted(
        problem.requests,
        key=lambda r: (-(r.weight), r.arrival_time, r.request_id),
    )
    n = len(reqs)
    suffix = np.zeros(n + 1)
    for i in range(n - 1, -1, -1):
        suffix[i] = suffix[i + 1] + reqs[i].weight

    sums = {
        (si, g): np.zeros_like(next(iter(seg.budgets.values())))
        for si, seg in enumerate(problem.segments)
        for g in groups
    }

    def segment_alive(si: int) -> bool:
        seg = problem.segments[si]
        n_ord = len(next(iter(seg.budgets.values())))
        ok = np.ones(n_ord, dtype=bool)
        for g in groups:
            budget = seg.budgets.get(g)
            if budget is None:
                continue
            ok &= np.isfinite(budget) & (sums[(si, g)] <= budget + FILTER_ATOL)
        return bool(ok.any())

    best = {"obj": -1.0, "set": (), "assign": {}}
    deadline = time.monotonic() + time_limit
    state = {"timed_out": False}
    chosen: list[tuple[int, tuple[int, ...]]] = []

    def dfs(i: int, cur: float) -> None:
        if state["timed_out"] or time.monotonic() > deadline:
            state["timed_out"] = True
            return
        if cur > best["obj"]:
            best["obj"] = cur
            best["set"] = tuple(rid for rid, _ in chosen)
            best["assign"] = {rid: gs for rid, gs in chosen}
        if i == n or cur + suffix[i] <= best["obj"]:
            return
        req = reqs[i]
        for combo in combinations(groups, req.groups_required):
            saved = []
            for si in req.segment_idxs:
                for g in combo:
                    key = (si, g)
                    saved.append((key, sums[key]))
                    sums[key] = sums[key] + req.cost
            if all(segment_alive(si) for si in req.segment_idxs):
                chosen.append((req.request_id, combo))
                dfs(i + 1, cur + req.weight)
                chosen.pop()
            for key, old in saved:
                sums[key] = old
        dfs(i + 1, cur)

    dfs(0, 0.0)
    return (
        frozenset(best["set"]),
        dict(best["assign"]),
        max(best["obj"], 0.0),
        not state["timed_out"],
    )


# --- external solver bridge (disabled by default; text round-trip only) -----


def export_lp(problem: Problem, path) -> None:
    """Write the collapsed problem in CPLEX LP text format.

    One budget row per (segment, finite order) with an indicator binary that
    waives the row entirely; a cardinality row keeps at least one order
    active per segment.
    """
    lines = ["\\ dpplanner problem export schema=dpplanner-lp/1", "Maximize"]
    obj = " + ".join(
        f"{req.weight:.12g} y_{req.request_id}" for req in problem.requests
    )
    lines.append(f" obj: {obj if obj else '0 y_dummy'}")
    lines.append("Subject To")
    binaries = [f"y_{req.request_id}" for req in problem.requests]
    for si, seg in enumerate(problem.segments):
        finite = np.flatnonzero(np.isfinite(seg.budget))
        members = [r for r in problem.requests if si in r.segment_idxs]
        zs = []
        for a in finite:
            budget = float(seg.budget[a])
            total = sum(float(r.cost[a]) for r in members)
            big_m = total - min(0.0, budget)
            terms = " + ".join(
                f"{float(r.cost[a]):.12g} y_{r.request_id}" for r in members
            )
            if not terms:
                continue
            z = f"z_{seg.segment_id}_{a}"
            zs.append(z)
            lines.append(f" seg_{seg.segment_id}_{a}: {terms} - {big_m:.12g} {z} <= {budget:.12g}")
        if zs:
            lines.append(
                f" card_{seg.segment_id}: " + " + ".join(zs) + f" <= {len(zs) - 1}"
            )
            binaries.extend(zs)
    lines.append("Binary")
    lines.append(" " + " ".join(binaries))
    lines.append("End")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def import_lp_solution(problem: Problem, path) -> Allocation:
    """Read a ``name value`` solution file and rebuild a verified allocation."""
    values: dict[str, float] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, _, value = line.partition(" ")
            values[name] = float(value)
    accepted = frozenset(
        req.request_id
        for req in problem.requests
        if values.get(f"y_{req.request_id}", 0.0) > 0.5
    )
    witnesses = verify_allocation(problem, accepted)
    objective = sum(req.weight for req in problem.requests if req.request_id in accepted)
    return Allocation(accepted, objective, witnesses, proved_optimal=False)
