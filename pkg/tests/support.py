"""Shared oracles and instance generators for the test suite.

Everything here is deliberately independent of the production code paths it
checks: brute-force subset enumeration, Monte-Carlo Renyi divergence, numeric
quadrature, and a one-block-per-group window simulator driven only by the
population module's public operations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from dpplanner.accounting import FILTER_ATOL, AlphaGrid, RdpVector
from dpplanner.allocation import Problem, ProblemRequest, ProblemSegment
from dpplanner.population import (
    AttributeSchema,
    BlockLedger,
    GroupState,
    LedgerStore,
    RotationState,
    UnlockPolicy,
    advance_round,
    available_budget,
    consume,
    unlocked_budget,
    window_available,
)
from dpplanner.segmentation import CellInterval, RequestRecord


# --- independent numeric oracles --------------------------------------------


def renyi_divergence_gaussians(sigma: float, alpha: float) -> float:
    """D_alpha(N(0, s^2) || N(1, s^2)) by quadrature, in log space."""

    def integrand(x: float) -> float:
        lp = -x * x / (2 * sigma**2)
        lq = -((x - 1.0) ** 2) / (2 * sigma**2)
        return math.exp(alpha * lp + (1 - alpha) * lq - 0.5 * math.log(2 * math.pi * sigma**2))

    val, _ = integrate.quad(integrand, -40 * sigma, 40 * sigma + 1, limit=500)
    return math.log(val) / (alpha - 1)


def mc_renyi_alpha2(sigma: float, gamma: float, n: int = 1_000_000, seed: int = 7) -> float:
    """Monte-Carlo D_2 between the Poisson-subsampled mixture and the base
    Gaussian: sample from the mixture, average the density ratio."""
    rng = np.random.default_rng(seed)
    shifted = rng.random(n) < gamma
    x = rng.normal(0.0, sigma, n) + shifted.astype(float)
    ratio = (1.0 - gamma) + gamma * np.exp((2.0 * x - 1.0) / (2.0 * sigma**2))
    return float(np.log(ratio.mean()))


# --- brute-force allocation oracle -------------------------------------------


def brute_force_optimum(problem: Problem) -> tuple[float, frozenset]:
    """Exhaustive subset enumeration over the collapsed problem."""
    n = len(problem.requests)
    if n == 0:
        return 0.0, frozenset()
    if n > 22:
        raise ValueError("instance too large for enumeration")
    masks = np.arange(2**n, dtype=np.int64)
    accept = ((masks[:, None] >> np.arange(n)) & 1).astype(float)
    feasible = np.ones(2**n, dtype=bool)
    for si, seg in enumerate(problem.segments):
        member = np.array(
            [1.0 if si in r.segment_idxs else 0.0 for r in problem.requests]
        )
        costs = np.vstack([r.cost for r in problem.requests]) * member[:, None]
        sums = accept @ costs
        ok = (np.isfinite(seg.budget) & (sums <= seg.budget + FILTER_ATOL)).any(axis=1)
        feasible &= ok
    weights = np.array([r.weight for r in problem.requests])
    objectives = accept @ weights
    objectives[~feasible] = -np.inf
    best = int(np.argmax(objectives))
    chosen = frozenset(
        problem.requests[i].request_id for i in range(n) if (best >> i) & 1
    )
    return float(objectives[best]), chosen


def random_problem(
    rng: np.random.Generator,
    max_requests: int = 12,
    max_segments: int = 6,
    max_orders: int = 4,
) -> Problem:
    """Random collapsed instance with integer weights (exact objectives)."""
    n_req = int(rng.integers(2, max_requests + 1))
    n_seg = int(rng.integers(1, max_segments + 1))
    n_ord = int(rng.integers(1, max_orders + 1))
    budgets = rng.uniform(0.2, 1.2, size=(n_seg, n_ord))
    segments = []
    membership: list[set] = [set() for _ in range(n_seg)]
    requests = []
    for i in range(n_req):
        k = int(rng.integers(1, n_seg + 1))
        segs = sorted(rng.choice(n_seg, size=k, replace=False).tolist())
        for si in segs:
            membership[si].add(i)
        requests.append(
            ProblemRequest(
                request_id=i,
                cost=rng.uniform(0.02, 0.7, size=n_ord),
                weight=float(rng.integers(1, 11)),
                arrival_time=float(i),
                segment_idxs=tuple(segs),
            )
        )
    for si in range(n_seg):
        segments.append(
            ProblemSegment(
                segment_id=si, budget=budgets[si], members=frozenset(membership[si])
            )
        )
    return Problem(
        requests=tuple(requests), segments=tuple(segments), groups=(0,),
        objective_mode="utility",
    )


# --- per-cell planning instances ---------------------------------------------


@dataclass
class CellInstance:
    store: LedgerStore
    records: list
    grid: AlphaGrid
    group_levels: dict  # group_id -> unlocked array


def random_cell_instance(
    rng: np.random.Generator,
    max_requests: int = 10,
    max_cells: int = 64,
    max_groups: int = 3,
) -> CellInstance:
    """Fresh-ledger planning instance over a small cell domain.

    Blocks carry no history, so every group's remaining budget is a scalar
    multiple of the per-order budget vector (the window's unlock levels),
    which keeps per-cell and per-segment formulations exactly equivalent.
    """
    n_ord = int(rng.integers(1, 5))
    domain = int(rng.integers(4, max_cells + 1))
    n_groups = int(rng.integers(1, max_groups + 1))
    n_req = int(rng.integers(2, max_requests + 1))
    orders = tuple(np.cumsum(rng.uniform(0.5, 3.0, size=n_ord)) + 1.5)
    grid = AlphaGrid(orders)
    total = RdpVector(grid, rng.uniform(0.4, 1.4, size=n_ord))
    window_k = 4
    policy = UnlockPolicy(float(rng.uniform(0, 1)), total, window_k)
    ages = rng.integers(1, window_k + 1, size=n_groups)
    state = RotationState(
        round_index=0,
        active=tuple(
            GroupState(group_id=g, rounds_active=int(ages[g])) for g in range(n_groups)
        ),
    )
    store = LedgerStore(policy, AttributeSchema(domain), state)
    records = []
    for i in range(n_req):
        if rng.random() < 0.7:
            predicate: CellInterval | frozenset = CellInterval(
                start=int(rng.integers(domain)),
                length=int(rng.integers(1, domain + 1)),
            )
        else:
            k = int(rng.integers(1, domain // 2 + 2))
            predicate = frozenset(
                int(c) for c in rng.choice(domain, size=k, replace=False)
            )
        records.append(
            RequestRecord(
                request_id=i,
                predicate=predicate,
                sample_fraction=1.0,
                cost=RdpVector(grid, rng.uniform(0.02, 0.6, size=n_ord)),
                weight=1,
                utility=float(rng.integers(1, 11)),
                arrival_time=float(i),
            )
        )
    levels = {g.group_id: store.unlocked_arr(g.group_id) for g in state.active}
    return CellInstance(store=store, records=records, grid=grid, group_levels=levels)


def per_cell_optimum(instance: CellInstance) -> float:
    """Exhaustive optimum with one OR-constraint per (cell, group) block."""
    records = instance.records
    domain = instance.store.schema.domain_size
    n = len(records)
    masks = np.arange(2**n, dtype=np.int64)
    accept = ((masks[:, None] >> np.arange(n)) & 1).astype(float)
    n_ord = len(instance.grid)
    cover = np.zeros((n, domain))
    for i, r in enumerate(records):
        for cell in r.predicate_cells(domain):
            cover[i, cell] = 1.0
    demanded = np.flatnonzero(cover.any(axis=0))
    costs = np.vstack([r.cost.eps for r in records])
    feasible = np.ones(2**n, dtype=bool)
    for gid, unlocked in instance.group_levels.items():
        ok = np.zeros((2**n, len(demanded)), dtype=bool)
        for a in range(n_ord):
            if not np.isfinite(unlocked[a]):
                continue
            per_cell = accept @ (cover[:, demanded] * costs[:, a : a + 1])
            ok |= per_cell <= unlocked[a] + FILTER_ATOL
        feasible &= ok.all(axis=1)
    weights = np.array([r.utility for r in records])
    objectives = accept @ weights
    objectives[~feasible] = -np.inf
    return float(objectives.max())


# --- window simulator for unlocking properties --------------------------------


class WindowSim:
    """One block per active group; every charge hits the whole window.

    Drives only the population module's public operations so the property
    checks stay independent of the planner pipeline.
    """

    def __init__(self, window_k: int, delta_slack: float, epsilon: float = 3.0,
                 grid: AlphaGrid | None = None, budget: RdpVector | None = None):
        self.grid = grid or AlphaGrid((2.0,))
        if budget is None:
            budget = RdpVector(self.grid, np.full(len(self.grid), epsilon))
        self.policy = UnlockPolicy(delta_slack, budget, window_k)
        self.state = RotationState.bootstrap(window_k)
        self.ledgers: dict[int, BlockLedger] = {
            g.group_id: BlockLedger.fresh(g.group_id, 0, g.rounds_active, self.grid)
            for g in self.state.active
        }
        self.retired: list[BlockLedger] = []
        self.charges: list[RdpVector] = []

    def refreshed(self) -> list[BlockLedger]:
        ages = self.state.ages()
        out = []
        for gid, ledger in self.ledgers.items():
            out.append(
                BlockLedger(
                    group_id=gid,
                    attribute_cell=0,
                    rounds_active=ages[gid],
                    consumed=ledger.consumed,
                    history=ledger.history,
                )
            )
        return out

    def advance(self) -> None:
        oldest = self.state.active[0].group_id
        self.retired.append(self.ledgers.pop(oldest))
        self.state = advance_round(self.state)
        newest = self.state.active[-1]
        self.ledgers[newest.group_id] = BlockLedger.fresh(
            newest.group_id, 0, 1, self.grid
        )

    def window_avail(self) -> RdpVector:
        return window_available(self.refreshed(), self.policy)

    def charge(self, value: float | np.ndarray) -> None:
        vec = RdpVector(self.grid, np.broadcast_to(np.asarray(value, dtype=float), (len(self.grid),)))
        for ledger in self.refreshed():
            self.ledgers[ledger.group_id] = consume(ledger, vec, self.policy)
        self.charges.append(vec)

    def all_time_ledgers(self) -> list[BlockLedger]:
        return self.retired + list(self.ledgers.values())
