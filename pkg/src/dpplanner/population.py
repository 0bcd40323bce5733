"""Group rotation, budget unlocking, and per-block consumption ledgers.

Users are partitioned into groups that rotate through a sliding window of K
active groups; each (group, attribute-cell) pair is a *block* with its own
privacy filter.  A block's budget unlocks over its group's K active rounds,
front-loaded by a slack factor: rounds 1..K/2 release ``(1+D) eps/K`` each,
rounds K/2+1..K release ``(1-D) eps/K`` each, summing to the full budget.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Iterator

import numpy as np

from .accounting import (
    FILTER_ATOL,
    AlphaGrid,
    ParameterError,
    RdpVector,
    filter_admits,
)

__all__ = [
    "AttributeSchema",
    "RotationConfig",
    "UnlockPolicy",
    "BlockLedger",
    "GroupState",
    "RotationState",
    "BudgetExceededError",
    "assign_group",
    "advance_round",
    "unlocked_budget",
    "available_budget",
    "window_available",
    "consume",
    "LedgerStore",
]


class BudgetExceededError(RuntimeError):
    """A charge was refused by the block's privacy filter."""


@dataclass(frozen=True)
class AttributeSchema:
    """Flattened partitioning-attribute domain (multi-attribute schemas are
    flattened to a single axis)."""

    domain_size: int

    def __post_init__(self) -> None:
        if self.domain_size < 1:
            raise ParameterError("domain_size must be >= 1")


@dataclass(frozen=True)
class RotationConfig:
    """Sliding-window size K (even) and the user-assignment horizon T >= K."""

    window_k: int
    assignment_horizon_t: int

    def __post_init__(self) -> None:
        if self.window_k < 2 or self.window_k % 2 != 0:
            raise ParameterError("window_k must be a positive even integer")
        if self.assignment_horizon_t < self.window_k:
            raise ParameterError("assignment_horizon_t must be >= window_k")


@dataclass(frozen=True)
class UnlockPolicy:
    """Slack factor, per-order total budget, and the window size it unlocks over."""

    delta_slack: float
    total_budget: RdpVector
    window_k: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.delta_slack <= 1.0:
            raise ParameterError("delta_slack must be in [0, 1]")
        if self.window_k < 2 or self.window_k % 2 != 0:
            raise ParameterError("window_k must be a positive even integer")


def assign_group(arrival_round: int, horizon_t: int, rng: np.random.Generator) -> int:
    """Uniform draw over the T groups activating after the arrival round."""
    if horizon_t < 1:
        raise ParameterError("horizon_t must be >= 1")
    return arrival_round + 1 + int(rng.integers(horizon_t))


def unlocked_budget(k: int, policy: UnlockPolicy) -> RdpVector:
    """Cumulative budget unlocked after a group's k-th active round.

    Per order: ``(eps/K) * (k + D*min(k, K/2) - D*max(0, k - K/2))``;
    nondecreasing in k; exactly the full budget at k = K.
    """
    kk = policy.window_k
    if not 1 <= k <= kk:
        raise ParameterError(f"round index {k} outside [1, {kk}]")
    if k == kk:
        return policy.total_budget
    half = kk // 2
    factor = k + policy.delta_slack * min(k, half) - policy.delta_slack * max(0, k - half)
    return RdpVector(policy.total_budget.grid, policy.total_budget.eps * (factor / kk))


@dataclass(frozen=True)
class BlockLedger:
    """Consumption record of one (group, attribute-cell) block.

    ``history`` holds (round_index, charge) events; ``consumed`` is their
    element-wise sum.
    """

    group_id: int
    attribute_cell: int
    rounds_active: int
    consumed: RdpVector
    history: tuple[tuple[int, RdpVector], ...] = ()

    @classmethod
    def fresh(cls, group_id: int, cell: int, rounds_active: int, grid: AlphaGrid) -> "BlockLedger":
        return cls(group_id, cell, rounds_active, RdpVector.zero(grid))


def available_budget(ledger: BlockLedger, policy: UnlockPolicy) -> RdpVector:
    """Unlocked-minus-consumed, per order (negative at inactive orders is fine)."""
    unlocked = unlocked_budget(ledger.rounds_active, policy)
    return RdpVector(unlocked.grid, unlocked.eps - ledger.consumed.eps)


def window_available(ledgers: Iterable[BlockLedger], policy: UnlockPolicy) -> RdpVector:
    """Element-wise minimum of available budget across a window of blocks.

    This is what a request charging every block in the window can spend; under
    the balanced-history premise (every past round charged at least ``(1-D) eps/K``)
    it equals ``min(eps - sum of last K-1 charges, (1+D) eps/K)`` per order.
    """
    avail = None
    grid = policy.total_budget.grid
    for ledger in ledgers:
        vec = available_budget(ledger, policy).eps
        avail = vec if avail is None else np.minimum(avail, vec)
    if avail is None:
        raise ParameterError("window_available needs at least one ledger")
    return RdpVector(grid, avail)


def consume(
    ledger: BlockLedger,
    charge: RdpVector,
    policy: UnlockPolicy,
    round_index: int | None = None,
) -> BlockLedger:
    """Charge a block after its privacy filter admits the charge.

    ``round_index`` tags the history event; defaults to the group's age.
    """
    unlocked = unlocked_budget(ledger.rounds_active, policy)
    if not filter_admits(ledger.consumed, charge, unlocked):
        raise BudgetExceededError(
            f"charge refused on block ({ledger.group_id}, {ledger.attribute_cell})"
        )
    tag = ledger.rounds_active if round_index is None else round_index
    return _consume_unchecked(ledger, charge, tag)


def _consume_unchecked(ledger: BlockLedger, charge: RdpVector, round_index: int) -> BlockLedger:
    return replace(
        ledger,
        consumed=ledger.consumed + charge,
        history=ledger.history + ((round_index, charge),),
    )


@dataclass(frozen=True)
class GroupState:
    group_id: int
    rounds_active: int
    population: int = 0


@dataclass(frozen=True)
class RotationState:
    """Active window (oldest first) plus the retired-group residual pool."""

    round_index: int
    active: tuple[GroupState, ...]
    retired: tuple[int, ...] = ()

    @classmethod
    def bootstrap(cls, window_k: int, start_round: int = 0) -> "RotationState":
        # Staggered fresh start: group ids count up to start_round, ages K..1.
        groups = tuple(
            GroupState(group_id=start_round - window_k + 1 + i, rounds_active=window_k - i)
            for i in range(window_k)
        )
        return cls(round_index=start_round, active=groups)

    def ages(self) -> dict[int, int]:
        return {g.group_id: g.rounds_active for g in self.active}


def advance_round(state: RotationState) -> RotationState:
    """Retire the longest-active group, age the survivors, activate a new one."""
    oldest, *rest = state.active
    new_round = state.round_index + 1
    survivors = tuple(replace(g, rounds_active=g.rounds_active + 1) for g in rest)
    newcomer = GroupState(group_id=new_round, rounds_active=1)
    return RotationState(
        round_index=new_round,
        active=survivors + (newcomer,),
        retired=state.retired + (oldest.group_id,),
    )


class _BlockState:
    """Raw mutable state behind one block; kept off the dataclass hot path."""

    __slots__ = ("consumed", "history")

    def __init__(self, n_orders: int):
        self.consumed = np.zeros(n_orders)
        self.history: list[tuple[int, np.ndarray]] = []


class LedgerStore:
    """Lazy single-writer container of block ledgers for one simulation.

    Blocks materialise on first touch; untouched cells are implicitly at zero
    consumption.  Retired groups' ledgers stay recorded for the audit trail
    (first-come residual pool, never re-planned).
    """

    def __init__(self, policy: UnlockPolicy, schema: AttributeSchema, state: RotationState):
        self.policy = policy
        self.schema = schema
        self.state = state
        self._blocks: dict[tuple[int, int], _BlockState] = {}
        self._unlocked_cache: dict[int, np.ndarray] = {}

    @property
    def grid(self) -> AlphaGrid:
        return self.policy.total_budget.grid

    @property
    def blocks(self) -> dict:
        """Materialised :class:`BlockLedger` view of every touched block."""
        ages = self.state.ages()
        grid = self.grid
        out = {}
        for (gid, cell), st in self._blocks.items():
            out[(gid, cell)] = BlockLedger(
                group_id=gid,
                attribute_cell=cell,
                rounds_active=ages.get(gid, self.policy.window_k),
                consumed=RdpVector(grid, st.consumed),
                history=tuple((rnd, RdpVector(grid, vec)) for rnd, vec in st.history),
            )
        return out

    def active_groups(self) -> tuple[GroupState, ...]:
        return self.state.active

    def advance(self) -> None:
        self.state = advance_round(self.state)
        self._unlocked_cache.clear()

    def _age(self, group_id: int) -> int:
        for g in self.state.active:
            if g.group_id == group_id:
                return g.rounds_active
        raise ParameterError(f"group {group_id} is not active")

    def ledger(self, group_id: int, cell: int) -> BlockLedger:
        """Block ledger with rounds_active refreshed to the group's age."""
        age = self._age(group_id)
        st = self._blocks.get((group_id, cell))
        if st is None:
            return BlockLedger.fresh(group_id, cell, age, self.grid)
        return BlockLedger(
            group_id=group_id,
            attribute_cell=cell,
            rounds_active=age,
            consumed=RdpVector(self.grid, st.consumed),
            history=tuple((rnd, RdpVector(self.grid, vec)) for rnd, vec in st.history),
        )

    def unlocked(self, group_id: int) -> RdpVector:
        return RdpVector(self.grid, self.unlocked_arr(group_id))

    def unlocked_arr(self, group_id: int) -> np.ndarray:
        cached = self._unlocked_cache.get(group_id)
        if cached is None:
            cached = unlocked_budget(self._age(group_id), self.policy).eps
            self._unlocked_cache[group_id] = cached
        return cached

    def remaining(self, group_id: int, cell: int) -> np.ndarray:
        unlocked = self.unlocked_arr(group_id)
        st = self._blocks.get((group_id, cell))
        if st is None:
            return unlocked
        return unlocked - st.consumed

    def _admits_arr(self, group_id: int, cell: int, charge: np.ndarray) -> bool:
        unlocked = self.unlocked_arr(group_id)
        st = self._blocks.get((group_id, cell))
        total = charge if st is None else st.consumed + charge
        ok = np.isfinite(unlocked) & (total <= unlocked + FILTER_ATOL)
        return bool(ok.any())

    def admits(self, group_id: int, cell: int, charge: RdpVector) -> bool:
        return self._admits_arr(group_id, cell, np.asarray(charge.eps))

    def charge_block(self, group_id: int, cell: int, charge: RdpVector) -> None:
        self.charge_block_arr(group_id, cell, np.array(charge.eps))

    def charge_block_arr(self, group_id: int, cell: int, charge: np.ndarray) -> None:
        """Raw-array charge path; ``charge`` must not be mutated afterwards."""
        if not self._admits_arr(group_id, cell, charge):
            raise BudgetExceededError(f"charge refused on block ({group_id}, {cell})")
        st = self._blocks.get((group_id, cell))
        if st is None:
            st = _BlockState(len(self.grid))
            self._blocks[(group_id, cell)] = st
        st.consumed = st.consumed + charge
        st.history.append((self.state.round_index, charge))

    def bulk_admit(
        self, group_id: int, cells: np.ndarray, charges: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised filter check for many cells of one group.

        Returns (totals, ok) where ``totals`` is consumed-plus-charge per cell
        and ``ok`` flags cells whose charge is admitted at some order.
        """
        unlocked = self.unlocked_arr(group_id)
        consumed = np.zeros((len(cells), len(self.grid)))
        for i, cell in enumerate(cells):
            st = self._blocks.get((group_id, int(cell)))
            if st is not None:
                consumed[i] = st.consumed
        totals = consumed + charges
        ok = (np.isfinite(unlocked) & (totals <= unlocked + FILTER_ATOL)).any(axis=1)
        return totals, ok

    def bulk_commit(
        self, group_id: int, cells: np.ndarray, charges: np.ndarray, totals: np.ndarray
    ) -> None:
        """Commit charges previously vetted by :meth:`bulk_admit`."""
        round_index = self.state.round_index
        n_orders = len(self.grid)
        for i, cell in enumerate(cells):
            key = (group_id, int(cell))
            st = self._blocks.get(key)
            if st is None:
                st = _BlockState(n_orders)
                self._blocks[key] = st
            st.consumed = totals[i].copy()
            st.history.append((round_index, charges[i].copy()))

    def consumed_arrays(self) -> Iterator[np.ndarray]:
        for st in self._blocks.values():
            yield st.consumed

    def touched_items(self) -> Iterator[tuple[tuple[int, int], np.ndarray]]:
        """(block key, consumed array) pairs without dataclass materialisation."""
        for key, st in self._blocks.items():
            yield key, st.consumed

    def all_ledgers(self) -> Iterator[BlockLedger]:
        return iter(self.blocks.values())
