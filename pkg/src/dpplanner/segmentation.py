"""Consolidate blocks into segments and shrink the allocation problem.

Cells demanded by an identical set of requests behave identically under any
allocation, so they collapse into one *segment* whose budget is the
element-wise minimum of its member blocks' remaining budgets.  Segments whose
combined demand cannot fit at any order are *contested*; everything else can
be decided without optimisation (auto-accept / auto-reject).
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .accounting import RdpVector, filter_admits
from .population import LedgerStore

__all__ = [
    "CellInterval",
    "RequestRecord",
    "Segment",
    "PruneResult",
    "compute_segments",
    "classify_contested",
    "prune",
]


@dataclass(frozen=True)
class CellInterval:
    """Circular [start, start+length) selection over the flattened domain."""

    start: int
    length: int

    def __post_init__(self) -> None:
        if self.length < 1:
            raise ValueError("interval length must be >= 1")
        if self.start < 0:
            raise ValueError("interval start must be >= 0")

    def covers(self, cell: int, domain: int) -> bool:
        if self.length >= domain:
            return True
        return (cell - self.start) % domain < self.length

    def runs(self, domain: int) -> tuple[tuple[int, int], ...]:
        """Non-wrapping (start, length) runs covering the interval."""
        if self.length >= domain:
            return ((0, domain),)
        start = self.start % domain
        end = start + self.length
        if end <= domain:
            return ((start, self.length),)
        return ((start, domain - start), (0, end - domain))

    def cells(self, domain: int) -> Iterable[int]:
        for start, length in self.runs(domain):
            yield from range(start, start + length)


Predicate = CellInterval | frozenset


@dataclass(frozen=True)
class RequestRecord:
    """Planner-side view of one privacy-resource request."""

    request_id: int
    predicate: Predicate
    sample_fraction: float
    cost: RdpVector
    weight: int = 1
    utility: float = 0.0
    arrival_time: float = 0.0
    tier: str = ""
    mechanism: str = ""
    # UPC baseline pins the charged groups; None charges every active group.
    charged_groups: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if isinstance(self.predicate, frozenset) and not self.predicate:
            raise ValueError("predicate must select at least one cell")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must be in (0, 1]")

    def covers(self, cell: int, domain: int) -> bool:
        if isinstance(self.predicate, CellInterval):
            return self.predicate.covers(cell, domain)
        return cell in self.predicate

    def predicate_cells(self, domain: int) -> Iterable[int]:
        if isinstance(self.predicate, CellInterval):
            return self.predicate.cells(domain)
        return sorted(self.predicate)


@dataclass(frozen=True, eq=False)
class Segment:
    """Maximal cell set demanded by one identical set of requests."""

    segment_id: int
    signature: frozenset
    runs: tuple[tuple[int, int], ...]
    cell_count: int
    per_group_remaining: dict
    floor: RdpVector  # element-wise min over member cells and groups

    def contains(self, cell: int) -> bool:
        idx = bisect.bisect_right(self._starts(), cell) - 1
        if idx < 0:
            return False
        start, length = self.runs[idx]
        return start <= cell < start + length

    def _starts(self) -> list[int]:
        return [s for s, _ in self.runs]

    def cells(self) -> Iterable[int]:
        for start, length in self.runs:
            yield from range(start, start + length)


def _arc_segments(requests: Sequence[RequestRecord], domain: int) -> list[tuple[frozenset, list[tuple[int, int]]]]:
    # Interval fast path: the <= 2R interval endpoints partition the circle
    # into arcs of constant signature; no scan over the full domain.
    cuts: set[int] = set()
    for r in requests:
        iv = r.predicate
        assert isinstance(iv, CellInterval)
        if iv.length >= domain:
            continue
        cuts.add(iv.start % domain)
        cuts.add((iv.start + iv.length) % domain)
    boundaries = sorted(cuts) if cuts else [0]
    arcs: list[tuple[int, int]] = []
    for i, start in enumerate(boundaries):
        end = boundaries[(i + 1) % len(boundaries)]
        length = (end - start) % domain
        if length == 0:
            length = domain
        arcs.append((start, length))
    grouped: dict[frozenset, list[tuple[int, int]]] = {}
    for start, length in arcs:
        sig = frozenset(
            r.request_id for r in requests if r.covers(start, domain)
        )
        if not sig:
            continue
        # split wrapping arcs into plain runs
        end = start + length
        runs = [(start, length)] if end <= domain else [
            (start, domain - start), (0, end - domain)
        ]
        grouped.setdefault(sig, []).extend(runs)
    return [(sig, sorted(runs)) for sig, runs in grouped.items()]


def _cell_segments(requests: Sequence[RequestRecord], domain: int) -> list[tuple[frozenset, list[tuple[int, int]]]]:
    # General path: group every demanded cell by its demanding-request set.
    by_cell: dict[int, set[int]] = {}
    for r in requests:
        for cell in r.predicate_cells(domain):
            by_cell.setdefault(cell % domain, set()).add(r.request_id)
    grouped: dict[frozenset, list[int]] = {}
    for cell, sig in by_cell.items():
        grouped.setdefault(frozenset(sig), []).append(cell)
    out = []
    for sig, cells in grouped.items():
        cells.sort()
        runs: list[tuple[int, int]] = []
        for cell in cells:
            if runs and runs[-1][0] + runs[-1][1] == cell:
                runs[-1] = (runs[-1][0], runs[-1][1] + 1)
            else:
                runs.append((cell, 1))
        out.append((sig, runs))
    return out


def compute_segments(requests: Sequence[RequestRecord], store: LedgerStore) -> list[Segment]:
    """Partition the demanded cells into segments with remaining budgets.

    Per segment and active group the remaining budget is the element-wise
    minimum over member cells; the floor additionally minimises over groups
    and is what the allocation constraints use.
    """
    if not requests:
        return []
    domain = store.schema.domain_size
    interval_only = all(isinstance(r.predicate, CellInterval) for r in requests)
    raw = _arc_segments(requests, domain) if interval_only else _cell_segments(requests, domain)
    raw.sort(key=lambda item: item[1][0])

    groups = store.active_groups()
    unlocked = {g.group_id: store.unlocked(g.group_id).eps for g in groups}
    segments: list[Segment] = []
    seg_lookup: list[tuple[int, int, int]] = []  # (start, end, segment index)
    for idx, (sig, runs) in enumerate(raw):
        for start, length in runs:
            seg_lookup.append((start, start + length, idx))
    seg_lookup.sort()
    starts = [s for s, _, _ in seg_lookup]

    def segment_of(cell: int) -> int | None:
        pos = bisect.bisect_right(starts, cell) - 1
        if pos < 0:
            return None
        start, end, idx = seg_lookup[pos]
        return idx if start <= cell < end else None

    # min over touched member cells; untouched cells sit at the unlocked level
    mins: dict[tuple[int, int], np.ndarray] = {}
    touched_counts: dict[tuple[int, int], int] = {}
    active_ids = {g.group_id for g in groups}
    for (gid, cell), consumed in store.touched_items():
        if gid not in active_ids:
            continue
        idx = segment_of(cell)
        if idx is None:
            continue
        rem = unlocked[gid] - consumed
        key = (idx, gid)
        prev = mins.get(key)
        mins[key] = rem if prev is None else np.minimum(prev, rem)
        touched_counts[key] = touched_counts.get(key, 0) + 1

    for idx, (sig, runs) in enumerate(raw):
        cell_count = sum(length for _, length in runs)
        per_group: dict[int, RdpVector] = {}
        floor = None
        for g in groups:
            key = (idx, g.group_id)
            rem = mins.get(key)
            if rem is None:
                rem = unlocked[g.group_id]
            elif touched_counts[key] < cell_count:
                rem = np.minimum(rem, unlocked[g.group_id])
            per_group[g.group_id] = RdpVector(store.grid, rem)
            floor = rem if floor is None else np.minimum(floor, rem)
        segments.append(
            Segment(
                segment_id=idx,
                signature=sig,
                runs=tuple(runs),
                cell_count=cell_count,
                per_group_remaining=per_group,
                floor=RdpVector(store.grid, floor),
            )
        )
    return segments


def classify_contested(
    segments: Sequence[Segment], requests: Sequence[RequestRecord]
) -> tuple[list[Segment], list[Segment]]:
    """Split segments into (contested, uncontested).

    A segment is contested when the summed cost of every request demanding it
    fails the privacy filter against the segment's remaining budget; an
    uncontested segment imposes no constraint on the allocation.
    """
    cost_by_id = {r.request_id: r.cost for r in requests}
    contested: list[Segment] = []
    uncontested: list[Segment] = []
    for seg in segments:
        total = RdpVector.zero(seg.floor.grid)
        for rid in seg.signature:
            total = total + cost_by_id[rid]
        if filter_admits(RdpVector.zero(seg.floor.grid), total, seg.floor):
            uncontested.append(seg)
        else:
            contested.append(seg)
    return contested, uncontested


@dataclass(frozen=True)
class PruneResult:
    auto_accept: tuple[int, ...]
    auto_reject: tuple[int, ...]
    residual_requests: tuple[RequestRecord, ...]
    contested: tuple[Segment, ...]


def prune(requests: Sequence[RequestRecord], segments: Sequence[Segment]) -> PruneResult:
    """Pre-accept and pre-reject requests, leaving a residual problem.

    Requests touching only uncontested segments are accepted outright (those
    segments admit all their demand simultaneously); requests that alone
    overflow some associated segment at every order can never be part of a
    feasible allocation and are rejected.  Everything else stays, constrained
    only by the contested segments.
    """
    contested, _ = classify_contested(segments, requests)
    contested_by_request: dict[int, list[Segment]] = {}
    for seg in contested:
        for rid in seg.signature:
            contested_by_request.setdefault(rid, []).append(seg)

    auto_accept: list[int] = []
    auto_reject: list[int] = []
    residual: list[RequestRecord] = []
    for r in requests:
        touched = contested_by_request.get(r.request_id)
        if not touched:
            auto_accept.append(r.request_id)
            continue
        zero = RdpVector.zero(r.cost.grid)
        if any(not filter_admits(zero, r.cost, seg.floor) for seg in touched):
            auto_reject.append(r.request_id)
        else:
            residual.append(r)
    return PruneResult(
        auto_accept=tuple(auto_accept),
        auto_reject=tuple(auto_reject),
        residual_requests=tuple(residual),
        contested=tuple(contested),
    )
