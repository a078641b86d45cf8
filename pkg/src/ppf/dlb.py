"""Dynamic load-balancing schedulers: turn per-rank particle counts into a
transfer plan.

Ranks above their target share are senders, those below are receivers. The
greedy scheduler walks both lists with monotone cursors and always moves
min(remaining surplus, remaining deficit); the sorted variant runs greedy on
descending-sorted lists, which usually needs fewer links; the largest-gradient
scheduler pairs the i-th largest surplus with the i-th largest deficit, capping
links at min(#senders, #receivers) at the cost of possible residual imbalance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InconsistentClassification


@dataclass(frozen=True)
class Transfer:
    """One scheduled particle shipment."""

    src: int
    dst: int
    count: int

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("transfer count must be > 0")
        if self.src == self.dst:
            raise ValueError("transfer from a rank to itself")


@dataclass
class RouteSchedule:
    """Ordered transfer list plus helpers for logs and tests."""

    transfers: list

    def __len__(self) -> int:
        return len(self.transfers)

    def __iter__(self):
        return iter(self.transfers)

    @property
    def link_count(self) -> int:
        return len(self.transfers)

    @property
    def total_moved(self) -> int:
        return sum(t.count for t in self.transfers)

    def apply(self, counts) -> np.ndarray:
        """Loads after executing the plan (for verification)."""
        out = np.array(counts, dtype=np.int64)
        for t in self.transfers:
            out[t.src] -= t.count
            out[t.dst] += t.count
        return out

    def csv_rows(self, step: int) -> list:
        return [f"{step},{t.src},{t.dst},{t.count}" for t in self.transfers]


@dataclass
class Classification:
    """Senders with surpluses and receivers with deficits, in rank order.

    classify() always produces balanced lists (total surplus equals total
    deficit); hand-built classifications may be unbalanced, which the greedy
    schedulers reject but the largest-gradient scheduler tolerates.
    """

    senders: list  # (rank, surplus > 0)
    receivers: list  # (rank, deficit > 0)

    def __post_init__(self):
        if any(n <= 0 for _, n in self.senders + self.receivers):
            raise InconsistentClassification("zero or negative surplus/deficit")
        both = {r for r, _ in self.senders} & {r for r, _ in self.receivers}
        if both:
            raise InconsistentClassification(f"ranks {both} are sender and receiver")

    @property
    def total_surplus(self) -> int:
        return sum(n for _, n in self.senders)

    @property
    def total_deficit(self) -> int:
        return sum(n for _, n in self.receivers)


def target_loads(total: int, ranks: int) -> np.ndarray:
    """Even share: floor(N/P) each, remainder to the lowest rank ids."""
    base = total // ranks
    rem = total % ranks
    out = np.full(ranks, base, dtype=np.int64)
    out[:rem] += 1
    return out


def classify(report) -> Classification:
    """Label ranks as senders or receivers relative to their target share."""
    counts = np.asarray(report, dtype=np.int64)
    if np.any(counts < 0):
        raise ValueError("particle counts must be >= 0")
    total = int(counts.sum())
    ranks = len(counts)
    if total < ranks:
        raise ValueError(f"need at least one particle per rank ({total} < {ranks})")
    surplus = counts - target_loads(total, ranks)
    senders = [(int(r), int(s)) for r, s in enumerate(surplus) if s > 0]
    receivers = [(int(r), int(-s)) for r, s in enumerate(surplus) if s < 0]
    return Classification(senders, receivers)


def greedy_schedule(c: Classification) -> RouteSchedule:
    """First sender fills the first receiver, cursors only move forward.

    Requires a balanced classification; the resulting loads equal the targets
    exactly.
    """
    if c.total_surplus != c.total_deficit:
        raise InconsistentClassification(
            f"surplus {c.total_surplus} != deficit {c.total_deficit}"
        )
    transfers = []
    senders = [list(t) for t in c.senders]
    receivers = [list(t) for t in c.receivers]
    j = 0
    for s in senders:
        while s[1] > 0:
            r = receivers[j]
            n = min(s[1], r[1])
            transfers.append(Transfer(s[0], r[0], n))
            s[1] -= n
            r[1] -= n
            if r[1] == 0 and j < len(receivers) - 1:
                j += 1
    return RouteSchedule(transfers)


def _sort_desc(pairs):
    # descending by amount, ties broken by ascending rank id
    return sorted(pairs, key=lambda t: (-t[1], t[0]))


def sorted_greedy_schedule(c: Classification) -> RouteSchedule:
    """Greedy on both lists sorted descending; tends to use fewer links."""
    return greedy_schedule(
        Classification(_sort_desc(c.senders), _sort_desc(c.receivers))
    )


def largest_gradient_schedule(c: Classification) -> RouteSchedule:
    """Pair i-th largest surplus with i-th largest deficit; one link per pair.

    Produces exactly min(#senders, #receivers) transfers and may leave
    residual imbalance, trading balance quality for minimal link count.
    """
    senders = _sort_desc(c.senders)
    receivers = _sort_desc(c.receivers)
    transfers = []
    for (s_rank, s_n), (r_rank, r_n) in zip(senders, receivers):
        n = min(s_n, r_n)
        if n > 0:
            transfers.append(Transfer(s_rank, r_rank, n))
    return RouteSchedule(transfers)


SCHEDULERS = {
    "gs": greedy_schedule,
    "sgs": sorted_greedy_schedule,
    "lgs": largest_gradient_schedule,
}
