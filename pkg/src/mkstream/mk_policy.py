"""(m,k)-frame semantics: dynamic failure, per-class degradation, send/reject rule."""
from __future__ import annotations

import enum
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

from .stream_model import KFramePattern, PatternLabel


@dataclass(frozen=True)
class MkConstraint:
    """At least ``m`` of any ``k`` consecutive frames must meet their deadline.

    ``m = 0`` is accepted: it describes a class that is shed entirely.
    """

    m: int
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0 <= self.m <= self.k:
            raise ValueError(f"need 0 <= m <= k, got m={self.m}, k={self.k}")

    @property
    def tolerated_misses(self) -> int:
        return self.k - self.m


@dataclass(frozen=True)
class ClassConstraintSet:
    i: MkConstraint
    p: MkConstraint
    b: MkConstraint

    def __post_init__(self):
        if self.i.m != self.i.k:
            raise ValueError("I frames are never shed: need m_i == k_i")

    @classmethod
    def full(cls, k_i: int, k_p: int, k_b: int) -> ClassConstraintSet:
        return cls(MkConstraint(k_i, k_i), MkConstraint(k_p, k_p), MkConstraint(k_b, k_b))

    @classmethod
    def from_pairs(cls, i: tuple[int, int], p: tuple[int, int], b: tuple[int, int]) -> ClassConstraintSet:
        return cls(MkConstraint(*i), MkConstraint(*p), MkConstraint(*b))

    def as_pairs(self) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
        return (self.i.m, self.i.k), (self.p.m, self.p.k), (self.b.m, self.b.k)

    @property
    def total_m(self) -> int:
        return self.i.m + self.p.m + self.b.m

    @property
    def total_k(self) -> int:
        return self.i.k + self.p.k + self.b.k

    def is_full(self) -> bool:
        return self.total_m == self.total_k

    def ordering_holds(self, strict: bool = False) -> bool:
        """Check the criticality ordering ``m_i >= m_p >= m_b`` (``>`` if strict).

        Not enforced on construction: per-GoP counts routinely have more B
        than P frames, so the ordering only makes sense for normalized values.
        """
        a, b, c = self.i.m, self.p.m, self.b.m
        return (a > b > c) if strict else (a >= b >= c)


class RemovalCounts(NamedTuple):
    i: int
    p: int
    b: int

    @property
    def total(self) -> int:
        return self.i + self.p + self.b


def frames_to_remove(classes: ClassConstraintSet) -> RemovalCounts:
    """Frames to shed per window: ``M - N`` split by class."""
    return RemovalCounts(
        classes.i.tolerated_misses,
        classes.p.tolerated_misses,
        classes.b.tolerated_misses,
    )


def dynamic_failure(history: Sequence[bool], constraint: MkConstraint) -> bool:
    """True iff some full window of ``k`` consecutive outcomes has more than ``k - m`` misses."""
    k = constraint.k
    n = len(history)
    if n < k:
        return False
    limit = constraint.tolerated_misses
    misses = sum(1 for met in history[:k] if not met)
    if misses > limit:
        return True
    for j in range(k, n):
        misses += (not history[j]) - (not history[j - k])
        if misses > limit:
            return True
    return False


@dataclass(frozen=True)
class OutcomeWindow:
    """The ``k`` most recent deadline outcomes of one frame class (True = met)."""

    constraint: MkConstraint
    outcomes: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        if len(self.outcomes) > self.constraint.k:
            raise ValueError("window holds more than k outcomes")

    @property
    def misses(self) -> int:
        return sum(1 for met in self.outcomes if not met)

    @property
    def in_failure(self) -> bool:
        return dynamic_failure(self.outcomes, self.constraint)


def record_outcome(window: OutcomeWindow, met: bool) -> tuple[OutcomeWindow, bool]:
    outcomes = (window.outcomes + (bool(met),))[-window.constraint.k:]
    updated = OutcomeWindow(window.constraint, outcomes)
    return updated, updated.in_failure


def _greedy_pick(positions: Sequence[int], gap: int, want: int) -> list[int]:
    picked = [positions[0]]
    for p in positions[1:]:
        if len(picked) == want:
            break
        if p - picked[-1] >= gap:
            picked.append(p)
    return picked


def spread_selection(positions: Sequence[int], count: int) -> list[int]:
    """Pick ``count`` of the sorted ``positions`` maximizing the minimum gap.

    Among optimal selections the lexicographically smallest is returned: for a
    fixed gap the greedy leftmost pick is both feasible-if-any and
    lexicographically minimal, so a search on the gap finishes the job.
    """
    n = len(positions)
    if count < 0 or count > n:
        raise ValueError(f"cannot pick {count} of {n} positions")
    if count == 0:
        return []
    if count == 1:
        return [positions[0]]
    lo, hi = 1, (positions[-1] - positions[0]) // (count - 1)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if len(_greedy_pick(positions, mid, count)) >= count:
            lo = mid
        else:
            hi = mid - 1
    return _greedy_pick(positions, lo, count)


def plan_degradation(pattern: KFramePattern, removal: RemovalCounts) -> frozenset[int]:
    """Positions of the pattern to drop, evenly spread within each label."""
    if removal.i != 0:
        raise ValueError("mandatory (I) frames cannot be planned for removal")
    drops: set[int] = set()
    for label, count in ((PatternLabel.O, removal.b), (PatternLabel.H, removal.p)):
        positions = pattern.positions(label)
        if count > len(positions):
            raise ValueError(f"cannot drop {count} {label.value} frames, pattern has {len(positions)}")
        drops.update(spread_selection(positions, count))
    return frozenset(drops)


class Action(str, enum.Enum):
    SEND = "send"
    REJECT = "reject"


class ServerAvailability(str, enum.Enum):
    OCCUPIED = "occupied"
    AVAILABLE = "available"


@dataclass(frozen=True)
class ScheduleDecision:
    action: Action
    server_state_after: ServerAvailability

    @property
    def sent(self) -> bool:
        return self.action is Action.SEND


SEND = ScheduleDecision(Action.SEND, ServerAvailability.OCCUPIED)
REJECT = ScheduleDecision(Action.REJECT, ServerAvailability.AVAILABLE)


def schedule_frame(frame, deadline_missed: bool, all_optional_rejected: bool = False) -> ScheduleDecision:
    """Send/reject one queued frame.

    ``frame`` is a :class:`~mkstream.stream_model.Frame` or a bare
    :class:`PatternLabel`. Mandatory frames always go out; optional frames
    are dropped once late; hard-optional frames are dropped only when late
    and every optional frame of the current GoP was already rejected.
    """
    label = PatternLabel(getattr(frame, "label", frame))
    if label is PatternLabel.M:
        return SEND
    if label is PatternLabel.H:
        return REJECT if (all_optional_rejected and deadline_missed) else SEND
    return REJECT if deadline_missed else SEND
