"""Proportional sharing of network capacity between video servers."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .mk_policy import ClassConstraintSet, MkConstraint


class InfeasibleAllocation(ValueError):
    """The grant cannot even carry the mandatory frames."""


@dataclass(frozen=True)
class CapacityDemand:
    server_id: object
    required_capacity: float

    def __post_init__(self):
        if not self.required_capacity > 0:
            raise ValueError(f"required capacity of {self.server_id!r} must be positive")


@dataclass(frozen=True)
class Allocation:
    server_id: object
    granted_capacity: float


def _check(network_capacity, demands):
    if not demands:
        raise ValueError("no capacity demands to share")
    if not network_capacity > 0:
        raise ValueError("network capacity must be positive")


def congestion_ratio(network_capacity: float, demands: list[CapacityDemand]) -> float:
    _check(network_capacity, demands)
    total = sum(d.required_capacity for d in demands)
    return min(1.0, network_capacity / total)


def largest_remainder(quotas: list[Fraction], total: int, keys: list) -> list[int]:
    """Round ``quotas`` to integers summing to ``total`` (Hamilton method).

    Leftover units go to the largest fractional parts; ties go to the
    smallest key.
    """
    floors = [math.floor(q) for q in quotas]
    extra = total - sum(floors)
    order = sorted(range(len(quotas)), key=lambda j: (-(quotas[j] - floors[j]), keys[j]))
    for j in order[:extra]:
        floors[j] += 1
    return floors


def apportion(network_capacity: float, demands: list[CapacityDemand]) -> list[Allocation]:
    """Grant each server its demand scaled by the congestion ratio.

    Under congestion grants are integers that add up to the (integral part of
    the) network capacity exactly.
    """
    _check(network_capacity, demands)
    raw = [d.required_capacity for d in demands]
    if float(network_capacity).is_integer() and all(float(r).is_integer() for r in raw):
        return _apportion_int(int(network_capacity), demands, [int(r) for r in raw])
    need = [Fraction(d.required_capacity) for d in demands]
    total_need = sum(need)
    cap = Fraction(network_capacity)
    if cap >= total_need:
        return [Allocation(d.server_id, d.required_capacity) for d in demands]
    quotas = [q * cap / total_need for q in need]
    grants = largest_remainder(quotas, math.floor(cap), [d.server_id for d in demands])
    return [Allocation(d.server_id, g) for d, g in zip(demands, grants)]


def _apportion_int(cap: int, demands: list[CapacityDemand], need: list[int]) -> list[Allocation]:
    # same rule as the Fraction path, with remainders kept as integer numerators
    total = sum(need)
    if cap >= total:
        return [Allocation(d.server_id, d.required_capacity) for d in demands]
    floors = [n * cap // total for n in need]
    rems = [n * cap % total for n in need]
    order = sorted(range(len(need)), key=lambda j: (-rems[j], demands[j].server_id))
    for j in order[: cap - sum(floors)]:
        floors[j] += 1
    return [Allocation(d.server_id, g) for d, g in zip(demands, floors)]


def apportion_int_array(cap: int, need: np.ndarray) -> np.ndarray:
    """Vector form of the integer rule; entry ``j`` plays server id ``j``.

    Zero demands get zero. Products must fit in int64.
    """
    need = np.asarray(need, dtype=np.int64)
    total = int(need.sum())
    if cap >= total:
        return need.copy()
    floors = need * cap // total
    rems = need * cap % total
    order = np.lexsort((np.arange(len(need)), -rems))
    floors[order[: cap - int(floors.sum())]] += 1
    return floors


def kept_frames(total_k: int, granted: float, required: float) -> int:
    """Frames per window that fit in ``granted`` out of ``required`` capacity."""
    if required <= 0:
        raise ValueError("required capacity must be positive")
    if granted >= required:
        return total_k
    return max(0, math.floor(total_k * granted / required + 1e-9))


def allocation_to_constraints(
    full: ClassConstraintSet,
    granted: float,
    required: float,
    p_floor: int = 1,
    b_floor: int = 0,
) -> ClassConstraintSet:
    """Degrade a full-quality constraint set to fit ``granted`` capacity.

    B frames are shed first down to ``b_floor``, then P frames down to
    ``p_floor``; I frames never. If the grant is above the mandatory load but
    below the floors, the floors are returned.
    """
    if not full.is_full():
        raise ValueError("expected a full-quality constraint set (m == k for every class)")
    if granted > required:
        raise ValueError("granted capacity exceeds the requirement")
    target = kept_frames(full.total_k, granted, required)
    if target < full.i.m:
        raise InfeasibleAllocation(f"grant keeps {target} frames per window, below the {full.i.m} mandatory ones")
    k_p, k_b = full.p.k, full.b.k
    p_min, b_min = min(p_floor, k_p), min(b_floor, k_b)
    excess = full.total_k - target
    shed_b = min(excess, k_b - b_min)
    shed_p = min(excess - shed_b, k_p - p_min)
    return ClassConstraintSet(full.i, MkConstraint(k_p - shed_p, k_p), MkConstraint(k_b - shed_b, k_b))
