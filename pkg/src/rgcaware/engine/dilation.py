"""Variable dilation schedules, receptive fields and gridding analysis."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union


def round_half_away(x: float) -> int:
    """Round to nearest integer, halves away from zero (Python's round() is banker's)."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass(frozen=True)
class DilationSchedule:
    n: int
    r: int
    rates: tuple

    def __iter__(self):
        return iter(self.rates)

    def __len__(self):
        return len(self.rates)


def make_schedule(n: int, r: int) -> DilationSchedule:
    """Rates ``round(r - n/2 + i)`` for ``i = 0..n-1``, clamped to at least 1.

    >>> make_schedule(5, 3).rates
    (1, 2, 3, 4, 5)
    >>> make_schedule(3, 3).rates
    (2, 3, 4)
    """
    if n < 1 or r < 1:
        raise ValueError("n and r must be >= 1")
    rates = tuple(max(1, round_half_away(r - n / 2 + i)) for i in range(n))
    return DilationSchedule(n, r, rates)


def fixed_schedule(n: int, r: int) -> DilationSchedule:
    return DilationSchedule(n, r, (r,) * n)


Rates = Union[DilationSchedule, Sequence[int]]


def receptive_field(schedule: Rates, k: int = 3) -> int:
    """Side length of the receptive field of a stride-1 stack of k x k atrous convs."""
    return 1 + sum((k - 1) * r for r in schedule)


def influence_offsets_1d(schedule: Rates, k: int = 3) -> set[int]:
    """Input offsets reaching one output sample, by walking the stack backwards."""
    c = (k - 1) // 2
    taps = range(-c, k - c)
    reach = {0}
    for r in reversed(list(schedule)):
        reach = {p + r * t for p in reach for t in taps}
    return reach


def influence_map(schedule: Rates, k: int = 3) -> set[tuple[int, int]]:
    """First-layer pixels that influence one final-layer output pixel (2-D)."""
    c = (k - 1) // 2
    taps = [(i - c, j - c) for i in range(k) for j in range(k)]
    reach = {(0, 0)}
    for r in reversed(list(schedule)):
        reach = {(y + r * dy, x + r * dx) for (y, x) in reach for (dy, dx) in taps}
    return reach


def gridding_coverage(schedule: Rates, k: int = 3) -> float:
    """Fraction of the receptive-field box actually sampled by the stack."""
    rf = receptive_field(schedule, k)
    return len(influence_map(schedule, k)) / float(rf * rf)


def gridding_coverage_1d(schedule: Rates, k: int = 3) -> float:
    return len(influence_offsets_1d(schedule, k)) / float(receptive_field(schedule, k))
