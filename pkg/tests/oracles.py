"""Independent reference implementations used to check the analytics.

These deliberately avoid the library code paths they verify: SDNN uses an
explicit two-pass loop, the spectrum oracle is a direct O(n^2) DFT
periodogram.  Keep them dumb.
"""

from __future__ import annotations

import cmath
import math
from typing import Sequence


def sdnn_two_pass(intervals_ms: Sequence[float]) -> float:
    """Explicit mean-then-squared-deviations sample standard deviation."""
    n = len(intervals_ms)
    if n < 2:
        raise ValueError("need at least 2 intervals")
    mean = sum(intervals_ms) / n
    ss = 0.0
    for x in intervals_ms:
        ss += (x - mean) ** 2
    return math.sqrt(ss / (n - 1))


def mean_hr_oracle(intervals_ms: Sequence[float]) -> float:
    return 60000.0 / (sum(intervals_ms) / len(intervals_ms))


def dft_periodogram(times_s: Sequence[float], values: Sequence[float],
                    freq_hz: float) -> float:
    """Direct periodogram of the mean-subtracted series at one frequency:
    |sum_j x_j exp(-2*pi*i*f*t_j)|^2 / N."""
    n = len(values)
    mean = sum(values) / n
    acc = 0j
    for t, x in zip(times_s, values):
        acc += (x - mean) * cmath.exp(-2j * math.pi * freq_hz * t)
    return abs(acc) ** 2 / n


def trapezoid(xs: Sequence[float], ys: Sequence[float]) -> float:
    total = 0.0
    for i in range(1, len(xs)):
        total += (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]) / 2.0
    return total
