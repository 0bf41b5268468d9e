"""Poisson upper confidence bounds for rare-event campaign classes.

When an injection campaign observes k events of some class in n trials,
the one-sided upper bound on the per-trial rate at confidence c is the
smallest Poisson mean lambda with CDF(k; lambda) <= 1 - c, divided by n.
For k = 0 this reduces to -ln(1 - c) / n, the familiar rule of three
shape (ln 20 ~ 3.0 at 95 %).
"""

from __future__ import annotations

import math

__all__ = ["poisson_cdf", "poisson_upper_mean", "poisson_upper_rate"]


def poisson_cdf(k: int, lam: float) -> float:
    """P[X <= k] for X ~ Poisson(lam), summed term by term."""
    if k < 0:
        return 0.0
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if lam == 0.0:
        return 1.0
    # Accumulate terms in log space until the running term underflows.
    term = math.exp(-lam)
    total = term
    for i in range(1, k + 1):
        term *= lam / i
        total += term
    return min(total, 1.0)


def poisson_upper_mean(k: int, confidence: float = 0.95) -> float:
    """Smallest lambda whose lower tail at k has shrunk to 1 - confidence."""
    if k < 0:
        raise ValueError("event count must be non-negative")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie strictly between 0 and 1")
    alpha = 1.0 - confidence
    if k == 0:
        return -math.log(alpha)
    lo, hi = 0.0, float(k) + 1.0
    while poisson_cdf(k, hi) > alpha:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if poisson_cdf(k, mid) > alpha:
            lo = mid
        else:
            hi = mid
    return hi


def poisson_upper_rate(k: int, n: int, confidence: float = 0.95) -> float:
    """Upper confidence bound on the per-trial event rate."""
    if n < 1:
        raise ValueError("trial count must be positive")
    return poisson_upper_mean(k, confidence) / n
