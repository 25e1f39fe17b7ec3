"""Brute-force delete-d jackknife over every size-r subset.

Kept deliberately naive (explicit loops, no shared code with
:mod:`jackfilter.jackknife`) so it can serve as the reference for the
sampled estimators.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import InvalidSizes, TooManySubsets
from .numkit import RngHandle

MAX_SUBSETS = 10**6


def linear_dataset(n: int, seed: int, slope: float = 2.0, noise: float = 1.0):
    """``y_i = slope * t_i + noise * e_i`` at ``t_i = 1..n``."""
    gen = RngHandle(seed, "oracle-data").generator()
    t = np.arange(1, n + 1, dtype=float)
    return t, slope * t + noise * gen.standard_normal(n)


def proportional_fit(t, y) -> float:
    """Closed-form least squares for ``y = theta * t``."""
    num = sum(ti * yi for ti, yi in zip(t, y))
    den = sum(ti * ti for ti in t)
    return num / den


def enumerate_jackknife(t, y, r: int, estimator=proportional_fit) -> dict:
    """Delete-(n-r) jackknife of a scalar estimator by full enumeration.

    Returns the all-data estimate ``theta_n``, the subset average
    ``theta_hat``, ``v_n`` (spread about ``theta_n``), ``vtilde_n`` (spread
    about ``theta_hat``), the subset count and the per-subset estimates keyed
    by 1-based index tuples.
    """
    n = len(t)
    d = n - r
    if d < 1 or r < 1:
        raise InvalidSizes(f"need 1 <= r < n (n={n}, r={r})")
    count = math.comb(n, d)
    if count > MAX_SUBSETS:
        raise TooManySubsets(f"C({n}, {d}) = {count} exceeds {MAX_SUBSETS}")
    estimates = {}
    for combo in itertools.combinations(range(n), r):
        estimates[tuple(i + 1 for i in combo)] = estimator([t[i] for i in combo], [y[i] for i in combo])
    theta_n = estimator(list(t), list(y))
    theta_hat = sum(estimates.values()) / count
    pref = r / (d * count)
    v_n = pref * sum((e - theta_n) ** 2 for e in estimates.values())
    vtilde_n = pref * sum((e - theta_hat) ** 2 for e in estimates.values())
    return {
        "n": n, "r": r, "d": d, "subsets": count,
        "theta_n": theta_n, "theta_hat": theta_hat,
        "v_n": v_n, "vtilde_n": vtilde_n,
        "estimates": estimates,
    }
