"""Delete-d jackknife sampling and the adaptive mean/variance recursions.

Indices are 1-based positions in the measurement log. A batch holds one
estimate per sampled subset of size ``r`` out of ``n`` points; ``d = n - r``
points are deleted from each.

Batch statistics use the jackknife-sampling variance estimator::

    v = r / (d m) * sum_s (theta_s - c)(theta_s - c)^T

with ``c`` the batch mean (or a supplied centre). When one measurement is
added, subsets are drawn among those containing the new index and the
running statistics are updated with weights ``a1 = r/n``, ``a2 = 1 - r/n``
on the mean and ``a1**2``, ``a2**2`` on the variance.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BatchMismatch, InvalidSizes
from .numkit import RngHandle, psd_project

# above this many candidate subsets we stop enumerating ranks and use rejection
ENUMERATION_LIMIT = 10**6
REJECTION_FACTOR = 50


@dataclass
class EnsembleBatch:
    """Estimates ``thetas[i]`` fitted on ``subsets[i]`` out of ``n`` points."""

    subsets: list
    thetas: np.ndarray
    n: int
    r: int
    anchor_time: float = 0.0
    mse: Optional[np.ndarray] = None

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=float))
        self.subsets = [tuple(int(i) for i in s) for s in self.subsets]
        if len(self.subsets) != self.thetas.shape[0]:
            raise BatchMismatch("one subset per estimate is required")
        if not 1 <= self.r <= self.n:
            raise InvalidSizes(f"need 1 <= r <= n, got r={self.r}, n={self.n}")

    @property
    def m(self) -> int:
        return self.thetas.shape[0]

    @property
    def d(self) -> int:
        return self.n - self.r

    @property
    def mean(self) -> np.ndarray:
        return self.thetas.mean(axis=0)


@dataclass
class JackknifeStats:
    mean: np.ndarray
    var: np.ndarray
    n: int
    m_total: int


def worker_count(requested: Optional[int] = None) -> int:
    """Worker cap from ``requested`` or ``JACKFILTER_THREADS`` (0 = auto)."""
    if requested is None:
        try:
            requested = int(os.environ.get("JACKFILTER_THREADS", "0"))
        except ValueError:
            requested = 0
    if requested <= 0:
        return os.cpu_count() or 1
    return requested


def parallel_map(fn: Callable, items: Sequence, workers: Optional[int] = None) -> list:
    """``[fn(x) for x in items]``, possibly on a thread pool; order preserved."""
    workers = min(worker_count(workers), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _unrank(rank: int, pool: int, k: int) -> list:
    """The ``rank``-th k-combination of ``range(pool)`` in lexicographic order."""
    out = []
    start = 0
    for slots in range(k, 0, -1):
        for c in range(start, pool):
            block = math.comb(pool - c - 1, slots - 1)
            if rank < block:
                out.append(c)
                start = c + 1
                break
            rank -= block
    return out


def sample_subsets(n: int, r: int, m: int, must_include: Optional[int] = None,
                   rng: Optional[RngHandle] = None) -> list:
    """Draw ``m`` size-``r`` subsets of ``{1..n}`` uniformly.

    Subsets are distinct whenever ``m`` does not exceed the number of
    candidates; beyond that, or when rejection sampling stalls, duplicates
    are allowed. With ``must_include`` every subset contains that index.
    """
    if not (1 <= r < n) or m < 1:
        raise InvalidSizes(f"need 1 <= r < n and m >= 1 (n={n}, r={r}, m={m})")
    if must_include is not None and not 1 <= must_include <= n:
        raise InvalidSizes(f"must_include={must_include} outside 1..{n}")
    gen = (rng or RngHandle(0, "subsets")).generator()

    if must_include is None:
        pool = np.arange(1, n + 1)
        k = r
    else:
        pool = np.array([i for i in range(1, n + 1) if i != must_include])
        k = r - 1
    fixed = () if must_include is None else (must_include,)

    def finish(chosen):
        return tuple(sorted(fixed + tuple(int(i) for i in chosen)))

    total = math.comb(len(pool), k)
    if total <= ENUMERATION_LIMIT:
        ranks = gen.choice(total, size=m, replace=m > total)
        return [finish(pool[_unrank(int(q), len(pool), k)]) for q in ranks]

    out, seen = [], set()
    proposals = 0
    while len(out) < m:
        s = finish(gen.choice(pool, size=k, replace=False))
        proposals += 1
        if s in seen and proposals <= REJECTION_FACTOR * m:
            continue
        seen.add(s)
        out.append(s)
    return out


def build_batch(subsets: list, estimator: Callable, n: int, r: int, anchor_time: float = 0.0,
                workers: Optional[int] = None) -> EnsembleBatch:
    """Run ``estimator(subset)`` on every subset.

    ``estimator`` returns either a parameter vector or an object with
    ``theta.values`` and ``mse`` (an :class:`~jackfilter.lsq.LsqSolution`).
    """
    results = parallel_map(estimator, subsets, workers)
    thetas, mse = [], []
    for res in results:
        if hasattr(res, "theta"):
            thetas.append(res.theta.values)
            mse.append(res.mse)
        else:
            thetas.append(np.atleast_1d(res))
            mse.append(np.nan)
    return EnsembleBatch(subsets, np.array(thetas), n, r, anchor_time, np.array(mse))


def _spread(thetas: np.ndarray, center: np.ndarray, r: int, d: int) -> np.ndarray:
    dev = thetas - center
    outer = dev.T @ dev
    if d == 0:
        # r == n: every subset is the full data set, there is nothing to spread
        if np.any(dev != 0):
            raise InvalidSizes("d = 0 requires identical estimates")
        return np.zeros_like(outer)
    return r / (d * thetas.shape[0]) * outer


def batch_jsve(batch: EnsembleBatch, theta_center=None) -> JackknifeStats:
    """Jackknife mean and JSVE variance of a batch.

    Centres on ``theta_center`` when given (the all-data estimate), else on
    the batch mean.
    """
    if batch.m == 0:
        raise InvalidSizes("empty batch")
    mean = batch.mean
    center = mean if theta_center is None else np.asarray(theta_center, dtype=float)
    var = psd_project(_spread(batch.thetas, center, batch.r, batch.d))
    return JackknifeStats(mean, var, batch.n, batch.m)


def adaptive_weights(n: int, r: int):
    """Probability weights ``(r/n, 1 - r/n)`` of subsets with/without the
    newest point."""
    if not 1 <= r <= n:
        raise InvalidSizes(f"need 1 <= r <= n, got r={r}, n={n}")
    a1 = r / n
    return a1, 1.0 - a1


def adaptive_update(prev: JackknifeStats, new_batch: EnsembleBatch,
                    center: str = "updated") -> JackknifeStats:
    """Fold a batch of subsets containing the newest point into ``prev``.

    The spread of the new batch uses prefactor ``r / ((d + 1) m)`` with ``d``
    the deletion count before the new point arrived, and is centred on the
    updated mean (``center="updated"``) or on ``prev.mean``
    (``center="previous"``).
    """
    n = new_batch.n
    if n != prev.n + 1:
        raise BatchMismatch(f"batch covers {n} points, expected {prev.n + 1}")
    if new_batch.thetas.shape[1] != prev.mean.shape[0]:
        raise BatchMismatch("estimate dimension differs from running statistics")
    if any(s and n not in s for s in new_batch.subsets):
        raise BatchMismatch(f"every subset must contain the newest index {n}")
    r = new_batch.r
    a1, a2 = adaptive_weights(n, r)
    mean = a1 * new_batch.mean + a2 * prev.mean
    if center == "updated":
        c = mean
    elif center == "previous":
        c = prev.mean
    else:
        raise ValueError(f"unknown center {center!r}")
    d_prev = prev.n - r
    spread = _spread(new_batch.thetas, c, r, d_prev + 1)
    var = psd_project(a1**2 * spread + a2**2 * prev.var)
    return JackknifeStats(mean, var, n, prev.m_total + new_batch.m)
