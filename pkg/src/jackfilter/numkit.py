"""Small dense symmetric-matrix kernels, PSD hygiene, sample moments and
seeded random streams.

Covariances are plain ``numpy`` arrays throughout the package; the helpers
here enforce exact symmetry and a trace-scaled PSD tolerance.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import NotPSD, TooFewPoints


def as_sym(a) -> np.ndarray:
    """Return ``a`` as a float 2-D array with exact symmetry ``(a + a.T) / 2``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return 0.5 * (a + a.T)


def psd_tol(a: np.ndarray) -> float:
    """Eigenvalue floor below which a matrix is not PSD: 1e-10 * (1 + |trace|)."""
    return 1e-10 * (1.0 + abs(float(np.trace(a))))


def is_psd(a) -> bool:
    a = as_sym(a)
    return bool(np.linalg.eigvalsh(a).min() >= -psd_tol(a))


def matrix_sqrt(a) -> np.ndarray:
    """Principal square root of a PSD matrix.

    Eigenvalues in ``[-eps, 0)`` are treated as zero, so singular inputs
    (e.g. covariances with zero rows) are fine.

    Raises:
        NotPSD: if an eigenvalue is below ``-psd_tol(a)``.
    """
    a = as_sym(a)
    w, v = np.linalg.eigh(a)
    if w.min() < -psd_tol(a):
        raise NotPSD(f"min eigenvalue {w.min():.3e} below tolerance {psd_tol(a):.3e}")
    w = np.clip(w, 0.0, None)
    s = (v * np.sqrt(w)) @ v.T
    return 0.5 * (s + s.T)


def psd_project(a, *, report: bool = False):
    """Nearest PSD matrix in Frobenius norm (clip negative eigenvalues).

    With ``report=True`` returns ``(matrix, clipped)`` where ``clipped`` says
    whether any eigenvalue below ``-psd_tol`` had to be removed.
    """
    a = as_sym(a)
    w, v = np.linalg.eigh(a)
    clipped = bool(w.min() < -psd_tol(a))
    if w.min() >= 0.0:
        out = a
    else:
        out = (v * np.clip(w, 0.0, None)) @ v.T
        out = 0.5 * (out + out.T)
    return (out, clipped) if report else out


def sample_moments(points, ddof: int = 1):
    """Mean vector and covariance of a set of equal-length vectors.

    The covariance divisor is ``count - ddof``; ``ddof=1`` is the usual
    unbiased ensemble convention.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if ddof not in (0, 1):
        raise ValueError("ddof must be 0 or 1")
    count = x.shape[0]
    if count < ddof + 1:
        raise TooFewPoints(f"need at least {ddof + 1} points, got {count}")
    mean = x.mean(axis=0)
    dev = x - mean
    cov = dev.T @ dev / (count - ddof)
    return mean, 0.5 * (cov + cov.T)


def cross_covariance(a, b, ddof: int = 1) -> np.ndarray:
    """Sample cross-covariance between paired rows of ``a`` and ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[0] != b.shape[0]:
        raise ValueError("row counts differ")
    if a.shape[0] < ddof + 1:
        raise TooFewPoints(f"need at least {ddof + 1} points, got {a.shape[0]}")
    da = a - a.mean(axis=0)
    db = b - b.mean(axis=0)
    return da.T @ db / (a.shape[0] - ddof)


def solve_sym(a, b, ridge: float = 1e-12) -> np.ndarray:
    """Solve ``x @ a = b`` for symmetric ``a`` (returns ``b @ inv(a)``).

    A ridge of ``ridge * |trace|`` is added only if the plain solve fails;
    if that also fails the pseudo-inverse is used. Returns ``None`` when
    nothing produces a finite answer.
    """
    a = as_sym(a)
    b = np.atleast_2d(np.asarray(b, dtype=float))
    for shift in (0.0, ridge * abs(float(np.trace(a)))):
        try:
            x = np.linalg.solve(a + shift * np.eye(a.shape[0]), b.T).T
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(x)):
            return x
    x = b @ np.linalg.pinv(a)
    return x if np.all(np.isfinite(x)) else None


def upper_triangle(a) -> np.ndarray:
    """Row-major upper triangle (diagonal included)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    return a[np.triu_indices(a.shape[0])]


def from_upper_triangle(values, dim: int) -> np.ndarray:
    out = np.zeros((dim, dim))
    out[np.triu_indices(dim)] = values
    return out + np.triu(out, 1).T


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


@dataclass(frozen=True)
class RngHandle:
    """A named, seeded random stream.

    Streams with different labels are statistically independent, and the
    same ``(seed, stream_label)`` always yields the same draws (PCG64 seeded
    through ``SeedSequence``). Use :meth:`child` to derive per-step or
    per-purpose streams instead of sharing one generator.
    """

    seed: int
    stream_label: str = "main"

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def generator(self) -> np.random.Generator:
        seed = int(self.seed)
        words = [seed & 0xFFFFFFFF, seed >> 32] + _label_words(self.stream_label)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))

    def child(self, *parts) -> "RngHandle":
        label = "/".join([self.stream_label, *map(str, parts)])
        return RngHandle(self.seed, label)
