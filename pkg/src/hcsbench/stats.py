"""Statistical kernels used by the benchmark pipelines.

All functions are pure.  Random draws go through :func:`substream`, which
keys a counter-based Philox generator on ``(seed, *keys)`` so a unit of
work gets the same stream regardless of scheduling.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

NORM_EPS = 1e-12
P_CLAMP = 1e-15


@dataclass(frozen=True)
class PermutationConfig:
    K: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class TwoSampleStat:
    ks: float
    cvm: float
    n: int


def substream(seed: int, *keys) -> np.random.Generator:
    """Philox generator keyed by a 128-bit digest of ``(seed, *keys)``.

    The key derivation is a BLAKE2b digest of the JSON encoding of
    ``[seed, *map(str, keys)]``, so streams are platform independent.
    """
    payload = json.dumps([int(seed), *map(str, keys)], separators=(",", ":")).encode()
    key = int.from_bytes(hashlib.blake2b(payload, digest_size=16).digest(), "little")
    return np.random.Generator(np.random.Philox(key=key))


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < NORM_EPS or nv < NORM_EPS:
        raise ValueError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norms < NORM_EPS).any():
        raise ValueError("zero-norm vector cannot be normalized")
    return x / norms


def mean_pairwise_similarity(vectors) -> float:
    """Mean cosine similarity over all ordered pairs, diagonal included.

    Equals ``|sum_i u_i|^2 / n^2`` for the unit vectors ``u_i``.
    """
    u = unit_rows(np.atleast_2d(vectors))
    n = u.shape[0]
    if n < 1:
        raise ValueError("need at least one vector")
    s = u.sum(axis=0)
    return float(s @ s) / (n * n)


def mean_pairwise_similarity_batch(unit: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Statistic for each row of an index matrix ``idx`` (K, n) into unit rows."""
    n = idx.shape[1]
    s = unit[idx].sum(axis=1)
    return np.einsum("ij,ij->i", s, s) / (n * n)


def draw_without_replacement(rng: np.random.Generator, population: int, n: int, k: int) -> np.ndarray:
    """``k`` independent draws of ``n`` distinct indices from ``range(population)``.

    Vectorized Floyd sampling; each row is a uniform ``n``-subset.
    """
    if n > population:
        raise ValueError(f"cannot draw {n} from {population} without replacement")
    out = np.empty((k, n), dtype=np.int64)
    for col, j in enumerate(range(population - n, population)):
        t = rng.integers(0, j + 1, size=k)
        if col:
            clash = (out[:, :col] == t[:, None]).any(axis=1)
            t = np.where(clash, j, t)
        out[:, col] = t
    return out


def permutation_pvalue(observed: float, null_stats) -> float:
    null = np.asarray(null_stats, dtype=np.float64)
    if null.size == 0:
        raise ValueError("empty null distribution")
    exceed = int(np.count_nonzero(null >= observed))
    return max(exceed, 1) / null.size


def cauchy_combine(pvalues) -> float:
    """Unweighted Cauchy combination of p-values."""
    p = np.asarray(pvalues, dtype=np.float64)
    if p.size == 0:
        raise ValueError("cannot combine an empty list of p-values")
    p = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    t = np.mean(np.tan((0.5 - p) * np.pi))
    return float(0.5 - np.arctan(t) / np.pi)


def ks_two_sample(a, b) -> float:
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("KS statistic needs two nonempty samples")
    pooled = np.concatenate([a, b])
    # integer ECDF counts, cross-multiplied, so the only rounding is the final division
    ca = np.searchsorted(a, pooled, side="right").astype(np.int64)
    cb = np.searchsorted(b, pooled, side="right").astype(np.int64)
    return int(np.max(np.abs(ca * b.size - cb * a.size))) / (a.size * b.size)


def pooled_ranks(a, b) -> tuple[np.ndarray, np.ndarray]:
    """1-based ranks of sorted ``a`` and sorted ``b`` in the pooled ordering.

    Ties are broken with ``a`` elements ranked before ``b`` elements.
    """
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    pooled = np.concatenate([a, b])
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(pooled.size, dtype=np.int64)
    ranks[order] = np.arange(1, pooled.size + 1)
    return ranks[: a.size], ranks[a.size :]


def cvm_two_sample(a, b) -> float:
    """Two-sample Cramer-von Mises statistic for equal sample sizes N.

    ``(1/(2N^2)) sum_m [(r_m - m)^2 + (s_m - m)^2] - (4N^2 - 1)/(12N)``
    with ``r``, ``s`` the pooled ranks of the sorted samples.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("CVM statistic needs two nonempty samples")
    if a.size != b.size:
        raise ValueError(f"CVM needs equal sample sizes, got {a.size} and {b.size}")
    n = a.size
    r, s = pooled_ranks(a, b)
    m = np.arange(1, n + 1)
    # integer sums are exact
    total = int(((r - m) ** 2).sum() + ((s - m) ** 2).sum())
    return total / (2.0 * n * n) - (4.0 * n * n - 1.0) / (12.0 * n)


def two_sample_stats(a, b) -> TwoSampleStat:
    return TwoSampleStat(ks_two_sample(a, b), cvm_two_sample(a, b), len(a))


def spherical_mean(vectors) -> np.ndarray:
    u = unit_rows(np.atleast_2d(vectors))
    m = u.mean(axis=0)
    norm = np.linalg.norm(m)
    if norm < NORM_EPS:
        raise ValueError("spherical mean is degenerate (mean vector has zero norm)")
    return m / norm


def spearman_rho(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("spearman correlation needs >= 2 points")
    rx = rankdata(x) - (x.size + 1) / 2
    ry = rankdata(y) - (y.size + 1) / 2
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0:
        raise ValueError("zero rank variance")
    return float(np.clip(float(rx @ ry) / denom, -1.0, 1.0))


def quantile_linear(sorted_values: np.ndarray, q: float) -> float:
    """Quantile with linear interpolation between order statistics."""
    n = sorted_values.size
    h = (n - 1) * q
    lo = int(math.floor(h))
    hi = min(lo + 1, n - 1)
    return float(sorted_values[lo] + (h - lo) * (sorted_values[hi] - sorted_values[lo]))
