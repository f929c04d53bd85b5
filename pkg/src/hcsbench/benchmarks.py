"""Whole-screen benchmarks: perturbation consistency, replicate
consistency and biological relationship recall."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from . import stats
from ._parallel import pmap
from .data import CONTROL_TYPES, GENETIC_TYPES, EmbeddingTable, GeneAggregateSet, PerturbationType, RelationshipDB
from .stats import PermutationConfig

log = logging.getLogger(__name__)

GROUP_BY = ("guide", "gene", "compound_concentration")


# --------------------------------------------------------------------------
# Perturbation consistency


@dataclass(frozen=True)
class ExperimentEntry:
    experiment_id: str
    n_replicates: int
    s_bar: float
    p_value: float


@dataclass(frozen=True)
class ConsistencyResult:
    perturbation_id: str
    entries: tuple[ExperimentEntry, ...]
    combined_p: float | None

    def to_dict(self) -> dict:
        return {
            "perturbation_id": self.perturbation_id,
            "entries": [e.__dict__ for e in self.entries],
            "combined_p": self.combined_p,
        }


@dataclass(frozen=True)
class SkippedUnit:
    perturbation_id: str
    experiment_id: str
    n_replicates: int
    reason: str


@dataclass(frozen=True)
class ConsistencyReport:
    results: list[ConsistencyResult]
    skipped: list[SkippedUnit] = field(default_factory=list)

    def by_id(self) -> dict[str, ConsistencyResult]:
        return {r.perturbation_id: r for r in self.results}


def condition_key(perturbation_id: str, concentration: float) -> str:
    """Key for a (compound, concentration) condition."""
    if concentration is None or (isinstance(concentration, float) and math.isnan(concentration)):
        return perturbation_id
    return f"{perturbation_id}@{concentration!r}"


def _group_keys(meta: pd.DataFrame, group_by: str) -> np.ndarray:
    """Group key per row, or None for rows that are not grouped."""
    ptype = meta["perturbation_type"].to_numpy()
    keys = np.full(len(meta), None, dtype=object)
    if group_by == "guide":
        rows = np.isin(ptype, list(GENETIC_TYPES))
        keys[rows] = meta["perturbation_id"].to_numpy()[rows]
    elif group_by == "gene":
        rows = np.isin(ptype, list(GENETIC_TYPES))
        keys[rows] = meta["gene_id"].to_numpy()[rows]
    elif group_by == "compound_concentration":
        rows = np.flatnonzero(ptype == PerturbationType.COMPOUND.value)
        pid = meta["perturbation_id"].to_numpy()
        conc = meta["concentration"].to_numpy()
        for i in rows:
            keys[i] = condition_key(pid[i], float(conc[i]))
    else:
        raise ValueError(f"group_by must be one of {GROUP_BY}, got {group_by!r}")
    return keys


def single_perturbation_mask(table: EmbeddingTable) -> np.ndarray:
    """Rows carrying exactly one perturbation.

    Uses an optional ``perturbation_count`` extra column; tables without it
    are taken to be single-perturbation throughout.
    """
    if "perturbation_count" not in table.meta.columns:
        return np.ones(len(table), dtype=bool)
    counts = pd.to_numeric(table.meta["perturbation_count"], errors="coerce").to_numpy()
    return counts <= 1


def perturbation_consistency(
    table: EmbeddingTable,
    cfg: PermutationConfig,
    group_by: str = "guide",
    threads: int | None = 1,
) -> ConsistencyReport:
    """Permutation test of replicate clustering per (group, experiment).

    The table should already be TVN-normalized.  Null statistics for a group
    of ``n`` wells are computed from ``n`` wells drawn without replacement
    from every eligible well of the same experiment.
    """
    if len(table) == 0:
        raise ValueError("empty table")
    keys = _group_keys(table.meta, group_by)
    eligible = single_perturbation_mask(table)
    exps = table.meta["experiment_id"].to_numpy()

    units = []
    pools = {}
    for exp in sorted(set(exps[eligible])):
        pool_rows = np.flatnonzero(eligible & (exps == exp))
        unit = stats.unit_rows(table.embeddings[pool_rows])
        pools[exp] = unit
        local = keys[pool_rows]
        grouped: dict[str, list[int]] = {}
        for pos, key in enumerate(local):
            if key is not None:
                grouped.setdefault(key, []).append(pos)
        for key in sorted(grouped):
            units.append((exp, key, np.asarray(grouped[key])))

    def run(unit):
        exp, key, members = unit
        pool = pools[exp]
        n = len(members)
        if n < 2:
            return SkippedUnit(key, exp, n, "fewer_than_2_replicates")
        if pool.shape[0] < n:
            return SkippedUnit(key, exp, n, "null_pool_smaller_than_group")
        observed = stats.mean_pairwise_similarity(pool[members])
        rng = stats.substream(cfg.seed, "consistency", exp, key)
        idx = stats.draw_without_replacement(rng, pool.shape[0], n, cfg.K)
        null = stats.mean_pairwise_similarity_batch(pool, idx)
        return ExperimentEntry(exp, n, observed, stats.permutation_pvalue(observed, null)), key

    outputs = pmap(run, units, threads)
    entries: dict[str, list[ExperimentEntry]] = {}
    skipped = []
    for out in outputs:
        if isinstance(out, SkippedUnit):
            skipped.append(out)
            continue
        entry, key = out
        entries.setdefault(key, []).append(entry)
    results = []
    for key in sorted(entries):
        es = tuple(sorted(entries[key], key=lambda e: e.experiment_id))
        results.append(ConsistencyResult(key, es, stats.cauchy_combine([e.p_value for e in es])))
    if skipped:
        log.info("perturbation consistency skipped %d units", len(skipped))
    return ConsistencyReport(results, skipped)


# --------------------------------------------------------------------------
# Replicate consistency


@dataclass(frozen=True)
class ReplicatePairResult:
    experiment_a: str
    experiment_b: str
    n_matched: int
    ks: float
    cvm: float
    seed_used: int


@dataclass(frozen=True)
class ReplicateReport:
    per_pair: list[ReplicatePairResult]
    median_ks: float
    median_cvm: float


def representative_wells(table: EmbeddingTable, experiment: str, include_controls: bool = False) -> dict:
    """Map ``(perturbation_id, concentration)`` to the row index of the well
    with the lexicographically first well_position (ties by well_id)."""
    meta = table.meta
    rows = meta["experiment_id"].to_numpy() == experiment
    if not include_controls:
        rows &= ~np.isin(meta["perturbation_type"].to_numpy(), list(CONTROL_TYPES))
    sub = meta.loc[rows, ["perturbation_id", "concentration", "well_position", "well_id"]]
    sub = sub.assign(_row=np.flatnonzero(rows))
    sub = sub.sort_values(["well_position", "well_id"], kind="stable")
    reps = {}
    for pid, conc, row in zip(sub["perturbation_id"], sub["concentration"], sub["_row"]):
        key = condition_key(pid, float(conc))
        reps.setdefault(key, int(row))
    return reps


def replicate_pair(
    table: EmbeddingTable,
    experiment_a: str,
    experiment_b: str,
    cfg: PermutationConfig,
    include_controls: bool = False,
) -> ReplicatePairResult:
    reps_a = representative_wells(table, experiment_a, include_controls)
    reps_b = representative_wells(table, experiment_b, include_controls)
    matched = sorted(set(reps_a) & set(reps_b))
    n = len(matched)
    if n == 0:
        raise ValueError(f"no matching perturbations between {experiment_a!r} and {experiment_b!r}")
    if n < 2:
        raise ValueError(
            f"null pool ({n * (n - 1)} non-matching pairs) smaller than N={n} "
            f"for {experiment_a!r}/{experiment_b!r}"
        )
    a = stats.unit_rows(table.embeddings[[reps_a[k] for k in matched]])
    b = stats.unit_rows(table.embeddings[[reps_b[k] for k in matched]])
    query = np.clip(np.einsum("ij,ij->i", a, b), -1.0, 1.0)
    rng = stats.substream(cfg.seed, "replicate", experiment_a, experiment_b)
    flat = rng.choice(n * (n - 1), size=n, replace=False)
    i = flat // (n - 1)
    r = flat % (n - 1)
    j = np.where(r < i, r, r + 1)
    null = np.clip(np.einsum("ij,ij->i", a[i], b[j]), -1.0, 1.0)
    return ReplicatePairResult(
        experiment_a,
        experiment_b,
        n,
        stats.ks_two_sample(query, null),
        stats.cvm_two_sample(query, null),
        cfg.seed,
    )


def replicate_consistency(
    table: EmbeddingTable,
    pairs: Sequence[tuple[str, str]],
    cfg: PermutationConfig,
    threads: int | None = 1,
    include_controls: bool = False,
) -> ReplicateReport:
    if not pairs:
        raise ValueError("no replicate experiment pairs given")
    per_pair = pmap(lambda p: replicate_pair(table, p[0], p[1], cfg, include_controls), list(pairs), threads)
    return ReplicateReport(
        per_pair,
        float(np.median([p.ks for p in per_pair])),
        float(np.median([p.cvm for p in per_pair])),
    )


# --------------------------------------------------------------------------
# Relationship recall


def aggregate_gene_embeddings(table: EmbeddingTable, return_excluded: bool = False):
    """Spherical mean of all wells of each gene across experiments.

    Only genetic perturbation rows contribute.  Genes whose mean degenerates
    to zero norm are excluded with a warning.
    """
    meta = table.meta
    rows = np.flatnonzero(np.isin(meta["perturbation_type"].to_numpy(), list(GENETIC_TYPES)))
    genes_per_row = meta["gene_id"].to_numpy()[rows]
    unit = stats.unit_rows(table.embeddings[rows]) if len(rows) else np.zeros((0, table.dim))
    genes, inverse = np.unique(genes_per_row.astype(str), return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    starts = np.searchsorted(inverse[order], np.arange(len(genes)))
    sums = np.add.reduceat(unit[order], starts, axis=0) if len(rows) else np.zeros((0, table.dim))
    norms = np.linalg.norm(sums, axis=1)
    counts = np.bincount(inverse, minlength=len(genes))
    # the spherical mean divides by the count first; compare that norm to the epsilon
    ok = norms / np.maximum(counts, 1) >= stats.NORM_EPS
    excluded = [str(g) for g in genes[~ok]]
    if excluded:
        log.warning("excluded %d genes with degenerate spherical mean: %s", len(excluded), excluded[:10])
    agg = GeneAggregateSet(tuple(str(g) for g in genes[ok]), sums[ok] / norms[ok, None])
    return (agg, excluded) if return_excluded else agg


@dataclass(frozen=True)
class RecallReport:
    database_name: str
    n_known_pairs_in_universe: int
    n_recalled: int
    recall: float | None
    low_pct: float
    high_pct: float
    universe_size_genes: int
    threshold_low: float
    threshold_high: float


DEFAULT_TILE = 2048
N_BINS = 4096
_BIN_CAP = 4_000_000


def _tile_grid(n: int, tile: int) -> list[tuple[int, int]]:
    starts = range(0, n, tile)
    return [(i, j) for i in starts for j in starts if j >= i]


def _tile_values(x: np.ndarray, i0: int, j0: int, tile: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Similarity block and, for diagonal tiles, the strict-upper mask."""
    s = x[i0 : i0 + tile] @ x[j0 : j0 + tile].T
    np.clip(s, -1.0, 1.0, out=s)
    if i0 == j0:
        return s, np.triu(np.ones(s.shape, dtype=bool), k=1)
    return s, None


def pairwise_similarity_matrix(
    aggregates: GeneAggregateSet, tile: int = DEFAULT_TILE
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Stream ``(i, j, similarity)`` arrays over every unordered gene pair.

    Pairs are produced tile by tile with ``i < j``; the full matrix is never
    materialized.
    """
    x = aggregates.vectors
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 genes")
    for i0, j0 in _tile_grid(n, tile):
        s, mask = _tile_values(x, i0, j0, tile)
        if mask is None:
            ii, jj = np.indices(s.shape)
            yield (ii.ravel() + i0, jj.ravel() + j0, s.ravel())
        else:
            ii, jj = np.nonzero(mask)
            yield ii + i0, jj + j0, s[mask]


def _bin_index(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    idx = np.floor((values - lo) * (N_BINS / (hi - lo))).astype(np.int64)
    return np.clip(idx, 0, N_BINS - 1)


def _select(values: np.ndarray, path: tuple) -> np.ndarray:
    """Values lying in the nested bins ``path`` = ((lo, hi, bin), ...)."""
    for lo, hi, k in path:
        values = values[_bin_index(values, lo, hi) == k]
    return values


class _PairScanner:
    """Repeated tile passes over all pairs of one aggregate matrix."""

    def __init__(self, x: np.ndarray, tile: int, threads: int | None):
        self.x = x
        self.tile = tile
        self.threads = threads
        self.grid = _tile_grid(x.shape[0], tile)

    def map(self, fn, grid=None):
        def one(ij):
            s, mask = _tile_values(self.x, ij[0], ij[1], self.tile)
            return fn(ij, s[mask] if mask is not None else s.ravel(), s)

        return pmap(one, self.grid if grid is None else grid, self.threads)

    def histogram(self, path: tuple, lo: float, hi: float) -> np.ndarray:
        def fn(_, v, __):
            return np.bincount(_bin_index(_select(v, path), lo, hi), minlength=N_BINS)

        return np.sum(self.map(fn), axis=0)

    def gather(self, path: tuple, lo: float, hi: float, bins) -> dict[int, np.ndarray]:
        wanted = np.array(sorted(bins))

        def fn(_, v, __):
            v = _select(v, path)
            b = _bin_index(v, lo, hi)
            keep = np.isin(b, wanted)
            return v[keep], b[keep]

        parts = self.map(fn)
        vals = np.concatenate([p[0] for p in parts])
        bs = np.concatenate([p[1] for p in parts])
        return {int(k): np.sort(vals[bs == k]) for k in wanted}

    def value_counts(self, path: tuple) -> tuple[np.ndarray, np.ndarray]:
        """Distinct values and their counts inside a (very narrow) bin."""

        def fn(_, v, __):
            return np.unique(_select(v, path), return_counts=True)

        parts = self.map(fn)
        vals = np.concatenate([p[0] for p in parts])
        counts = np.concatenate([p[1] for p in parts])
        uniq, inv = np.unique(vals, return_inverse=True)
        return uniq, np.bincount(inv, weights=counts).astype(np.int64)


def _order_statistics(scanner: _PairScanner, ranks: list[int]) -> dict[int, float]:
    """Exact k-th smallest pair similarities (0-based ranks).

    A 4096-bin histogram over [-1, 1] locates each rank's bin and a second
    pass gathers that bin's values.  Bins too large to gather are refined
    by histogramming again inside the bin.  A bin narrower than float
    resolution is resolved by counting its distinct values.
    """
    out: dict[int, float] = {}
    pending = [((), -1.0, 1.0, r, r) for r in sorted(set(ranks))]
    collapsed = []
    for _depth in range(8):
        if not pending:
            break
        groups: dict[tuple, list] = {}
        for path, lo, hi, rank, local in pending:
            groups.setdefault((path, lo, hi), []).append((rank, local))
        pending = []
        for (path, lo, hi), items in groups.items():
            counts = scanner.histogram(path, lo, hi)
            cum = np.cumsum(counts)
            width = (hi - lo) / N_BINS
            located = []
            for rank, local in items:
                k = int(np.searchsorted(cum, local, side="right"))
                located.append((rank, k, local - (int(cum[k - 1]) if k else 0)))
            small = {k for _, k, _ in located if counts[k] <= _BIN_CAP}
            gathered = scanner.gather(path, lo, hi, small) if small else {}
            for rank, k, within in located:
                sub_lo, sub_hi = lo + k * width, lo + (k + 1) * width
                if k in gathered:
                    out[rank] = float(gathered[k][within])
                elif sub_lo + (sub_hi - sub_lo) / N_BINS <= sub_lo:
                    # bin spans only a few floats; count its distinct values
                    collapsed.append((path + ((lo, hi, k),), rank, within))
                else:
                    pending.append((path + ((lo, hi, k),), sub_lo, sub_hi, rank, within))
    collapsed += [(path, rank, local) for path, _lo, _hi, rank, local in pending]
    for path, rank, local in collapsed:
        vals, counts = scanner.value_counts(path)
        out[rank] = float(vals[np.searchsorted(np.cumsum(counts), local, side="right")])
    return out


def _quantile_ranks(n_pairs: int, q: float) -> tuple[int, int, float]:
    h = (n_pairs - 1) * q
    lo = int(math.floor(h))
    return lo, min(lo + 1, n_pairs - 1), h - lo


def similarity_thresholds(
    aggregates: GeneAggregateSet,
    low_pct: float = 0.05,
    high_pct: float = 0.95,
    tile: int = DEFAULT_TILE,
    threads: int | None = 1,
) -> tuple[float, float]:
    """Linear-interpolation quantiles of all unordered pair similarities."""
    scanner = _PairScanner(aggregates.vectors, tile, threads)
    return _thresholds(scanner, len(aggregates), low_pct, high_pct)


def _thresholds(scanner: _PairScanner, n_genes: int, low_pct: float, high_pct: float) -> tuple[float, float]:
    n_pairs = n_genes * (n_genes - 1) // 2
    lo_a, lo_b, lo_f = _quantile_ranks(n_pairs, low_pct)
    hi_a, hi_b, hi_f = _quantile_ranks(n_pairs, high_pct)
    vals = _order_statistics(scanner, [lo_a, lo_b, hi_a, hi_b])
    t_low = vals[lo_a] + lo_f * (vals[lo_b] - vals[lo_a])
    t_high = vals[hi_a] + hi_f * (vals[hi_b] - vals[hi_a])
    return float(t_low), float(t_high)


def relationship_recall(
    aggregates: GeneAggregateSet,
    db: RelationshipDB,
    low_pct: float = 0.05,
    high_pct: float = 0.95,
    tile: int = DEFAULT_TILE,
    threads: int | None = 1,
) -> RecallReport:
    """Fraction of known pairs whose similarity lies in either tail of the
    all-pairs similarity distribution."""
    n = len(aggregates)
    if n < 2:
        raise ValueError("relationship recall needs >= 2 genes")
    if not 0 <= low_pct <= high_pct <= 1:
        raise ValueError("need 0 <= low_pct <= high_pct <= 1")
    scanner = _PairScanner(aggregates.vectors, tile, threads)
    t_low, t_high = _thresholds(scanner, n, low_pct, high_pct)

    index = {g: i for i, g in enumerate(aggregates.genes)}
    known = []
    for a, b in db.pairs:
        if a in index and b in index:
            i, j = sorted((index[a], index[b]))
            known.append((i, j))
    known.sort()
    if not known:
        log.warning("no pair of %r has both genes in the universe; recall undefined", db.name)
        return RecallReport(db.name, 0, 0, None, low_pct, high_pct, n, t_low, t_high)

    # known-pair similarities are read from the same tiles that set the thresholds
    kp = np.asarray(known)
    tile_of = (kp[:, 0] // tile, kp[:, 1] // tile)
    by_tile: dict[tuple[int, int], np.ndarray] = {}
    for t in sorted(set(zip(tile_of[0].tolist(), tile_of[1].tolist()))):
        sel = (tile_of[0] == t[0]) & (tile_of[1] == t[1])
        by_tile[(t[0] * tile, t[1] * tile)] = kp[sel]

    def fn(ij, _v, s):
        pairs = by_tile[ij]
        return s[pairs[:, 0] - ij[0], pairs[:, 1] - ij[1]]

    sims = np.concatenate(scanner.map(fn, grid=sorted(by_tile)))
    recalled = int(np.count_nonzero((sims <= t_low) | (sims >= t_high)))
    return RecallReport(db.name, len(known), recalled, recalled / len(known), low_pct, high_pct, n, t_low, t_high)
