import itertools

import numpy as np
import pytest

from hcsbench import benchmarks as bm
from hcsbench import stats
from hcsbench.data import GeneAggregateSet, RelationshipDB
from hcsbench.normalize import tvn_by_experiment
from hcsbench.stats import PermutationConfig
from hcsbench.synth import SynthConfig, generate_screen

from conftest import make_table


def _agg(x, prefix="G"):
    x = np.asarray(x, dtype=float)
    return GeneAggregateSet(tuple(f"{prefix}{i:05d}" for i in range(len(x))), stats.unit_rows(x))


def naive_pairs(x):
    n = len(x)
    return {(i, j): float(np.dot(x[i], x[j])) for i in range(n) for j in range(i + 1, n)}


def naive_recall(agg, db, low=0.05, high=0.95):
    sims = naive_pairs(agg.vectors)
    vals = np.sort(np.fromiter(sims.values(), float))
    t_lo, t_hi = np.quantile(vals, low), np.quantile(vals, high)
    index = {g: i for i, g in enumerate(agg.genes)}
    known = [tuple(sorted((index[a], index[b]))) for a, b in db.pairs if a in index and b in index]
    hit = sum(1 for k in known if sims[k] <= t_lo or sims[k] >= t_hi)
    return hit / len(known), t_lo, t_hi


# ---- perturbation consistency ---------------------------------------------


def _planted_experiment(rng, n_group=6, n_noise=300, d=32, signal=True):
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    noise = rng.standard_normal((n_noise, d))
    group = (3.0 * direction if signal else 0) + rng.standard_normal((n_group, d)) * (0.3 if signal else 1)
    x = np.vstack([group, noise])
    genes = ["GX"] * n_group + [f"N{i}" for i in range(n_noise)]
    return make_table(x, genes=genes, perturbations=[f"{g}_g0" for g in genes])


def test_planted_group_has_minimal_p(rng):
    t = _planted_experiment(rng)
    cfg = PermutationConfig(K=999, seed=1)
    res = bm.perturbation_consistency(t, cfg, "gene").by_id()
    assert res["GX"].combined_p <= 2 / cfg.K
    assert res["GX"].entries[0].p_value == 1 / 999


def test_single_experiment_combined_equals_p(rng):
    t = _planted_experiment(rng, signal=False)
    res = bm.perturbation_consistency(t, PermutationConfig(199, 3), "gene").by_id()["GX"]
    assert res.combined_p == pytest.approx(res.entries[0].p_value, rel=1e-12)


def test_null_group_pvalue_mean(rng):
    # group drawn from the same distribution as the pool: p-values average 1/2
    ps = []
    for seed in range(300):
        r = np.random.default_rng(seed)
        genes = ["GX"] * 4 + [f"N{i}" for i in range(56)]
        t = make_table(r.standard_normal((60, 8)), genes=genes, perturbations=[f"{g}_g0" for g in genes])
        ps.append(bm.perturbation_consistency(t, PermutationConfig(199, seed), "gene").by_id()["GX"].combined_p)
    assert 0.45 <= np.mean(ps) <= 0.55


def test_consistency_matches_direct_oracle(rng):
    # rebuild the statistic and null from the documented sub-stream by hand
    t = _planted_experiment(rng, n_group=5, n_noise=40, d=6, signal=False)
    cfg = PermutationConfig(K=50, seed=9)
    entry = bm.perturbation_consistency(t, cfg, "gene").by_id()["GX"].entries[0]
    unit = stats.unit_rows(t.embeddings)
    obs = np.mean([[u @ v for v in unit[:5]] for u in unit[:5]])
    idx = stats.draw_without_replacement(stats.substream(9, "consistency", "E0", "GX"), len(unit), 5, 50)
    null = [np.mean([[unit[a] @ unit[b] for b in row] for a in row]) for row in idx]
    assert entry.s_bar == pytest.approx(obs, abs=1e-12)
    assert entry.p_value == max(sum(v >= obs - 1e-15 for v in null), 1) / 50


def test_consistency_grouping_and_skips():
    x = np.random.default_rng(0).standard_normal((7, 4))
    t = make_table(
        x,
        types=["gene_knockout_guide"] * 3 + ["compound"] * 3 + ["negative_control"],
        genes=["A", "A", "B", None, None, None, None],
        perturbations=["A_g0", "A_g1", "B_g0", "cpd", "cpd", "cpd", "neg"],
        perturbation_count=["1", "1", "1", "1", "1", "2", "1"],
    )
    cfg = PermutationConfig(20, 0)
    by_guide = bm.perturbation_consistency(t, cfg, "guide")
    assert by_guide.results == [] and {s.perturbation_id for s in by_guide.skipped} == {"A_g0", "A_g1", "B_g0"}
    by_gene = bm.perturbation_consistency(t, cfg, "gene")
    assert [r.perturbation_id for r in by_gene.results] == ["A"]
    meta = t.meta.copy()
    meta["concentration"] = [np.nan] * 3 + [1.0, 1.0, 1.0] + [np.nan]
    t2 = type(t)(meta, t.embeddings)
    by_cpd = bm.perturbation_consistency(t2, cfg, "compound_concentration")
    # the two-perturbation well is excluded, leaving 2 single wells
    assert [r.perturbation_id for r in by_cpd.results] == ["cpd@1.0"]
    assert by_cpd.results[0].entries[0].n_replicates == 2
    with pytest.raises(ValueError):
        bm.perturbation_consistency(t, cfg, "plate")


def test_consistency_thread_independent():
    t, _ = generate_screen(SynthConfig(n_genes=30, n_related_groups=3, n_neg_controls_per_experiment=20, seed=2))
    cfg = PermutationConfig(99, 5)
    a = bm.perturbation_consistency(t, cfg, "guide", threads=1)
    b = bm.perturbation_consistency(t, cfg, "guide", threads=8)
    assert a == b


# ---- replicate consistency --------------------------------------------------


def _replicate_table(rng, n=100, d=64, identical=True):
    base = rng.standard_normal((n, d))
    other = base if identical else rng.standard_normal((n, d))
    x = np.vstack([base, other])
    perts = [f"p{i}" for i in range(n)] * 2
    return make_table(
        x,
        experiments=["A"] * n + ["B"] * n,
        genes=[f"G{i}" for i in range(n)] * 2,
        perturbations=perts,
        positions=[f"W{i:03d}" for i in range(n)] * 2,
    )


def test_replicate_identical_matches(rng):
    t = _replicate_table(rng)
    res = bm.replicate_consistency(t, [("A", "B")], PermutationConfig(seed=0))
    assert res.per_pair[0].n_matched == 100
    assert res.median_ks >= 0.95


def test_replicate_pure_noise(rng):
    kss = []
    for seed in range(20):
        t = _replicate_table(np.random.default_rng(seed), identical=False)
        kss.append(bm.replicate_consistency(t, [("A", "B")], PermutationConfig(seed=seed)).median_ks)
    assert np.median(kss) < 2 / np.sqrt(100)


def test_replicate_pair_twice_identical(rng):
    t = _replicate_table(rng, identical=False)
    res = bm.replicate_consistency(t, [("A", "B"), ("A", "B")], PermutationConfig(seed=4), threads=2)
    assert res.per_pair[0] == res.per_pair[1]


def test_replicate_null_oracle(rng):
    t = _replicate_table(rng, n=12, d=5, identical=False)
    r = bm.replicate_pair(t, "A", "B", PermutationConfig(seed=3))
    a, b = stats.unit_rows(t.embeddings[:12]), stats.unit_rows(t.embeddings[12:])
    # matched keys sort as strings: p0, p1, p10, p11, p2, ...
    order = sorted(range(12), key=lambda i: f"p{i}")
    a, b = a[order], b[order]
    query = [a[i] @ b[i] for i in range(12)]
    pairs = [(i, j) for i in range(12) for j in range(12) if i != j]
    chosen = stats.substream(3, "replicate", "A", "B").choice(len(pairs), 12, replace=False)
    null = [a[pairs[k][0]] @ b[pairs[k][1]] for k in chosen]
    assert r.ks == stats.ks_two_sample(query, null)
    assert r.cvm == pytest.approx(stats.cvm_two_sample(query, null), abs=1e-12)


def test_representative_well_is_first_position():
    x = np.eye(4)
    t = make_table(
        x,
        experiments=["A", "A", "B", "B"],
        genes=["G", "G", "G", "H"],
        perturbations=["p", "p", "p", "q"],
        positions=["B02", "A05", "C01", "A01"],
    )
    assert bm.representative_wells(t, "A") == {"p": 1}


def test_replicate_errors(rng):
    t = make_table(np.eye(3), experiments=["A", "B", "B"], perturbations=["x", "y", "z"])
    with pytest.raises(ValueError, match="no matching"):
        bm.replicate_pair(t, "A", "B", PermutationConfig())
    t = make_table(np.eye(2), experiments=["A", "B"], perturbations=["x", "x"], genes=["G", "G"])
    with pytest.raises(ValueError, match="null pool"):
        bm.replicate_pair(t, "A", "B", PermutationConfig())
    with pytest.raises(ValueError):
        bm.replicate_consistency(t, [], PermutationConfig())


# ---- aggregation and recall ---------------------------------------------------


def test_aggregate_single_well():
    t = make_table([[3.0, 4.0]], genes=["A"])
    agg = bm.aggregate_gene_embeddings(t)
    np.testing.assert_allclose(agg.vectors, [[0.6, 0.8]])


def test_aggregate_symmetric_pair():
    t = make_table([[1.0, 0.0], [0.0, 2.0]], genes=["A", "A"])
    np.testing.assert_allclose(bm.aggregate_gene_embeddings(t).vectors, [[np.sqrt(0.5)] * 2], atol=1e-15)


def test_aggregate_oracle_and_exclusion(rng):
    x = rng.standard_normal((120, 7))
    genes = [f"G{i % 10}" for i in range(120)]
    x = np.vstack([x, [[1, 0, 0, 0, 0, 0, 0], [-1, 0, 0, 0, 0, 0, 0]], np.ones((1, 7))])
    genes += ["Z", "Z", "ctl"]
    types = ["gene_knockout_guide"] * 122 + ["negative_control"]
    t = make_table(x, genes=genes, types=types)
    agg, excluded = bm.aggregate_gene_embeddings(t, return_excluded=True)
    assert excluded == ["Z"]
    assert agg.genes == tuple(f"G{i}" for i in range(10))
    for g, v in agg.as_dict().items():
        rows = [i for i, h in enumerate(genes) if h == g]
        np.testing.assert_allclose(v, stats.spherical_mean(x[rows]), atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(agg.vectors, axis=1), 1, atol=1e-6)


def test_pairwise_three_genes():
    agg = _agg(np.eye(3))
    pairs = [p for i, j, s in bm.pairwise_similarity_matrix(agg) for p in zip(i, j)]
    assert sorted(pairs) == [(0, 1), (0, 2), (1, 2)]


@pytest.mark.parametrize("tile", [7, 16, 2048])
def test_pairwise_matches_naive(rng, tile):
    agg = _agg(rng.standard_normal((100, 9)))
    naive = naive_pairs(agg.vectors)
    seen = {}
    for i, j, s in bm.pairwise_similarity_matrix(agg, tile=tile):
        seen.update({(a, b): v for a, b, v in zip(i.tolist(), j.tolist(), s.tolist())})
    assert seen.keys() == naive.keys()
    assert max(abs(seen[k] - naive[k]) for k in naive) < 1e-6


def test_pairwise_identical_vectors():
    agg = _agg(np.ones((5, 3)))
    vals = np.concatenate([s for _, _, s in bm.pairwise_similarity_matrix(agg)])
    np.testing.assert_allclose(vals, 1.0)


@pytest.mark.parametrize("cap", [10, 1000, bm._BIN_CAP])
@pytest.mark.parametrize("q", [(0.05, 0.95), (0.0, 1.0), (0.3, 0.31)])
def test_thresholds_exact(rng, monkeypatch, cap, q):
    monkeypatch.setattr(bm, "_BIN_CAP", cap)
    agg = _agg(rng.standard_normal((80, 3)))
    vals = np.fromiter(naive_pairs(agg.vectors).values(), float)
    lo, hi = bm.similarity_thresholds(agg, *q, tile=13)
    assert lo == pytest.approx(np.quantile(vals, q[0]), abs=1e-12)
    assert hi == pytest.approx(np.quantile(vals, q[1]), abs=1e-12)


def test_thresholds_with_massive_ties(monkeypatch):
    monkeypatch.setattr(bm, "_BIN_CAP", 5)
    x = np.vstack([np.tile([1.0, 0.0], (30, 1)), np.tile([0.0, 1.0], (3, 1))])
    agg = _agg(x)
    vals = np.fromiter(naive_pairs(agg.vectors).values(), float)
    lo, hi = bm.similarity_thresholds(agg, 0.05, 0.95)
    assert lo == pytest.approx(np.quantile(vals, 0.05), abs=1e-12)
    assert hi == pytest.approx(np.quantile(vals, 0.95), abs=1e-12)


def test_recall_top5_is_full(rng):
    agg = _agg(rng.standard_normal((60, 5)))
    sims = naive_pairs(agg.vectors)
    t_hi = np.quantile(list(sims.values()), 0.95)
    top = [(agg.genes[i], agg.genes[j]) for (i, j), s in sims.items() if s >= t_hi]
    rep = bm.relationship_recall(agg, RelationshipDB.from_pairs("top", top))
    assert rep.recall == 1.0 and rep.n_known_pairs_in_universe == len(top)


def test_recall_matches_naive(rng):
    agg = _agg(rng.standard_normal((150, 6)))
    pairs = [(agg.genes[i], agg.genes[j]) for i, j in itertools.combinations(range(150), 2) if rng.random() < 0.05]
    pairs += [("G00001", "NOTINUNIVERSE")]
    db = RelationshipDB.from_pairs("rand", pairs)
    rep = bm.relationship_recall(agg, db, tile=32, threads=3)
    recall, lo, hi = naive_recall(agg, db)
    assert rep.n_known_pairs_in_universe == len(pairs) - 1
    assert rep.recall == recall
    assert rep.threshold_low == pytest.approx(lo, abs=1e-12)
    assert rep.threshold_high == pytest.approx(hi, abs=1e-12)
    assert rep.recall == rep.n_recalled / rep.n_known_pairs_in_universe


def test_recall_order_invariant(rng):
    x = rng.standard_normal((90, 4))
    agg = _agg(x)
    perm = rng.permutation(90)
    shuffled = GeneAggregateSet(tuple(agg.genes[i] for i in perm), agg.vectors[perm])
    pairs = [(agg.genes[i], agg.genes[j]) for i, j in rng.integers(0, 90, (200, 2)) if i != j]
    db = RelationshipDB.from_pairs("r", pairs)
    a = bm.relationship_recall(agg, db, tile=16)
    b = bm.relationship_recall(shuffled, db, tile=16)
    assert a.n_recalled == b.n_recalled and a.threshold_high == b.threshold_high


def test_recall_undefined_and_errors(rng):
    agg = _agg(rng.standard_normal((5, 3)))
    rep = bm.relationship_recall(agg, RelationshipDB.from_pairs("x", [("Q", "R")]))
    assert rep.recall is None and rep.n_known_pairs_in_universe == 0
    with pytest.raises(ValueError):
        bm.relationship_recall(_agg(np.ones((1, 3))), RelationshipDB.from_pairs("x", []))


def test_threshold_tail_fraction(rng):
    agg = _agg(rng.standard_normal((70, 3)))
    vals = np.fromiter(naive_pairs(agg.vectors).values(), float)
    _, hi = bm.similarity_thresholds(agg, 0.05, 0.95)
    assert np.mean(vals > hi) <= 0.05 + 1 / vals.size


def test_default_synth_planted_recall():
    t, truth = generate_screen(SynthConfig(seed=0))
    normed, _ = tvn_by_experiment(t)
    rep = bm.relationship_recall(bm.aggregate_gene_embeddings(normed), truth.relationship_db())
    assert rep.recall >= 0.9
