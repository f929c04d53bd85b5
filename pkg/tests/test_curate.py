import math

import pytest

from hcsbench.benchmarks import ConsistencyResult
from hcsbench.curate import (
    STEPS,
    CurationConfig,
    condition_support,
    curate_pipeline,
    step1_quality_filter,
    step2_metadata_filter,
    step3_replication_filter,
    step4_undersample,
    step5_phenoprint_filter,
)
from hcsbench.data import DatasetManifest
from hcsbench.synth import QUALITY_FLAGS, generate_manifest, stratum_selection


def manifest(rows, flags=("qc",)):
    recs = []
    for i, r in enumerate(rows):
        conds = tuple(r.get("conds", ("C1",)))
        recs.append(
            dict(
                well_id=r.get("well_id", f"w{i:05d}"),
                experiment_id=r.get("exp", "E0"),
                perturbation_ids=conds,
                perturbation_type=r.get("type", "gene_knockout_guide"),
                perturbation_count=r.get("count", len(conds)),
                image_shape_tag=r.get("shape", "standard"),
                flags={f: r.get(f, True) for f in flags},
            )
        )
    return DatasetManifest.from_records(recs, flags=flags)


CFG = CurationConfig(required_quality_flags=("qc",))


# ---- step 1 --------------------------------------------------------------------


def test_quality_all_true():
    m = manifest([{}, {}])
    assert len(step1_quality_filter(m, CFG)) == 2


def test_quality_one_failing():
    m = manifest([{}, {"qc": False}, {}])
    assert step1_quality_filter(m, CFG).well_ids == ["w00000", "w00002"]


def test_quality_random_and_oracle(rng):
    flags = ("a", "b", "c")
    mat = rng.random((200, 3)) < 0.8
    m = manifest([dict(zip(flags, row.tolist())) for row in mat], flags=flags)
    cfg = CurationConfig(required_quality_flags=("a", "c"))
    kept = step1_quality_filter(m, cfg).well_ids
    expect = [f"w{i:05d}" for i in range(200) if mat[i, 0] and mat[i, 2]]
    assert kept == expect


def test_quality_missing_flag():
    with pytest.raises(KeyError):
        step1_quality_filter(manifest([{}]), CurationConfig(required_quality_flags=("zzz",)))


# ---- step 2 --------------------------------------------------------------------


def test_metadata_four_perturbations():
    m = manifest([{"conds": ("a", "b", "c", "d")}, {"conds": ("a", "b", "c")}])
    assert step2_metadata_filter(m, CFG).well_ids == ["w00001"]


def test_metadata_empty_perturbation():
    m = manifest([{"conds": ()}, {"conds": (), "type": "unperturbed"}, {}])
    assert step2_metadata_filter(m, CFG).well_ids == ["w00001", "w00002"]


def test_metadata_conforming_unchanged():
    m = manifest([{}, {"conds": ("x", "y")}])
    assert len(step2_metadata_filter(m, CFG)) == 2


def test_metadata_shape_tags():
    m = manifest([{"shape": "standard"}, {"shape": "unusual"}, {"shape": ""}])
    assert step2_metadata_filter(m, CFG).well_ids == ["w00000", "w00001"]
    cfg = CurationConfig(accepted_shape_tags=("standard",))
    assert step2_metadata_filter(m, cfg).well_ids == ["w00000"]


# ---- step 3 --------------------------------------------------------------------


def test_replication_two_experiments_dropped():
    m = manifest([{"exp": f"E{i % 2}", "conds": ("X",)} for i in range(50)])
    assert len(step3_replication_filter(m, CFG)) == 0


def test_replication_boundary_kept():
    m = manifest([{"exp": f"E{i % 3}", "conds": ("X",)} for i in range(20)])
    assert len(step3_replication_filter(m, CFG)) == 20
    m = manifest([{"exp": f"E{i % 3}", "conds": ("X",)} for i in range(19)])
    assert len(step3_replication_filter(m, CFG)) == 0


def test_replication_counting_oracle(rng):
    rows = []
    for i in range(600):
        k = int(rng.integers(1, 3))
        rows.append({"exp": f"E{rng.integers(5)}", "conds": tuple(f"C{c}" for c in rng.choice(30, k, replace=False))})
    m = manifest(rows)
    exps, wells = {}, {}
    for r in rows:
        for c in r["conds"]:
            exps.setdefault(c, set()).add(r["exp"])
            wells[c] = wells.get(c, 0) + 1
    assert condition_support(m) == {c: (len(exps[c]), wells[c]) for c in exps}
    bad = {c for c in exps if len(exps[c]) < 3 or wells[c] < 20}
    expect = [f"w{i:05d}" for i, r in enumerate(rows) if not set(r["conds"]) & bad]
    assert step3_replication_filter(m, CFG).well_ids == expect


# ---- step 4 --------------------------------------------------------------------


def test_undersample_exact_count():
    m = manifest([{"type": "negative_control", "conds": ("NEG",)} for _ in range(100)])
    assert len(step4_undersample(m, CFG)) == 30


def test_undersample_no_positive_controls_noop():
    m = manifest([{}] * 5)
    assert len(step4_undersample(m, CFG)) == 5


def test_undersample_deterministic_and_matches_rule():
    rows = [{"type": t, "exp": f"E{i % 2}", "conds": () if t == "unperturbed" else (t,)}
            for i, t in enumerate(["positive_control"] * 33 + ["negative_control"] * 41 + ["unperturbed"] * 17)]
    m = manifest(rows)
    a = step4_undersample(m, CFG).well_ids
    assert a == step4_undersample(m, CFG).well_ids
    expect = set()
    for t, rate in (("positive_control", 0.1), ("negative_control", 0.3), ("unperturbed", 0.1)):
        for e in ("E0", "E1"):
            ids = [f"w{i:05d}" for i, r in enumerate(rows) if r["type"] == t and r["exp"] == e]
            chosen = stratum_selection(ids, rate, CFG.seed, t, e)
            assert len(chosen) == math.ceil(rate * len(ids))
            expect |= set(chosen)
    assert set(a) == expect
    other = step4_undersample(m, CurationConfig(seed=1)).well_ids
    assert other != a


# ---- step 5 --------------------------------------------------------------------


def _result(pid, p):
    return ConsistencyResult(pid, (), p)


def test_phenoprint_either_model():
    m = manifest([{"conds": ("A",)}, {"conds": ("B",)}])
    results = [("mae", [_result("A", 0.005), _result("B", 0.02)]), ("wsl", [_result("A", 0.5), _result("B", 0.02)])]
    assert step5_phenoprint_filter(m, results, CFG).well_ids == ["w00000"]


def test_phenoprint_any_condition():
    m = manifest([{"conds": ("A", "B")}])
    assert len(step5_phenoprint_filter(m, [("x", {"A": 0.9, "B": 0.001})], CFG)) == 1


def test_phenoprint_uncovered_counted():
    from hcsbench.curate import CurationReport

    m = manifest([{"conds": ("A",)}, {"conds": ("Z",)}])
    rep = CurationReport()
    out = step5_phenoprint_filter(m, [("x", {"A": 0.001})], CFG, rep)
    assert out.well_ids == ["w00000"]
    assert rep.notes == {"uncovered_conditions": 1, "wells_with_only_uncovered_conditions": 1}
    with pytest.raises(ValueError):
        step5_phenoprint_filter(m, [], CFG)


def test_phenoprint_threshold_monotone(rng):
    m = manifest([{"conds": (f"C{i}",)} for i in range(100)])
    pvals = {f"C{i}": float(rng.random()) for i in range(100)}
    prev = set()
    for thr in (0.01, 0.05, 0.2, 0.5, 0.9):
        kept = set(step5_phenoprint_filter(m, [("x", pvals)], CurationConfig(phenoprint_p_threshold=thr)).well_ids)
        assert prev <= kept
        prev = kept


# ---- pipeline ------------------------------------------------------------------


def test_pipeline_empty():
    out, rep = curate_pipeline(manifest([]), [("x", {})], CFG)
    assert len(out) == 0
    assert [s.step_name for s in rep.steps] == list(STEPS)
    assert all(s.rows_in == s.rows_out == s.rows_dropped == 0 for s in rep.steps)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pipeline_planted(seed):
    m, truth = generate_manifest(seed=seed)
    cfg = CurationConfig(required_quality_flags=QUALITY_FLAGS, accepted_shape_tags=("standard",), seed=seed)
    out, rep = curate_pipeline(m, truth.consistency, cfg)
    assert set(out.well_ids) == truth.kept_well_ids
    assert rep.steps[0].rows_in == len(m)
    assert rep.steps[0].rows_in == rep.steps[-1].rows_out + sum(s.rows_dropped for s in rep.steps)
    for a, b in zip(rep.steps, rep.steps[1:]):
        assert a.rows_out == b.rows_in
    again, rep2 = curate_pipeline(m, truth.consistency, cfg)
    assert again.well_ids == out.well_ids and rep2.to_dict() == rep.to_dict()


def test_config_validation():
    with pytest.raises(ValueError):
        CurationConfig(keep_rate_negative_controls=0)
    with pytest.raises(ValueError):
        CurationConfig(phenoprint_p_threshold=1.0)
    with pytest.raises(ValueError):
        CurationConfig(min_wells=0)
    d = CurationConfig(required_quality_flags=["a"]).to_dict()
    assert d["required_quality_flags"] == ["a"] and d["accepted_shape_tags"] is None
