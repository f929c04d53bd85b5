"""Five-step training-set curation over a dataset manifest."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Mapping, Sequence

import numpy as np

from .benchmarks import ConsistencyResult
from .data import DatasetManifest, PerturbationType
from .stats import substream

UNDERSAMPLED = (
    PerturbationType.POSITIVE_CONTROL.value,
    PerturbationType.NEGATIVE_CONTROL.value,
    PerturbationType.UNPERTURBED.value,
)


@dataclass(frozen=True)
class CurationConfig:
    required_quality_flags: tuple = ()
    max_perturbations_per_well: int = 3
    min_experiments: int = 3
    min_wells: int = 20
    keep_rate_positive_controls: float = 0.10
    keep_rate_negative_controls: float = 0.30
    keep_rate_unperturbed: float = 0.10
    phenoprint_p_threshold: float = 0.01
    seed: int = 0
    # None accepts any non-empty tag
    accepted_shape_tags: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "required_quality_flags", tuple(self.required_quality_flags))
        if self.accepted_shape_tags is not None:
            object.__setattr__(self, "accepted_shape_tags", tuple(self.accepted_shape_tags))
        for name in ("keep_rate_positive_controls", "keep_rate_negative_controls", "keep_rate_unperturbed"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in (0, 1]")
        if not 0 < self.phenoprint_p_threshold < 1:
            raise ValueError("phenoprint_p_threshold must be in (0, 1)")
        for name in ("max_perturbations_per_well", "min_experiments", "min_wells"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def keep_rate(self, category: str) -> float:
        return {
            PerturbationType.POSITIVE_CONTROL.value: self.keep_rate_positive_controls,
            PerturbationType.NEGATIVE_CONTROL.value: self.keep_rate_negative_controls,
            PerturbationType.UNPERTURBED.value: self.keep_rate_unperturbed,
        }[category]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["required_quality_flags"] = list(self.required_quality_flags)
        d["accepted_shape_tags"] = None if self.accepted_shape_tags is None else list(self.accepted_shape_tags)
        return d


@dataclass(frozen=True)
class StepRecord:
    step_name: str
    rows_in: int
    rows_out: int
    rows_dropped: int


@dataclass
class CurationReport:
    steps: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def record(self, name: str, before: DatasetManifest, after: DatasetManifest) -> None:
        self.steps.append(StepRecord(name, len(before), len(after), len(before) - len(after)))

    def to_dict(self) -> dict:
        return {"steps": [asdict(s) for s in self.steps], "notes": self.notes}


def step1_quality_filter(manifest: DatasetManifest, cfg: CurationConfig) -> DatasetManifest:
    missing = [f for f in cfg.required_quality_flags if f not in manifest.frame.columns]
    if missing:
        raise KeyError(f"manifest lacks quality flag columns {missing}")
    keep = np.ones(len(manifest), dtype=bool)
    for f in cfg.required_quality_flags:
        keep &= manifest.frame[f].to_numpy(dtype=bool)
    return manifest.subset(keep)


def _missing_info(frame) -> np.ndarray:
    ptype = frame["perturbation_type"].to_numpy()
    empty = frame["perturbation_ids"].map(len).to_numpy() == 0
    valid_types = {t.value for t in PerturbationType}
    unknown = ~np.isin(ptype, list(valid_types))
    return unknown | (empty & (ptype != PerturbationType.UNPERTURBED.value))


def step2_metadata_filter(manifest: DatasetManifest, cfg: CurationConfig) -> DatasetManifest:
    """Drop wells with missing perturbation info, too many perturbations or an
    unusual image shape tag."""
    f = manifest.frame
    drop = _missing_info(f) | (f["perturbation_count"].to_numpy() > cfg.max_perturbations_per_well)
    tags = f["image_shape_tag"].to_numpy()
    if cfg.accepted_shape_tags is None:
        drop |= tags == ""
    else:
        drop |= ~np.isin(tags, list(cfg.accepted_shape_tags))
    return manifest.subset(~drop)


def condition_support(manifest: DatasetManifest) -> dict[str, tuple[int, int]]:
    """``condition -> (distinct experiments, distinct wells)``."""
    exps: dict[str, set] = {}
    wells: dict[str, int] = {}
    for conds, exp in zip(manifest.frame["perturbation_ids"], manifest.frame["experiment_id"]):
        for c in set(conds):
            exps.setdefault(c, set()).add(exp)
            wells[c] = wells.get(c, 0) + 1
    return {c: (len(exps[c]), wells[c]) for c in exps}


def step3_replication_filter(manifest: DatasetManifest, cfg: CurationConfig) -> DatasetManifest:
    """Drop every well carrying a condition seen in fewer than
    ``min_experiments`` experiments or ``min_wells`` wells."""
    support = condition_support(manifest)
    failing = {c for c, (n_exp, n_wells) in support.items() if n_exp < cfg.min_experiments or n_wells < cfg.min_wells}
    keep = np.array([not (set(conds) & failing) for conds in manifest.frame["perturbation_ids"]], dtype=bool)
    return manifest.subset(keep)


def step4_undersample(manifest: DatasetManifest, cfg: CurationConfig) -> DatasetManifest:
    """Keep ``ceil(rate * n)`` wells of each (control category, experiment)
    stratum; the kept wells are the first of a seeded permutation of the
    stratum's sorted well ids."""
    f = manifest.frame
    keep = np.ones(len(f), dtype=bool)
    ptype = f["perturbation_type"].to_numpy()
    exps = f["experiment_id"].to_numpy()
    ids = f["well_id"].to_numpy()
    for category in UNDERSAMPLED:
        rate = cfg.keep_rate(category)
        in_cat = ptype == category
        for exp in sorted(set(exps[in_cat])):
            rows = np.flatnonzero(in_cat & (exps == exp))
            rows = rows[np.argsort(ids[rows], kind="stable")]
            n_keep = math.ceil(rate * len(rows) - 1e-9)
            perm = substream(cfg.seed, "undersample", category, exp).permutation(len(rows))
            keep[rows[perm[n_keep:]]] = False
    return manifest.subset(keep)


def _phenoprint_conditions(results, threshold: float) -> tuple[set, set]:
    """(conditions with a phenoprint in any model, all covered conditions)."""
    passing, covered = set(), set()
    for _tag, entries in results:
        if isinstance(entries, Mapping):
            items = entries.items()
        else:
            items = ((r.perturbation_id, r.combined_p) for r in entries)
        for cond, p in items:
            covered.add(cond)
            if p is not None and p < threshold:
                passing.add(cond)
    return passing, covered


def step5_phenoprint_filter(
    manifest: DatasetManifest,
    consistency_results: Sequence[tuple[str, Sequence[ConsistencyResult] | Mapping[str, float]]],
    cfg: CurationConfig,
    report: CurationReport | None = None,
) -> DatasetManifest:
    """Keep wells where at least one condition has ``combined_p`` below the
    threshold in at least one model's results.

    ``consistency_results`` is a list of ``(model_tag, results)`` where
    results are ConsistencyResult objects or a ``{condition: combined_p}``
    mapping.
    """
    if not consistency_results:
        raise ValueError("no consistency results given")
    passing, covered = _phenoprint_conditions(consistency_results, cfg.phenoprint_p_threshold)
    conds = manifest.frame["perturbation_ids"]
    keep = np.array([bool(set(c) & passing) for c in conds], dtype=bool)
    if report is not None:
        uncovered = {c for cs in conds for c in cs} - covered
        report.notes["uncovered_conditions"] = len(uncovered)
        report.notes["wells_with_only_uncovered_conditions"] = int(
            sum(1 for cs in conds if cs and set(cs) <= uncovered)
        )
    return manifest.subset(keep)


STEPS = ("quality_filter", "metadata_filter", "replication_filter", "undersample", "phenoprint_filter")


def curate_pipeline(
    manifest: DatasetManifest, consistency_results, cfg: CurationConfig
) -> tuple[DatasetManifest, CurationReport]:
    report = CurationReport()
    current = manifest
    for name in STEPS:
        if name == "quality_filter":
            nxt = step1_quality_filter(current, cfg)
        elif name == "metadata_filter":
            nxt = step2_metadata_filter(current, cfg)
        elif name == "replication_filter":
            nxt = step3_replication_filter(current, cfg)
        elif name == "undersample":
            nxt = step4_undersample(current, cfg)
        else:
            nxt = step5_phenoprint_filter(current, consistency_results, cfg, report)
        report.record(name, current, nxt)
        current = nxt
    return current, report
