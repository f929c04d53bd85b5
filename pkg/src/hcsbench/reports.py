"""JSON (canonical) and CSV (tabular mirror) report writers."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from pathlib import Path

import numpy as np

from .benchmarks import ConsistencyReport, ConsistencyResult, ExperimentEntry, RecallReport, ReplicateReport
from .probe import ProbeSweepResult


def jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.repr}
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return [jsonable(v) for v in sorted(obj)]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return jsonable(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(jsonable(payload), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n")


def write_csv(path, header: list[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])


def consistency_csv(path, report: ConsistencyReport) -> None:
    rows = []
    for r in report.results:
        for e in r.entries:
            rows.append([r.perturbation_id, e.experiment_id, e.n_replicates, e.s_bar, e.p_value, None])
        rows.append([r.perturbation_id, "combined", sum(e.n_replicates for e in r.entries), None, None, r.combined_p])
    write_csv(path, ["perturbation_id", "experiment_id", "n_replicates", "s_bar", "p_value", "combined_p"], rows)


def consistency_from_json(payload: dict) -> list[ConsistencyResult]:
    out = []
    for r in payload["results"]:
        entries = tuple(ExperimentEntry(**e) for e in r.get("entries", []))
        out.append(ConsistencyResult(r["perturbation_id"], entries, r["combined_p"]))
    return out


def replicate_csv(path, report: ReplicateReport) -> None:
    rows = [[p.experiment_a, p.experiment_b, p.n_matched, p.ks, p.cvm, p.seed_used] for p in report.per_pair]
    rows.append(["median", "median", None, report.median_ks, report.median_cvm, None])
    write_csv(path, ["experiment_a", "experiment_b", "n_matched", "ks", "cvm", "seed_used"], rows)


def recall_csv(path, reports: list[RecallReport]) -> None:
    header = [f.name for f in dataclasses.fields(RecallReport)]
    write_csv(path, header, [[getattr(r, h) for h in header] for r in reports])


def sweep_csv(path, result: ProbeSweepResult) -> None:
    write_csv(
        path,
        ["block_index", "balanced_accuracy", "is_best"],
        [[b, a, int(b == result.best_block)] for b, a in result.block_accuracies],
    )
