"""Command-line front end.

Every subcommand reads an optional TOML file with a ``[global]`` table
(seed, thread_count, output_dir, log_level, format) and one table per
command.  Command-line flags override config keys.  Reports are written as
canonical JSON plus a CSV mirror; each embeds the resolved config and
seed.  ``thread_count`` and ``output_dir`` are execution details and are
left out of the embedded config so reports compare byte-for-byte across
runs that differ only in those.

Errors are reported on stderr as one JSON object and a nonzero exit.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .benchmarks import (
    aggregate_gene_embeddings,
    perturbation_consistency,
    relationship_recall,
    replicate_consistency,
)
from .curate import CurationConfig, curate_pipeline
from .data import (
    PerturbationType,
    load_arm_annotation,
    load_embedding_table,
    load_manifest,
    load_relationship_db,
    save_embedding_table,
    save_manifest,
    save_relationship_db,
)
from .normalize import arm_bias_correct, shift_origin_to_controls, tvn_by_experiment, tvn_global
from .probe import BlockFeatureSet, ProbeConfig, sweep_blocks
from .reports import (
    consistency_csv,
    consistency_from_json,
    recall_csv,
    replicate_csv,
    sweep_csv,
    write_csv,
    write_json,
)
from .stats import PermutationConfig
from .synth import SynthConfig, config_dict, generate_block_family, generate_manifest, generate_screen

log = logging.getLogger("hcsbench")

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

EXIT_RUNTIME = 1
EXIT_CONFIG = 2

GLOBAL_DEFAULTS = {
    "seed": None,
    "thread_count": 0,
    "output_dir": "hcsbench_out",
    "log_level": "INFO",
    "format": "columnar",
}
# keys kept out of the provenance block of reports
EXECUTION_KEYS = ("thread_count", "output_dir")

_SYNTH_FIELDS = config_dict(SynthConfig())
_SYNTH_FIELDS.pop("seed")

COMMANDS = {
    "normalize": {
        "input": None,
        "method": "tvn",
        "scope": "experiment",
        "control_type": PerturbationType.NEGATIVE_CONTROL.value,
        "eigenvalue_floor": 1e-6,
    },
    "consistency": {"input": None, "K": 1000, "group_by": "guide"},
    "replicate": {"input": None, "K": 1000, "pairs": None, "ground_truth": None, "include_controls": False},
    "recall": {
        "input": None,
        "databases": None,
        "low_pct": 0.05,
        "high_pct": 0.95,
        "origin_shift": False,
        "arm_annotation": None,
        "tile": 2048,
    },
    "probe": {
        "blocks": None,
        "block_indices": None,
        "label_key": "perturbation_id",
        "test_experiments": None,
        "C": 1.0,
        "max_iter": 2000,
        "tol": 1e-4,
    },
    "curate": {
        "manifest": None,
        "consistency": None,
        **{k: v for k, v in CurationConfig().to_dict().items() if k != "seed"},
    },
    "synth": {**_SYNTH_FIELDS, "n_blocks": 0, "peak_block": 1, "block_decay": 0.35, "emit_manifest": True},
}
STOCHASTIC = {"consistency", "replicate", "curate", "synth"}
# config keys naming files that must exist before a run
INPUT_PATH_KEYS = ("input", "databases", "arm_annotation", "blocks", "manifest", "ground_truth")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_RUNTIME, **detail):
        super().__init__(message)
        self.code = code
        self.detail = detail


# --------------------------------------------------------------------------
# config resolution


def _read_config(path: str | None) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {path}", EXIT_CONFIG, path=str(path))
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh), p.resolve().parent
    except tomllib.TOMLDecodeError as exc:
        raise CliError(f"cannot parse config {path}: {exc}", EXIT_CONFIG, path=str(path)) from exc


def resolve_config(command: str, args: argparse.Namespace) -> tuple[dict, dict, Path]:
    """Merge defaults, config file and flags into (global, command) blocks."""
    raw, base_dir = _read_config(args.config)
    unknown = [k for k in raw if k != "global" and k not in COMMANDS]
    glob = dict(raw.get("global", {}))
    block = dict(raw.get(command, {}))
    unknown += [f"global.{k}" for k in glob if k not in GLOBAL_DEFAULTS]
    unknown += [f"{command}.{k}" for k in block if k not in COMMANDS[command]]
    for name, sub in raw.items():
        if name in COMMANDS and name != command:
            unknown += [f"{name}.{k}" for k in sub if k not in COMMANDS[name]]
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}", EXIT_CONFIG, keys=sorted(unknown))

    g = {**GLOBAL_DEFAULTS, **glob}
    c = {**COMMANDS[command], **block}
    for flag, key in (("seed", "seed"), ("threads", "thread_count"), ("output_dir", "output_dir"),
                      ("format", "format"), ("log_level", "log_level")):
        value = getattr(args, flag, None)
        if value is not None:
            g[key] = value
    for key in COMMANDS[command]:
        value = getattr(args, f"opt_{key}", None)
        if value is not None:
            c[key] = value

    if g["format"] not in ("columnar", "csv"):
        raise CliError(f"format must be columnar or csv, got {g['format']!r}", EXIT_CONFIG, keys=["global.format"])
    if command in STOCHASTIC and g["seed"] is None:
        raise CliError(f"command {command!r} is randomized and needs an explicit seed", EXIT_CONFIG, keys=["global.seed"])
    if g["seed"] is not None and (not isinstance(g["seed"], int) or isinstance(g["seed"], bool) or g["seed"] < 0):
        raise CliError("seed must be a non-negative integer", EXIT_CONFIG, keys=["global.seed"])
    _check_inputs(command, c, base_dir)
    return g, c, base_dir


def _as_list(value) -> list:
    if value is None:
        return []
    return list(value) if isinstance(value, (list, tuple)) else [value]


def _resolve(base: Path, path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base / p


def _check_inputs(command: str, c: dict, base: Path) -> None:
    paths = []
    for key in INPUT_PATH_KEYS:
        if key in c:
            paths += [p for p in _as_list(c[key]) if p is not None]
    if command == "curate":
        paths += [entry.get("path") for entry in _as_list(c["consistency"]) if isinstance(entry, dict)]
    for p in paths:
        if not isinstance(p, str):
            raise CliError(f"path value must be a string, got {p!r}", EXIT_CONFIG)
        if not _resolve(base, p).exists():
            raise CliError(f"input path does not exist: {p}", EXIT_CONFIG, path=str(p))


def _require(c: dict, command: str, *keys: str) -> None:
    missing = [f"{command}.{k}" for k in keys if c.get(k) in (None, [], "")]
    if missing:
        raise CliError(f"missing required config keys: {', '.join(missing)}", EXIT_CONFIG, keys=missing)


def _provenance(command: str, g: dict, c: dict) -> dict:
    glob = {k: v for k, v in g.items() if k not in EXECUTION_KEYS}
    return {"command": command, "config": {"global": glob, command: c}, "seed": g["seed"]}


def _table_format(path: Path) -> str:
    return "csv" if path.suffix.lower() == ".csv" else "columnar"


def _table_suffix(fmt: str) -> str:
    return ".csv" if fmt == "csv" else ".parquet"


def _load_table(base: Path, path):
    p = _resolve(base, path)
    return load_embedding_table(p, _table_format(p))


# --------------------------------------------------------------------------
# commands


def cmd_normalize(g: dict, c: dict, base: Path, out: Path) -> dict:
    _require(c, "normalize", "input")
    table = _load_table(base, c["input"])
    selector = c["control_type"]
    if c["method"] == "tvn":
        if c["scope"] == "experiment":
            result, transforms = tvn_by_experiment(table, selector, c["eigenvalue_floor"])
            transform_doc = {exp: t.to_dict() for exp, t in transforms.items()}
        elif c["scope"] == "global":
            result, t = tvn_global(table, selector, c["eigenvalue_floor"])
            transform_doc = {"global": t.to_dict()}
        else:
            raise CliError(f"normalize.scope must be experiment or global, got {c['scope']!r}", EXIT_CONFIG)
    elif c["method"] == "origin_shift":
        result = shift_origin_to_controls(table, selector)
        ctrl = table.embeddings[table.meta["perturbation_type"].to_numpy() == selector]
        transform_doc = {"global": {"origin": ctrl.mean(axis=0)}}
    else:
        raise CliError(f"normalize.method must be tvn or origin_shift, got {c['method']!r}", EXIT_CONFIG)
    table_path = out / f"normalized{_table_suffix(g['format'])}"
    save_embedding_table(result, table_path, g["format"])
    write_json(out / "transform.json", {**_provenance("normalize", g, c), "transforms": transform_doc})
    return {"rows": len(result), "table": table_path.name}


def cmd_consistency(g: dict, c: dict, base: Path, out: Path) -> dict:
    _require(c, "consistency", "input")
    table = _load_table(base, c["input"])
    report = perturbation_consistency(table, PermutationConfig(c["K"], g["seed"]), c["group_by"], g["thread_count"])
    write_json(
        out / "consistency.json",
        {
            **_provenance("consistency", g, c),
            "results": [r.to_dict() for r in report.results],
            "skipped": report.skipped,
        },
    )
    consistency_csv(out / "consistency.csv", report)
    return {"groups": len(report.results), "skipped": len(report.skipped)}


def cmd_replicate(g: dict, c: dict, base: Path, out: Path) -> dict:
    _require(c, "replicate", "input")
    pairs = c["pairs"]
    if pairs is None and c["ground_truth"] is not None:
        pairs = json.loads(_resolve(base, c["ground_truth"]).read_text())["replicate_pairs"]
    if not pairs:
        raise CliError("replicate needs replicate.pairs or replicate.ground_truth", EXIT_CONFIG, keys=["replicate.pairs"])
    pairs = [tuple(p) for p in pairs]
    table = _load_table(base, c["input"])
    report = replicate_consistency(
        table, pairs, PermutationConfig(c["K"], g["seed"]), g["thread_count"], c["include_controls"]
    )
    write_json(out / "replicate.json", {**_provenance("replicate", g, c), "report": report})
    replicate_csv(out / "replicate.csv", report)
    return {"median_ks": report.median_ks, "median_cvm": report.median_cvm}


def cmd_recall(g: dict, c: dict, base: Path, out: Path) -> dict:
    _require(c, "recall", "input", "databases")
    table = _load_table(base, c["input"])
    if c["origin_shift"]:
        table = shift_origin_to_controls(table)
    aggregates, excluded = aggregate_gene_embeddings(table, return_excluded=True)
    if c["arm_annotation"] is not None:
        aggregates = arm_bias_correct(aggregates, load_arm_annotation(_resolve(base, c["arm_annotation"])))
    reports = [
        relationship_recall(
            aggregates,
            load_relationship_db(_resolve(base, path)),
            c["low_pct"],
            c["high_pct"],
            c["tile"],
            g["thread_count"],
        )
        for path in _as_list(c["databases"])
    ]
    write_json(
        out / "recall.json",
        {**_provenance("recall", g, c), "reports": reports, "excluded_genes": excluded},
    )
    recall_csv(out / "recall.csv", reports)
    return {r.database_name: r.recall for r in reports}


def cmd_probe(g: dict, c: dict, base: Path, out: Path) -> dict:
    _require(c, "probe", "blocks", "test_experiments")
    paths = _as_list(c["blocks"])
    indices = c["block_indices"] or list(range(1, len(paths) + 1))
    if len(indices) != len(paths):
        raise CliError("probe.block_indices and probe.blocks differ in length", EXIT_CONFIG)
    blocks = [BlockFeatureSet(int(i), _load_table(base, p), c["label_key"]) for i, p in zip(indices, paths)]
    cfg = ProbeConfig(c["C"], c["max_iter"], c["tol"])
    result = sweep_blocks(blocks, _as_list(c["test_experiments"]), cfg, g["thread_count"])
    write_json(out / "probe_sweep.json", {**_provenance("probe", g, c), "result": result})
    sweep_csv(out / "probe_sweep.csv", result)
    # plot-ready: x = block index, y = balanced accuracy
    write_csv(out / "probe_curve.csv", ["x_block", "y_balanced_accuracy"], result.block_accuracies)
    return {"best_block": result.best_block, "best_accuracy": result.best_accuracy}


def cmd_curate(g: dict, c: dict, base: Path, out: Path) -> dict:
    _require(c, "curate", "manifest", "consistency")
    mpath = _resolve(base, c["manifest"])
    manifest = load_manifest(mpath, _table_format(mpath))
    results = []
    for entry in _as_list(c["consistency"]):
        if not isinstance(entry, dict) or set(entry) != {"tag", "path"}:
            raise CliError("curate.consistency entries need exactly 'tag' and 'path'", EXIT_CONFIG)
        payload = json.loads(_resolve(base, entry["path"]).read_text())
        results.append((entry["tag"], consistency_from_json(payload)))
    fields = {k: c[k] for k in CurationConfig().to_dict() if k != "seed"}
    cfg = CurationConfig(**fields, seed=g["seed"])
    kept, report = curate_pipeline(manifest, results, cfg)
    save_manifest(kept, out / f"curated_manifest{_table_suffix(g['format'])}", g["format"])
    write_json(out / "curation_report.json", {**_provenance("curate", g, c), "report": report.to_dict()})
    write_csv(
        out / "curation_report.csv",
        ["step_name", "rows_in", "rows_out", "rows_dropped"],
        [[s.step_name, s.rows_in, s.rows_out, s.rows_dropped] for s in report.steps],
    )
    return {"rows_kept": len(kept)}


def cmd_synth(g: dict, c: dict, base: Path, out: Path) -> dict:
    cfg = SynthConfig(**{k: c[k] for k in _SYNTH_FIELDS}, seed=g["seed"])
    suffix = _table_suffix(g["format"])
    table, truth = generate_screen(cfg)
    save_embedding_table(table, out / f"screen{suffix}", g["format"])
    write_json(out / "ground_truth.json", {**_provenance("synth", g, c), **truth.to_dict()})
    save_relationship_db(truth.relationship_db(), out / "planted_pairs.tsv")
    written = {"screen_rows": len(table)}
    if c["emit_manifest"]:
        manifest, mtruth = generate_manifest(seed=g["seed"])
        save_manifest(manifest, out / "manifest.csv", "csv")
        for tag, pvals in mtruth.consistency:
            results = [{"perturbation_id": k, "combined_p": v, "entries": []} for k, v in sorted(pvals.items())]
            write_json(out / f"manifest_consistency_{tag}.json", {"model_tag": tag, "results": results})
        write_json(
            out / "manifest_truth.json",
            {"kept_well_ids": sorted(mtruth.kept_well_ids), "fates": mtruth.fates},
        )
        written["manifest_rows"] = len(manifest)
    if c["n_blocks"]:
        blocks = generate_block_family(cfg, c["n_blocks"], c["peak_block"], c["block_decay"])
        for b in blocks:
            save_embedding_table(b.features, out / "blocks" / f"block_{b.block_index:02d}{suffix}", g["format"])
        written["blocks"] = len(blocks)
    return written


HANDLERS = {
    "normalize": cmd_normalize,
    "consistency": cmd_consistency,
    "replicate": cmd_replicate,
    "recall": cmd_recall,
    "probe": cmd_probe,
    "curate": cmd_curate,
    "synth": cmd_synth,
}

# command-specific flags: (flag, config key, type, help)
_OPTIONS = {
    "normalize": [("--input", "input", str, "embedding table to normalize")],
    "consistency": [
        ("--input", "input", str, "TVN-normalized embedding table"),
        ("--K", "K", int, "null draws per group and experiment"),
        ("--group-by", "group_by", str, "guide, gene or compound_concentration"),
    ],
    "replicate": [
        ("--input", "input", str, "TVN-normalized embedding table"),
    ],
    "recall": [
        ("--input", "input", str, "TVN-normalized embedding table"),
        ("--low-pct", "low_pct", float, "lower tail quantile"),
        ("--high-pct", "high_pct", float, "upper tail quantile"),
    ],
    "probe": [],
    "curate": [("--manifest", "manifest", str, "dataset manifest")],
    "synth": [],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcsbench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in HANDLERS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="worker threads, 0 = all cores")
        p.add_argument("--format", choices=("columnar", "csv"))
        p.add_argument("--log-level", dest="log_level", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
        for flag, key, typ, help_text in _OPTIONS[name]:
            p.add_argument(flag, dest=f"opt_{key}", type=typ, help=help_text)
    return parser


def _emit_error(command: str | None, exc: Exception, code: int) -> int:
    doc = {"error": {"command": command, "type": type(exc).__name__, "message": str(exc)}}
    if isinstance(exc, CliError):
        doc["error"].update(exc.detail)
    elif isinstance(exc, FileNotFoundError) and exc.filename:
        doc["error"]["path"] = str(exc.filename)
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    try:
        g, c, base = resolve_config(command, args)
        logging.basicConfig(
            stream=sys.stderr, level=getattr(logging, str(g["log_level"]).upper(), logging.INFO),
            format="%(levelname)s %(name)s: %(message)s", force=True,
        )
        out = Path(g["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        summary = HANDLERS[command](g, c, base, out)
        log.info("%s done: %s", command, summary)
        return 0
    except CliError as exc:
        return _emit_error(command, exc, exc.code)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error document
        log.debug("command failed", exc_info=True)
        return _emit_error(command, exc, EXIT_RUNTIME)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
