"""Shared data model and file ingestion/emission.

Tables hold per-well metadata in a pandas frame and embeddings in a
float64 array.  Files store embeddings as float32 (Parquet) or as
shortest round-trip decimal text (CSV, one ``f{i}`` column per dimension).
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.parquet as pq


class SchemaError(ValueError):
    """Raised when an input file or table violates the data model."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class PerturbationType(str, enum.Enum):
    GENE_KNOCKOUT_GUIDE = "gene_knockout_guide"
    SIRNA = "sirna"
    COMPOUND = "compound"
    NEGATIVE_CONTROL = "negative_control"
    POSITIVE_CONTROL = "positive_control"
    UNPERTURBED = "unperturbed"


GENETIC_TYPES = frozenset({PerturbationType.GENE_KNOCKOUT_GUIDE.value, PerturbationType.SIRNA.value})
CONTROL_TYPES = frozenset(
    {
        PerturbationType.NEGATIVE_CONTROL.value,
        PerturbationType.POSITIVE_CONTROL.value,
        PerturbationType.UNPERTURBED.value,
    }
)

META_COLUMNS = (
    "well_id",
    "experiment_id",
    "plate_id",
    "well_position",
    "perturbation_id",
    "perturbation_type",
    "gene_id",
    "concentration",
    "cell_type",
)
_STRING_COLUMNS = tuple(c for c in META_COLUMNS if c not in ("gene_id", "concentration"))
_FEATURE_RE = re.compile(r"^f(\d+)$")


@dataclass(frozen=True)
class EmbeddingTable:
    """Well-level embeddings with metadata.

    ``meta`` has the columns in ``META_COLUMNS`` followed by any extra
    columns (kept as strings).  ``embeddings`` is an ``(n, D)`` float64 array
    aligned with ``meta`` rows.
    """

    meta: pd.DataFrame
    embeddings: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise SchemaError("embeddings must be a 2-D array")
        if emb.shape[1] < 1:
            raise SchemaError("embedding dimension must be >= 1")
        if len(self.meta) != emb.shape[0]:
            raise SchemaError(f"{len(self.meta)} metadata rows but {emb.shape[0]} embeddings")
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "meta", self.meta.reset_index(drop=True))
        _validate(self.meta, emb)

    @classmethod
    def from_records(cls, records: Iterable[Mapping], embeddings) -> "EmbeddingTable":
        rows = []
        for rec in records:
            row = {c: rec.get(c) for c in META_COLUMNS}
            row.update({k: v for k, v in rec.items() if k not in META_COLUMNS})
            rows.append(row)
        emb = np.asarray(embeddings, dtype=np.float64)
        if not rows:
            meta = pd.DataFrame({c: pd.Series(dtype=object) for c in META_COLUMNS})
            meta["concentration"] = meta["concentration"].astype(float)
        else:
            meta = pd.DataFrame(rows)
        meta = _normalize_meta(meta)
        return cls(meta, emb)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def extra_columns(self) -> list[str]:
        return [c for c in self.meta.columns if c not in META_COLUMNS]

    def __len__(self) -> int:
        return len(self.meta)

    def with_embeddings(self, embeddings: np.ndarray) -> "EmbeddingTable":
        return EmbeddingTable(self.meta, embeddings)

    def subset(self, mask_or_index) -> "EmbeddingTable":
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return EmbeddingTable(self.meta.iloc[idx].reset_index(drop=True), self.embeddings[idx])

    def equals(self, other: "EmbeddingTable") -> bool:
        if self.embeddings.shape != other.embeddings.shape:
            return False
        if not np.array_equal(self.embeddings, other.embeddings):
            return False
        return self.meta.equals(other.meta)


def _normalize_meta(meta: pd.DataFrame) -> pd.DataFrame:
    meta = meta.copy()
    for col in META_COLUMNS:
        if col not in meta.columns:
            raise SchemaError(f"missing column {col!r}")
    for col in _STRING_COLUMNS:
        meta[col] = meta[col].astype(object).where(meta[col].notna(), "").map(str)
    meta["gene_id"] = pd.Series(
        [None if g is None or pd.isna(g) or str(g) == "" else str(g) for g in meta["gene_id"]],
        dtype=object,
        index=meta.index,
    )
    meta["concentration"] = pd.to_numeric(meta["concentration"], errors="raise").astype(np.float64)
    for col in meta.columns:
        if col not in META_COLUMNS:
            meta[col] = meta[col].astype(object).where(meta[col].notna(), "").map(str)
    order = list(META_COLUMNS) + [c for c in meta.columns if c not in META_COLUMNS]
    return meta[order]


def _validate(meta: pd.DataFrame, emb: np.ndarray) -> None:
    if list(meta.columns[: len(META_COLUMNS)]) != list(META_COLUMNS):
        raise SchemaError(f"metadata columns must start with {list(META_COLUMNS)}")
    finite = np.isfinite(emb).all(axis=1)
    if not finite.all():
        raise SchemaError("non-finite embedding value", row=int(np.flatnonzero(~finite)[0]))
    dup = meta["well_id"].duplicated()
    if dup.any():
        i = int(np.flatnonzero(dup.to_numpy())[0])
        raise SchemaError(f"duplicate well_id {meta['well_id'].iat[i]!r}", row=i)
    valid_types = {t.value for t in PerturbationType}
    ptype = meta["perturbation_type"].to_numpy()
    for i, t in enumerate(ptype):
        if t not in valid_types:
            raise SchemaError(f"unknown perturbation_type {t!r}", row=i)
    needs_gene = np.isin(ptype, list(GENETIC_TYPES))
    missing_gene = needs_gene & meta["gene_id"].isna().to_numpy()
    if missing_gene.any():
        raise SchemaError("gene_id required for genetic perturbation", row=int(np.flatnonzero(missing_gene)[0]))
    conc = meta["concentration"].to_numpy()
    bad_conc = ~np.isnan(conc) & ~(conc > 0)
    if bad_conc.any():
        raise SchemaError("concentration must be positive", row=int(np.flatnonzero(bad_conc)[0]))


# --------------------------------------------------------------------------
# Embedding table I/O


def load_embedding_table(path, format: str = "columnar") -> EmbeddingTable:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "columnar":
        return _load_parquet(path)
    if format == "csv":
        return _load_csv(path)
    raise ValueError(f"unknown format {format!r}")


def save_embedding_table(table: EmbeddingTable, path, format: str = "columnar") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "columnar":
        _save_parquet(table, path)
    elif format == "csv":
        _save_csv(table, path)
    else:
        raise ValueError(f"unknown format {format!r}")


def _save_parquet(table: EmbeddingTable, path: Path) -> None:
    d = table.dim
    flat = pa.array(table.embeddings.astype(np.float32).ravel(), type=pa.float32())
    emb = pa.FixedSizeListArray.from_arrays(flat, d)
    meta = table.meta
    arrays, fields = [], []
    for col in meta.columns:
        if col == "concentration":
            arr = pa.array(meta[col].to_numpy(), type=pa.float64(), from_pandas=True)
        else:
            arr = pa.array(meta[col].tolist(), type=pa.string())
        arrays.append(arr)
        fields.append(pa.field(col, arr.type, nullable=col in ("gene_id", "concentration")))
    arrays.append(emb)
    fields.append(pa.field("embedding", pa.list_(pa.float32(), d)))
    pq.write_table(pa.Table.from_arrays(arrays, schema=pa.schema(fields)), path)


def _load_parquet(path: Path) -> EmbeddingTable:
    try:
        tbl = pq.read_table(path)
    except pa.ArrowException as exc:
        raise SchemaError(f"cannot read columnar file: {exc}") from exc
    names = tbl.column_names
    missing = [c for c in (*META_COLUMNS, "embedding") if c not in names]
    if missing:
        raise SchemaError(f"missing columns {missing}")
    col = tbl.column("embedding").combine_chunks()
    if not pa.types.is_fixed_size_list(col.type):
        # variable-size lists are accepted only if every row has the same length
        lengths = col.value_lengths().to_numpy(zero_copy_only=False)
        if len(lengths) and (lengths != lengths[0]).any():
            i = int(np.flatnonzero(lengths != lengths[0])[0])
            raise SchemaError(f"ragged embedding length {lengths[i]} (expected {lengths[0]})", row=i)
        d = int(lengths[0]) if len(lengths) else 0
    else:
        d = col.type.list_size
    values = col.flatten().to_numpy(zero_copy_only=False).astype(np.float64)
    if d < 1:
        raise SchemaError("embedding dimension must be >= 1")
    emb = values.reshape(len(col), d)
    frame = {}
    for name in names:
        if name == "embedding":
            continue
        arr = tbl.column(name)
        if name == "concentration":
            frame[name] = arr.to_numpy(zero_copy_only=False).astype(np.float64)
        else:
            frame[name] = pd.Series(arr.to_pylist(), dtype=object)
    meta = _normalize_meta(pd.DataFrame(frame))
    return EmbeddingTable(meta, emb)


def _save_csv(table: EmbeddingTable, path: Path) -> None:
    meta = table.meta.copy()
    meta["gene_id"] = meta["gene_id"].map(lambda g: "" if g is None else g)
    feats = pd.DataFrame(table.embeddings.astype(np.float32).astype(np.float64), columns=[f"f{i}" for i in range(table.dim)])
    out = pd.concat([meta, feats], axis=1)
    out.to_csv(path, index=False, float_format=None, na_rep="")


def _load_csv(path: Path) -> EmbeddingTable:
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    feature_cols = sorted(
        (c for c in raw.columns if _FEATURE_RE.match(c)), key=lambda c: int(c[1:])
    )
    if not feature_cols:
        raise SchemaError("no feature columns f0..f{D-1}")
    expected = [f"f{i}" for i in range(len(feature_cols))]
    if feature_cols != expected:
        raise SchemaError(f"feature columns must be contiguous f0..f{len(feature_cols) - 1}")
    emb = np.empty((len(raw), len(feature_cols)), dtype=np.float64)
    for j, c in enumerate(feature_cols):
        for i, text in enumerate(raw[c].to_numpy()):
            if text == "":
                raise SchemaError(f"missing value in column {c} (ragged vector)", row=i)
            try:
                emb[i, j] = float(text)
            except ValueError:
                raise SchemaError(f"non-numeric value {text!r} in column {c}", row=i) from None
    meta = raw[[c for c in raw.columns if c not in feature_cols]].copy()
    missing = [c for c in META_COLUMNS if c not in meta.columns]
    if missing:
        raise SchemaError(f"missing columns {missing}")
    conc = meta["concentration"].to_numpy()
    parsed = np.full(len(meta), np.nan)
    for i, text in enumerate(conc):
        if text != "":
            try:
                parsed[i] = float(text)
            except ValueError:
                raise SchemaError(f"non-numeric concentration {text!r}", row=i) from None
    meta["concentration"] = parsed
    return EmbeddingTable(_normalize_meta(meta), emb)


# --------------------------------------------------------------------------
# Relationship databases and arm annotations


@dataclass(frozen=True)
class RelationshipDB:
    """Unordered gene pairs; each pair stored as a sorted tuple."""

    name: str
    pairs: frozenset
    n_self_pairs_dropped: int = 0
    n_duplicates_dropped: int = 0

    def __post_init__(self):
        for a, b in self.pairs:
            if a == b:
                raise SchemaError(f"self-pair {a!r} in relationship db")
            if a > b:
                raise SchemaError(f"pair ({a!r}, {b!r}) is not in canonical order")

    @classmethod
    def from_pairs(cls, name: str, pairs: Iterable[tuple[str, str]]) -> "RelationshipDB":
        seen: set[tuple[str, str]] = set()
        selfs = dups = 0
        for a, b in pairs:
            if a == b:
                selfs += 1
                continue
            key = (a, b) if a < b else (b, a)
            if key in seen:
                dups += 1
            seen.add(key)
        return cls(name, frozenset(seen), selfs, dups)

    def __len__(self) -> int:
        return len(self.pairs)


def load_relationship_db(path, name: str | None = None) -> RelationshipDB:
    path = Path(path)
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise SchemaError(f"line {lineno}: expected 2 gene ids, got {len(parts)}")
            edges.append((parts[0], parts[1]))
    return RelationshipDB.from_pairs(name or path.stem, edges)


def save_relationship_db(db: RelationshipDB, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {db.name}\n")
        for a, b in sorted(db.pairs):
            fh.write(f"{a}\t{b}\n")


@dataclass(frozen=True)
class ArmAnnotation:
    arms: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for gene, arm in self.arms.items():
            if not arm:
                raise SchemaError(f"empty chromosome arm label for gene {gene!r}")

    def lookup(self, genes: Iterable[str]) -> list[str]:
        out = []
        for g in genes:
            if g not in self.arms:
                raise KeyError(f"no chromosome arm label for gene {g!r}")
            out.append(self.arms[g])
        return out


def load_arm_annotation(path) -> ArmAnnotation:
    arms = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise SchemaError(f"line {lineno}: expected 'gene arm'")
            arms[parts[0]] = parts[1]
    return ArmAnnotation(arms)


@dataclass(frozen=True)
class GeneAggregateSet:
    """Unit-norm aggregate vector per gene, rows aligned with ``genes``."""

    genes: tuple
    vectors: np.ndarray

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        object.__setattr__(self, "genes", tuple(self.genes))
        if vecs.ndim != 2 or vecs.shape[0] != len(self.genes):
            raise SchemaError("vectors must be (n_genes, D)")
        if len(set(self.genes)) != len(self.genes):
            raise SchemaError("duplicate gene ids in aggregate set")
        if vecs.size:
            norms = np.linalg.norm(vecs, axis=1)
            bad = np.abs(norms - 1.0) > 1e-6
            if bad.any():
                raise SchemaError(f"aggregate for {self.genes[int(np.flatnonzero(bad)[0])]!r} is not unit norm")
        vecs.setflags(write=False)
        object.__setattr__(self, "vectors", vecs)

    def __len__(self) -> int:
        return len(self.genes)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {g: self.vectors[i] for i, g in enumerate(self.genes)}


# --------------------------------------------------------------------------
# Dataset manifests (curation input)

MANIFEST_COLUMNS = (
    "well_id",
    "experiment_id",
    "perturbation_ids",
    "perturbation_type",
    "perturbation_count",
    "image_shape_tag",
)
CONDITION_SEP = ";"


@dataclass(frozen=True)
class DatasetManifest:
    """Curation manifest.

    ``frame`` holds ``MANIFEST_COLUMNS`` plus one boolean column per quality
    flag.  ``perturbation_ids`` is a tuple of condition keys per well (empty
    when the perturbation information is missing).
    """

    frame: pd.DataFrame

    def __post_init__(self):
        f = self.frame.reset_index(drop=True)
        missing = [c for c in MANIFEST_COLUMNS if c not in f.columns]
        if missing:
            raise SchemaError(f"manifest missing columns {missing}")
        dup = f["well_id"].duplicated()
        if dup.any():
            raise SchemaError("duplicate well_id in manifest", row=int(np.flatnonzero(dup.to_numpy())[0]))
        counts = f["perturbation_count"].to_numpy()
        if len(counts) and (counts < 0).any():
            raise SchemaError("negative perturbation_count", row=int(np.flatnonzero(counts < 0)[0]))
        object.__setattr__(self, "frame", f)

    @property
    def flag_columns(self) -> list[str]:
        return [c for c in self.frame.columns if c not in MANIFEST_COLUMNS]

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def well_ids(self) -> list[str]:
        return self.frame["well_id"].tolist()

    def subset(self, mask) -> "DatasetManifest":
        return DatasetManifest(self.frame[np.asarray(mask, dtype=bool)].reset_index(drop=True))

    @classmethod
    def from_records(cls, records: Iterable[Mapping], flags: Iterable[str] = ()) -> "DatasetManifest":
        flags = list(flags)
        rows = list(records)
        data = {
            "well_id": [str(r["well_id"]) for r in rows],
            "experiment_id": [str(r["experiment_id"]) for r in rows],
            "perturbation_ids": [tuple(r.get("perturbation_ids", ())) for r in rows],
            "perturbation_type": [str(r.get("perturbation_type", "")) for r in rows],
            "perturbation_count": np.array([int(r.get("perturbation_count", 0)) for r in rows], dtype=np.int64),
            "image_shape_tag": [str(r.get("image_shape_tag", "")) for r in rows],
        }
        for name in flags:
            data[name] = np.array([bool(r.get("flags", {}).get(name, False)) for r in rows], dtype=bool)
        return cls(pd.DataFrame(data))


def _parse_bool(text: str, row: int, col: str) -> bool:
    t = str(text).strip().lower()
    if t in ("true", "1", "yes", "t"):
        return True
    if t in ("false", "0", "no", "f", ""):
        return False
    raise SchemaError(f"cannot parse {text!r} as bool in column {col}", row=row)


def _manifest_from_strings(raw: pd.DataFrame) -> DatasetManifest:
    missing = [c for c in MANIFEST_COLUMNS if c not in raw.columns]
    if missing:
        raise SchemaError(f"manifest missing columns {missing}")
    frame = pd.DataFrame(
        {
            "well_id": raw["well_id"].map(str),
            "experiment_id": raw["experiment_id"].map(str),
            "perturbation_ids": raw["perturbation_ids"].map(
                lambda s: tuple(p for p in str(s).split(CONDITION_SEP) if p)
            ),
            "perturbation_type": raw["perturbation_type"].map(str),
            "image_shape_tag": raw["image_shape_tag"].map(str),
        }
    )
    counts = []
    for i, text in enumerate(raw["perturbation_count"].tolist()):
        try:
            counts.append(int(text))
        except (TypeError, ValueError):
            raise SchemaError(f"bad perturbation_count {text!r}", row=i) from None
    frame.insert(4, "perturbation_count", np.array(counts, dtype=np.int64))
    for col in raw.columns:
        if col in MANIFEST_COLUMNS:
            continue
        frame[col] = np.array([_parse_bool(v, i, col) for i, v in enumerate(raw[col].tolist())], dtype=bool)
    return DatasetManifest(frame)


def _manifest_to_strings(manifest: DatasetManifest) -> pd.DataFrame:
    out = manifest.frame.copy()
    out["perturbation_ids"] = out["perturbation_ids"].map(lambda t: CONDITION_SEP.join(t))
    for col in manifest.flag_columns:
        out[col] = out[col].map(lambda b: "true" if b else "false")
    out["perturbation_count"] = out["perturbation_count"].map(str)
    return out.astype(str)


def load_manifest(path, format: str = "csv") -> DatasetManifest:
    path = Path(path)
    if format == "csv":
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    elif format == "columnar":
        raw = pq.read_table(path).to_pandas().astype(str)
    else:
        raise ValueError(f"unknown format {format!r}")
    return _manifest_from_strings(raw)


def save_manifest(manifest: DatasetManifest, path, format: str = "csv") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = _manifest_to_strings(manifest)
    if format == "csv":
        out.to_csv(path, index=False)
    elif format == "columnar":
        pq.write_table(pa.Table.from_pandas(out, preserve_index=False), path)
    else:
        raise ValueError(f"unknown format {format!r}")
