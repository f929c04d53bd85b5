"""Synthetic screens with planted ground truth.

Well embeddings follow ``B_e (mu_g + eps) + shift_e`` where ``mu_g`` is the
gene effect (zero for null genes and controls), ``eps`` is isotropic
Gaussian noise, and ``(B_e, shift_e)`` is the affine batch effect of
experiment ``e``.  ``B_e`` is the symmetric stretch of the matrix
``(1 - s) I + s R`` for a random rotation ``R``: control-fitted whitening
inverts it exactly, so TVN has a known-good fixed point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import DatasetManifest, EmbeddingTable, PerturbationType, RelationshipDB
from .probe import BlockFeatureSet
from .stats import substream

PLATE_ROWS = "ABCDEFGHIJKLMNOP"
PLATE_COLS = 24


@dataclass(frozen=True)
class SynthConfig:
    n_genes: int = 200
    n_guides_per_gene: int = 2
    n_experiments: int = 4
    wells_per_guide_per_experiment: int = 2
    dim: int = 64
    frac_null_genes: float = 0.2
    effect_magnitude: float = 1.0
    noise_sigma: float = 0.3
    batch_shift_sigma: float = 1.0
    batch_rotation_strength: float = 0.5
    n_related_groups: int = 10
    genes_per_group: int = 5
    n_neg_controls_per_experiment: int = 200
    seed: int = 0
    # genes are confined to blocks of this many consecutive experiments; None = every experiment
    experiments_per_gene: int | None = None
    related_cosine: float = 0.85

    def validate(self) -> None:
        for name in ("n_genes", "n_guides_per_gene", "n_experiments", "wells_per_guide_per_experiment", "dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.frac_null_genes <= 1:
            raise ValueError("frac_null_genes must be in [0, 1]")
        if self.effect_magnitude < 0 or self.noise_sigma < 0 or self.batch_shift_sigma < 0:
            raise ValueError("magnitudes must be non-negative")
        if not 0 <= self.batch_rotation_strength <= 1:
            raise ValueError("batch_rotation_strength must be in [0, 1]")
        if self.n_related_groups < 0 or self.genes_per_group < 0 or self.n_neg_controls_per_experiment < 0:
            raise ValueError("counts must be non-negative")
        if self.n_related_groups and self.genes_per_group < 2:
            raise ValueError("related groups need >= 2 genes")
        if self.n_related_groups * self.genes_per_group > self.n_non_null:
            raise ValueError(
                f"{self.n_related_groups * self.genes_per_group} related genes requested "
                f"but only {self.n_non_null} non-null genes"
            )
        if self.n_related_groups and self.genes_per_group >= self.dim:
            raise ValueError("genes_per_group must be < dim")
        if not 0.8 <= self.related_cosine < 1:
            raise ValueError("related_cosine must be in [0.8, 1)")
        if self.experiments_per_gene is not None:
            if self.experiments_per_gene < 1 or self.n_experiments % self.experiments_per_gene:
                raise ValueError("n_experiments must be a multiple of experiments_per_gene")

    @property
    def n_null(self) -> int:
        return int(round(self.frac_null_genes * self.n_genes))

    @property
    def n_non_null(self) -> int:
        return self.n_genes - self.n_null


@dataclass
class SynthGroundTruth:
    null_genes: frozenset
    related_groups: list
    related_pairs: frozenset
    effects: dict = field(repr=False)
    directions: dict = field(repr=False)
    batch_transforms: dict = field(repr=False)
    gene_experiments: dict = field(repr=False)
    replicate_pairs: list = field(default_factory=list)

    def relationship_db(self, name: str = "planted") -> RelationshipDB:
        return RelationshipDB.from_pairs(name, sorted(self.related_pairs))

    def to_dict(self) -> dict:
        return {
            "null_genes": sorted(self.null_genes),
            "related_groups": [list(g) for g in self.related_groups],
            "related_pairs": [list(p) for p in sorted(self.related_pairs)],
            "replicate_pairs": [list(p) for p in self.replicate_pairs],
            "gene_experiments": {g: list(e) for g, e in sorted(self.gene_experiments.items())},
            "directions": {g: v.tolist() for g, v in sorted(self.directions.items())},
            "effects": {g: v.tolist() for g, v in sorted(self.effects.items())},
            "batch_transforms": {
                e: {"matrix": m.tolist(), "shift": s.tolist()} for e, (m, s) in sorted(self.batch_transforms.items())
            },
        }


def gene_name(i: int) -> str:
    return f"G{i:05d}"


def experiment_name(i: int) -> str:
    return f"EXP{i:02d}"


def random_rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix with determinant +1."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def batch_stretch(rotation: np.ndarray, strength: float) -> np.ndarray:
    """Symmetric polar factor of ``(1 - s) I + s R``."""
    m = (1 - strength) * np.eye(rotation.shape[0]) + strength * rotation
    _, sv, vt = np.linalg.svd(m)
    return (vt.T * sv) @ vt


def _directions(cfg: SynthConfig, rng: np.random.Generator):
    genes = [gene_name(i) for i in range(cfg.n_genes)]
    order = rng.permutation(cfg.n_genes)
    null_genes = frozenset(genes[i] for i in order[: cfg.n_null])
    non_null = [genes[i] for i in sorted(order[cfg.n_null :])]
    picks = rng.permutation(len(non_null))
    groups = []
    for g in range(cfg.n_related_groups):
        members = picks[g * cfg.genes_per_group : (g + 1) * cfg.genes_per_group]
        groups.append(tuple(sorted(non_null[i] for i in members)))
    directions = {}
    rho = math.sqrt(cfg.related_cosine)
    for members in groups:
        # orthonormal frame: shared component plus one private axis per gene
        q, _ = np.linalg.qr(rng.standard_normal((cfg.dim, len(members) + 1)))
        for k, gene in enumerate(members):
            directions[gene] = rho * q[:, 0] + math.sqrt(1 - rho * rho) * q[:, k + 1]
    for gene in non_null:
        if gene not in directions:
            v = rng.standard_normal(cfg.dim)
            directions[gene] = v / np.linalg.norm(v)
    pairs = frozenset((a, b) for members in groups for i, a in enumerate(members) for b in members[i + 1 :])
    return genes, null_genes, groups, directions, pairs


def _gene_layout(cfg: SynthConfig, genes: list, rng: np.random.Generator) -> tuple[dict, list]:
    exps = [experiment_name(i) for i in range(cfg.n_experiments)]
    if cfg.experiments_per_gene is None:
        layout = {g: tuple(exps) for g in genes}
        pairs = [(exps[i], exps[i + 1]) for i in range(0, len(exps) - 1, 2)]
        return layout, pairs
    k = cfg.experiments_per_gene
    blocks = [tuple(exps[i : i + k]) for i in range(0, len(exps), k)]
    assignment = rng.permutation(len(genes)) % len(blocks)
    layout = {g: blocks[a] for g, a in zip(genes, assignment)}
    pairs = [(b[i], b[i + 1]) for b in blocks for i in range(0, len(b) - 1, 2)]
    return layout, pairs


def well_position(index: int) -> str:
    within = index % (len(PLATE_ROWS) * PLATE_COLS)
    return f"{PLATE_ROWS[within // PLATE_COLS]}{within % PLATE_COLS + 1:02d}"


def generate_screen(cfg: SynthConfig) -> tuple[EmbeddingTable, SynthGroundTruth]:
    cfg.validate()
    gene_rng = substream(cfg.seed, "synth", "genes")
    genes, null_genes, groups, directions, pairs = _directions(cfg, gene_rng)
    layout, replicate_pairs = _gene_layout(cfg, genes, gene_rng)
    group_of = {g: f"group{i:02d}" for i, members in enumerate(groups) for g in members}
    effects = {
        g: (np.zeros(cfg.dim) if g in null_genes else cfg.effect_magnitude * directions[g]) for g in genes
    }

    records, blocks_out, transforms = [], [], {}
    for e in range(cfg.n_experiments):
        exp = experiment_name(e)
        rng = substream(cfg.seed, "synth", "experiment", exp)
        rot = random_rotation(rng, cfg.dim)
        stretch = batch_stretch(rot, cfg.batch_rotation_strength)
        shift = cfg.batch_shift_sigma * rng.standard_normal(cfg.dim)
        transforms[exp] = (stretch, shift)
        means, rows = [], []
        well = 0
        for g in genes:
            if exp not in layout[g]:
                continue
            for k in range(cfg.n_guides_per_gene):
                for _ in range(cfg.wells_per_guide_per_experiment):
                    rows.append(
                        dict(
                            perturbation_id=f"{g}_g{k}",
                            perturbation_type=PerturbationType.GENE_KNOCKOUT_GUIDE.value,
                            gene_id=g,
                            functional_group=group_of.get(g, "ungrouped"),
                        )
                    )
                    means.append(effects[g])
        for _ in range(cfg.n_neg_controls_per_experiment):
            rows.append(
                dict(
                    perturbation_id="NEG",
                    perturbation_type=PerturbationType.NEGATIVE_CONTROL.value,
                    gene_id=None,
                    functional_group="control",
                )
            )
            means.append(np.zeros(cfg.dim))
        noise = cfg.noise_sigma * rng.standard_normal((len(rows), cfg.dim))
        x = (np.asarray(means).reshape(len(rows), cfg.dim) + noise) @ stretch.T + shift
        for row in rows:
            row.update(
                well_id=f"{exp}_W{well:05d}",
                experiment_id=exp,
                plate_id=f"{exp}_P{well // (len(PLATE_ROWS) * PLATE_COLS) + 1}",
                well_position=well_position(well),
                concentration=None,
                cell_type="synthetic",
            )
            well += 1
        records.extend(rows)
        blocks_out.append(x)

    emb = np.vstack(blocks_out) if blocks_out else np.zeros((0, cfg.dim))
    table = EmbeddingTable.from_records(records, emb)
    truth = SynthGroundTruth(
        null_genes=null_genes,
        related_groups=groups,
        related_pairs=pairs,
        effects=effects,
        directions=directions,
        batch_transforms=transforms,
        gene_experiments=layout,
        replicate_pairs=replicate_pairs,
    )
    return table, truth


def block_profile(n_blocks: int, peak_block: int, decay: float = 0.35) -> np.ndarray:
    """Signal scale per block: ``exp(-decay * |b - peak|)``, strictly unimodal."""
    b = np.arange(1, n_blocks + 1)
    return np.exp(-decay * np.abs(b - peak_block))


def generate_block_family(
    cfg: SynthConfig, n_blocks: int, peak_block: int, decay: float = 0.35
) -> list[BlockFeatureSet]:
    """Per-block features for a probe sweep with a planted separability peak.

    Each gene is a class with one guide; a well of gene ``g`` in block ``b``
    is ``profile[b] * mu_g + eps`` where ``eps`` is shared across blocks, so
    expected separability follows the unimodal profile exactly.
    """
    if not 1 <= peak_block <= n_blocks:
        raise ValueError(f"peak_block must be in [1, {n_blocks}], got {peak_block}")
    cfg.validate()
    rng = substream(cfg.seed, "synth", "blocks")
    genes, null_genes, groups, directions, _ = _directions(cfg, rng)
    group_of = {g: f"group{i:02d}" for i, members in enumerate(groups) for g in members}
    records, means = [], []
    for e in range(cfg.n_experiments):
        exp = experiment_name(e)
        for g in genes:
            for w in range(cfg.wells_per_guide_per_experiment):
                records.append(
                    dict(
                        well_id=f"{exp}_{g}_W{w}",
                        experiment_id=exp,
                        plate_id=f"{exp}_P1",
                        well_position=f"{g}_{w}",
                        perturbation_id=f"{g}_g0",
                        perturbation_type=PerturbationType.GENE_KNOCKOUT_GUIDE.value,
                        gene_id=g,
                        concentration=None,
                        cell_type="synthetic",
                        functional_group=group_of.get(g, "ungrouped"),
                    )
                )
                means.append(np.zeros(cfg.dim) if g in null_genes else cfg.effect_magnitude * directions[g])
    means = np.asarray(means).reshape(len(records), cfg.dim)
    noise = cfg.noise_sigma * rng.standard_normal(means.shape)
    profile = block_profile(n_blocks, peak_block, decay)
    base = EmbeddingTable.from_records(records, noise)
    return [
        BlockFeatureSet(b + 1, base.with_embeddings(profile[b] * means + noise), "perturbation_id")
        for b in range(n_blocks)
    ]


def degrade(table: EmbeddingTable, noise_sigma: float, seed: int, tag: str = "") -> EmbeddingTable:
    """Copy of ``table`` with extra isotropic noise on every embedding."""
    rng = substream(seed, "degrade", tag, repr(float(noise_sigma)))
    return table.with_embeddings(table.embeddings + noise_sigma * rng.standard_normal(table.embeddings.shape))


# --------------------------------------------------------------------------
# Curation manifests


@dataclass
class ManifestGroundTruth:
    kept_well_ids: frozenset
    fates: dict  # condition -> planted fate
    consistency: list  # [(model_tag, {condition: combined_p})]


def stratum_selection(well_ids: list, rate: float, seed: int, category: str, experiment: str) -> list:
    """Documented undersampling rule: seeded permutation of the sorted ids,
    first ``ceil(rate * n)`` kept."""
    ids = sorted(well_ids)
    if not ids:
        return []
    rng = substream(seed, "undersample", category, experiment)
    perm = rng.permutation(len(ids))
    keep = math.ceil(rate * len(ids) - 1e-9)
    return [ids[i] for i in perm[:keep]]


_FATES = ("pass", "pass_model_b", "boundary", "few_experiments", "few_wells", "no_phenoprint", "uncovered")
QUALITY_FLAGS = ("qc_focus", "qc_dead_cells", "qc_artifacts")


def generate_manifest(
    seed: int = 0,
    n_experiments: int = 6,
    n_conditions: int = 280,
    keep_rates: tuple[float, float, float] = (0.10, 0.30, 0.10),
    controls_per_experiment: tuple[int, int, int] = (40, 100, 40),
) -> tuple[DatasetManifest, ManifestGroundTruth]:
    """Curation manifest with planted per-condition and per-row fates.

    Conditions are assigned fates (see ``_FATES``).  Row-level defects
    (failed quality flag, more than 3 perturbations, bad shape tag, missing
    perturbation info) are planted only where they cannot change a
    condition's replication counts below its planted threshold.
    ``keep_rates`` are (positive, negative, unperturbed).
    """
    rng = substream(seed, "synth", "manifest")
    exps = [experiment_name(i) for i in range(n_experiments)]
    rows = []
    fates, pa, pb = {}, {}, {}
    kept: set[str] = set()
    counter = [0]

    def add(exp, conds, ptype, count=None, flags=None, shape="standard"):
        wid = f"{exp}_W{counter[0]:06d}"
        counter[0] += 1
        rows.append(
            dict(
                well_id=wid,
                experiment_id=exp,
                perturbation_ids=tuple(conds),
                perturbation_type=ptype,
                perturbation_count=len(conds) if count is None else count,
                image_shape_tag=shape,
                flags=flags or {f: True for f in QUALITY_FLAGS},
            )
        )
        return wid

    def defect(exp, conds, ptype):
        kind = rng.integers(4)
        if kind == 0:
            flags = {f: True for f in QUALITY_FLAGS}
            flags[QUALITY_FLAGS[rng.integers(len(QUALITY_FLAGS))]] = False
            add(exp, conds, ptype, flags=flags)
        elif kind == 1:
            add(exp, conds, ptype, count=4)
        elif kind == 2:
            add(exp, conds, ptype, shape="unusual")
        else:
            add(exp, (), ptype, count=0)

    fate_of = [_FATES[i % len(_FATES)] for i in range(n_conditions)]
    fate_of = [fate_of[i] for i in rng.permutation(n_conditions)]
    genetic = PerturbationType.GENE_KNOCKOUT_GUIDE.value
    passing_for_multi = []
    cond_wells: dict[str, list] = {}
    for c, fate in enumerate(fate_of):
        cond = f"C{c:04d}"
        fates[cond] = fate
        if fate == "few_experiments":
            chosen = sorted(rng.choice(n_experiments, 2, replace=False))
            n_wells = 30
        elif fate == "few_wells":
            chosen = sorted(rng.choice(n_experiments, 4, replace=False))
            n_wells = 19
        elif fate == "boundary":
            chosen = sorted(rng.choice(n_experiments, 3, replace=False))
            n_wells = 20
        else:
            chosen = sorted(rng.choice(n_experiments, 5, replace=False))
            n_wells = 30
        ids = []
        for w in range(n_wells):
            ids.append(add(exps[chosen[w % len(chosen)]], (cond,), genetic))
        cond_wells[cond] = ids
        if fate in ("pass", "pass_model_b", "no_phenoprint"):
            # at most 5 defective extra rows; never enough to move counts
            for _ in range(int(rng.integers(0, 6))):
                defect(exps[chosen[int(rng.integers(len(chosen)))]], (cond,), genetic)
            passing_for_multi.append(cond)

        good = fate in ("pass", "pass_model_b", "boundary")
        if fate == "pass" or fate == "boundary":
            pa[cond], pb[cond] = float(rng.uniform(1e-4, 0.009)), float(rng.uniform(0.02, 1.0))
        elif fate == "pass_model_b":
            pa[cond], pb[cond] = 0.5, 0.005
        elif fate == "no_phenoprint":
            pa[cond], pb[cond] = 0.02, float(rng.uniform(0.01, 1.0))
        elif fate in ("few_experiments", "few_wells"):
            # phenoprint present, so only the replication filter removes them
            pa[cond], pb[cond] = 0.001, 0.5
        if good:
            kept.update(ids)

    # two-condition wells pair a phenoprint condition with a failing one
    with_print = [c for c in passing_for_multi if fates[c] in ("pass", "pass_model_b")]
    without = [c for c in passing_for_multi if fates[c] == "no_phenoprint"]
    for k in range(min(len(with_print), len(without), 60)):
        exp = exps[int(rng.integers(n_experiments))]
        wid = add(exp, (with_print[k], without[k]), genetic)
        kept.add(wid)
    for k in range(min(len(without) - 1, 30)):
        exp = exps[int(rng.integers(n_experiments))]
        add(exp, (without[k], without[k + 1]), genetic)

    categories = (
        (PerturbationType.POSITIVE_CONTROL.value, "POS", keep_rates[0], controls_per_experiment[0]),
        (PerturbationType.NEGATIVE_CONTROL.value, "NEG", keep_rates[1], controls_per_experiment[1]),
        (PerturbationType.UNPERTURBED.value, None, keep_rates[2], controls_per_experiment[2]),
    )
    pa["POS"], pb["POS"] = 0.001, 0.003
    pa["NEG"], pb["NEG"] = 0.6, 0.7
    fates["POS"], fates["NEG"] = "control_phenoprint", "control_no_phenoprint"
    for ptype, cond, rate, n in categories:
        for exp in exps:
            survivors = []
            for _ in range(n):
                if rng.random() < 0.05:
                    defect_flags = {f: True for f in QUALITY_FLAGS}
                    defect_flags["qc_focus"] = False
                    add(exp, () if cond is None else (cond,), ptype, flags=defect_flags)
                else:
                    survivors.append(add(exp, () if cond is None else (cond,), ptype))
            selected = stratum_selection(survivors, rate, seed, ptype, exp)
            if cond == "POS":
                kept.update(selected)

    order = rng.permutation(len(rows))
    rows = [rows[i] for i in order]
    manifest = DatasetManifest.from_records(rows, flags=QUALITY_FLAGS)
    covered = {c for c, f in fates.items() if f != "uncovered"}
    consistency = [
        ("model_a", {c: pa[c] for c in sorted(covered) if c in pa}),
        ("model_b", {c: pb[c] for c in sorted(covered) if c in pb}),
    ]
    return manifest, ManifestGroundTruth(frozenset(kept), fates, consistency)


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
