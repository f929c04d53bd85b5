"""Embedding-space normalizations.

Standard scaling (probe preprocessing), typical variation normalization
(negative-control PCA whitening), chromosome-arm centering of gene
aggregates and the negative-control origin shift.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import pandas as pd

from .data import EmbeddingTable, GeneAggregateSet, ArmAnnotation, PerturbationType

STD_FLOOR = 1e-8
DEFAULT_EIGENVALUE_FLOOR = 1e-6

ControlSelector = Union[str, np.ndarray, Callable[[pd.DataFrame], np.ndarray], None]


def _rows(x) -> np.ndarray:
    if isinstance(x, EmbeddingTable):
        return x.embeddings
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def _like(x, values: np.ndarray):
    if isinstance(x, EmbeddingTable):
        return x.with_embeddings(values)
    return values


@dataclass(frozen=True)
class ScalerTransform:
    mean: np.ndarray
    stddev: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "stddev": self.stddev.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerTransform":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["stddev"], dtype=np.float64))


def fit_standard_scaler(train_rows) -> ScalerTransform:
    """Per-dimension mean and population standard deviation, floored at 1e-8."""
    x = _rows(train_rows)
    if x.shape[0] < 2:
        raise ValueError(f"standard scaler needs >= 2 rows, got {x.shape[0]}")
    mean = x.mean(axis=0)
    std = np.sqrt(((x - mean) ** 2).mean(axis=0))
    return ScalerTransform(mean, np.maximum(std, STD_FLOOR))


def apply_scaler(t: ScalerTransform, rows):
    x = _rows(rows)
    if x.shape[1] != t.mean.shape[0]:
        raise ValueError(f"dimension mismatch: rows have D={x.shape[1]}, scaler D={t.mean.shape[0]}")
    return _like(rows, (x - t.mean) / t.stddev)


@dataclass(frozen=True)
class WhiteningTransform:
    mean: np.ndarray
    whitening_matrix: np.ndarray
    eigenvalue_floor: float = DEFAULT_EIGENVALUE_FLOOR

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "matrix": self.whitening_matrix.tolist(),
            "floor": self.eigenvalue_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WhiteningTransform":
        return cls(
            np.asarray(d["mean"], dtype=np.float64),
            np.asarray(d["matrix"], dtype=np.float64),
            float(d["floor"]),
        )


def fit_tvn(neg_controls, eigenvalue_floor: float = DEFAULT_EIGENVALUE_FLOOR) -> WhiteningTransform:
    """Fit symmetric PCA whitening on negative-control embeddings.

    The whitening matrix is ``V diag(1/sqrt(lam + floor)) V^T`` where
    ``V, lam`` diagonalize the population covariance of the controls.
    """
    x = _rows(neg_controls)
    if x.shape[0] < 2:
        raise ValueError(f"TVN needs >= 2 negative controls, got {x.shape[0]}")
    if eigenvalue_floor <= 0:
        raise ValueError("eigenvalue_floor must be positive")
    mean = x.mean(axis=0)
    centered = x - mean
    with np.errstate(over="ignore", invalid="ignore"):
        cov = centered.T @ centered / x.shape[0]
    if not np.isfinite(cov).all():
        raise ValueError("non-finite control covariance")
    evals, evecs = np.linalg.eigh(cov)
    # negative eigenvalues are roundoff on a PSD matrix
    scale = 1.0 / np.sqrt(np.clip(evals, 0.0, None) + eigenvalue_floor)
    w = (evecs * scale) @ evecs.T
    w = (w + w.T) / 2
    return WhiteningTransform(mean, w, float(eigenvalue_floor))


def apply_tvn(t: WhiteningTransform, table):
    x = _rows(table)
    if x.shape[1] != t.mean.shape[0]:
        raise ValueError(f"dimension mismatch: table has D={x.shape[1]}, transform D={t.mean.shape[0]}")
    return _like(table, (x - t.mean) @ t.whitening_matrix.T)


def select_controls(meta: pd.DataFrame, selector: ControlSelector = None) -> np.ndarray:
    """Boolean mask of control rows.

    ``selector`` may be None (negative controls), a perturbation_type name,
    a boolean mask, or a callable on the metadata frame.
    """
    if selector is None:
        selector = PerturbationType.NEGATIVE_CONTROL.value
    if isinstance(selector, str):
        return (meta["perturbation_type"] == selector).to_numpy()
    if callable(selector):
        return np.asarray(selector(meta), dtype=bool)
    mask = np.asarray(selector, dtype=bool)
    if mask.shape != (len(meta),):
        raise ValueError("control mask length does not match table")
    return mask


def tvn_by_experiment(
    table: EmbeddingTable,
    control_selector: ControlSelector = None,
    eigenvalue_floor: float = DEFAULT_EIGENVALUE_FLOOR,
) -> tuple[EmbeddingTable, dict[str, WhiteningTransform]]:
    """Fit and apply TVN separately within each experiment (batch)."""
    controls = select_controls(table.meta, control_selector)
    out = np.empty_like(table.embeddings)
    transforms = {}
    exps = table.meta["experiment_id"].to_numpy()
    for exp in sorted(set(exps)):
        rows = exps == exp
        ctrl = rows & controls
        if ctrl.sum() < 2:
            raise ValueError(f"experiment {exp!r} has {int(ctrl.sum())} negative controls; TVN needs >= 2")
        t = fit_tvn(table.embeddings[ctrl], eigenvalue_floor)
        out[rows] = apply_tvn(t, table.embeddings[rows])
        transforms[exp] = t
    return table.with_embeddings(out), transforms


def tvn_global(
    table: EmbeddingTable,
    control_selector: ControlSelector = None,
    eigenvalue_floor: float = DEFAULT_EIGENVALUE_FLOOR,
) -> tuple[EmbeddingTable, WhiteningTransform]:
    controls = select_controls(table.meta, control_selector)
    t = fit_tvn(table.embeddings[controls], eigenvalue_floor)
    return apply_tvn(t, table), t


def center_by_arm(aggregates: GeneAggregateSet, arms: ArmAnnotation) -> np.ndarray:
    """Gene vectors minus the mean vector of their chromosome arm (not renormalized)."""
    labels = np.asarray(arms.lookup(aggregates.genes), dtype=object)
    x = aggregates.vectors
    out = np.empty_like(x)
    for arm in sorted(set(labels)):
        rows = labels == arm
        out[rows] = x[rows] - x[rows].mean(axis=0)
    return out


def arm_bias_correct(aggregates: GeneAggregateSet, arms: ArmAnnotation) -> GeneAggregateSet:
    centered = center_by_arm(aggregates, arms)
    norms = np.linalg.norm(centered, axis=1)
    zero = norms < 1e-12
    if zero.any():
        gene = aggregates.genes[int(np.flatnonzero(zero)[0])]
        raise ValueError(f"arm-centered vector for gene {gene!r} is numerically zero")
    return GeneAggregateSet(aggregates.genes, centered / norms[:, None])


def shift_origin_to_controls(table, control_selector: ControlSelector = None):
    """Subtract the mean of the selected control rows from every embedding."""
    if isinstance(table, EmbeddingTable):
        mask = select_controls(table.meta, control_selector)
    else:
        mask = np.asarray(control_selector, dtype=bool)
    x = _rows(table)
    if not mask.any():
        raise ValueError("no control rows selected for origin shift")
    return _like(table, x - x[mask].mean(axis=0))
