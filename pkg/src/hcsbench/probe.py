"""Block-wise linear probing.

A probe is a multinomial logistic regression with balanced class weights
and an L2 penalty on the weights, trained with L-BFGS on standardized
features.  ``sweep_blocks`` trains one probe per encoder block on an
experiment-held-out split and picks the block with the best balanced
accuracy (smallest index on ties).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from . import stats
from ._parallel import pmap
from .data import EmbeddingTable
from .normalize import ScalerTransform, apply_scaler, fit_standard_scaler

log = logging.getLogger(__name__)

LABEL_KEYS = ("perturbation_id", "functional_group")


@dataclass(frozen=True)
class BlockFeatureSet:
    block_index: int
    features: EmbeddingTable
    label_key: str = "perturbation_id"

    def __post_init__(self):
        if self.label_key not in LABEL_KEYS:
            raise ValueError(f"label_key must be one of {LABEL_KEYS}")
        if self.label_key not in self.features.meta.columns:
            raise ValueError(f"features have no {self.label_key!r} column")

    @property
    def labels(self) -> np.ndarray:
        return self.features.meta[self.label_key].to_numpy().astype(str)


@dataclass(frozen=True)
class ProbeConfig:
    C: float = 1.0
    max_iter: int = 2000
    tol: float = 1e-4


@dataclass
class ProbeModel:
    weights: np.ndarray
    bias: np.ndarray
    class_labels: list
    scaler: ScalerTransform
    converged: bool
    iterations_used: int
    loss_history: list = field(default_factory=list, repr=False)

    def decision_function(self, x) -> np.ndarray:
        z = apply_scaler(self.scaler, np.asarray(x, dtype=np.float64))
        return z @ self.weights.T + self.bias

    def predict(self, x) -> np.ndarray:
        scores = self.decision_function(x)
        return np.asarray(self.class_labels, dtype=object)[np.argmax(scores, axis=1)]


@dataclass(frozen=True)
class ExperimentSplit:
    train_index: np.ndarray
    test_index: np.ndarray
    dropped_classes: tuple
    n_dropped_test_rows: int


@dataclass(frozen=True)
class ProbeSweepResult:
    block_accuracies: list  # [(block_index, balanced_accuracy)]
    best_block: int
    best_accuracy: float


def balanced_class_weights(y: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """``n_total / (n_classes * n_c)`` for each class in ``classes``."""
    counts = np.array([(y == c).sum() for c in classes], dtype=np.float64)
    return len(y) / (len(classes) * counts)


def probe_objective(params: np.ndarray, x: np.ndarray, y_onehot: np.ndarray, sample_w: np.ndarray, C: float):
    """Weighted multinomial cross-entropy times C plus ``0.5 * ||W||^2``.

    ``params`` packs ``W`` (classes x D) row-major followed by the bias.
    Returns ``(loss, gradient)``.
    """
    k = y_onehot.shape[1]
    d = x.shape[1]
    w = params[: k * d].reshape(k, d)
    b = params[k * d :]
    scores = x @ w.T + b
    lse = logsumexp(scores, axis=1)
    nll = lse - np.einsum("ij,ij->i", scores, y_onehot)
    loss = C * float(sample_w @ nll) + 0.5 * float(np.sum(w * w))
    resid = (np.exp(scores - lse[:, None]) - y_onehot) * (C * sample_w)[:, None]
    grad_w = resid.T @ x + w
    grad_b = resid.sum(axis=0)
    return loss, np.concatenate([grad_w.ravel(), grad_b])


def train_logistic_probe(x_train, y_train, cfg: ProbeConfig = ProbeConfig()) -> ProbeModel:
    x = np.asarray(x_train, dtype=np.float64)
    y = np.asarray(y_train).astype(str)
    if not np.isfinite(x).all():
        raise ValueError("probe features must be finite")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("probe needs at least 2 classes")
    scaler = fit_standard_scaler(x)
    z = apply_scaler(scaler, x)
    onehot = (y[:, None] == classes[None, :]).astype(np.float64)
    sample_w = balanced_class_weights(y, classes)[np.searchsorted(classes, y)]
    k, d = classes.size, z.shape[1]
    history: list[float] = []
    last: dict = {}

    def fun(p):
        loss, grad = probe_objective(p, z, onehot, sample_w, cfg.C)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite probe loss")
        last["p"], last["loss"] = p.copy(), loss
        return loss, grad

    def track(p):
        history.append(last["loss"] if np.array_equal(p, last.get("p")) else fun(p)[0])

    x0 = np.zeros(k * d + k)
    history.append(fun(x0)[0])
    res = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        callback=track,
        options={"maxiter": cfg.max_iter, "gtol": cfg.tol, "ftol": 64 * np.finfo(float).eps, "maxls": 50},
    )
    converged = bool(res.success) and np.max(np.abs(res.jac)) <= cfg.tol
    if not converged:
        log.info("probe stopped without reaching gtol: %s", res.message)
    return ProbeModel(
        weights=res.x[: k * d].reshape(k, d),
        bias=res.x[k * d :],
        class_labels=classes.tolist(),
        scaler=scaler,
        converged=converged,
        iterations_used=int(res.nit),
        loss_history=history,
    )


def balanced_accuracy(predictions, labels) -> float:
    pred = np.asarray(predictions).astype(str)
    true = np.asarray(labels).astype(str)
    if true.size == 0:
        raise ValueError("empty input")
    if pred.shape != true.shape:
        raise ValueError("predictions and labels differ in length")
    recalls = [np.mean(pred[true == c] == c) for c in np.unique(true)]
    return float(np.mean(recalls))


def split_by_experiment(
    table: EmbeddingTable, test_experiment_ids: Sequence[str], label_key: str = "perturbation_id"
) -> ExperimentSplit:
    """Partition rows by experiment; classes absent from train are dropped."""
    test_ids = set(test_experiment_ids)
    if not test_ids:
        raise ValueError("no test experiments given")
    exps = table.meta["experiment_id"].to_numpy()
    absent = test_ids - set(exps)
    if absent:
        raise ValueError(f"test experiments not in table: {sorted(absent)}")
    labels = table.meta[label_key].to_numpy().astype(str)
    is_test = np.isin(exps, list(test_ids))
    train_classes = set(labels[~is_test])
    unseen = is_test & ~np.isin(labels, list(train_classes))
    dropped = tuple(sorted(set(labels[unseen])))
    if dropped:
        log.warning("dropping %d test rows of %d classes absent from train", int(unseen.sum()), len(dropped))
    train = np.flatnonzero(~is_test)
    test = np.flatnonzero(is_test & ~unseen)
    if train.size == 0 or test.size == 0:
        raise ValueError("experiment split leaves an empty train or test set")
    return ExperimentSplit(train, test, dropped, int(unseen.sum()))


def evaluate_block(block: BlockFeatureSet, split: ExperimentSplit, cfg: ProbeConfig = ProbeConfig()) -> float:
    x = block.features.embeddings
    y = block.labels
    model = train_logistic_probe(x[split.train_index], y[split.train_index], cfg)
    return balanced_accuracy(model.predict(x[split.test_index]), y[split.test_index])


def sweep_blocks(
    blocks: Sequence[BlockFeatureSet],
    test_experiment_ids: Sequence[str],
    cfg: ProbeConfig = ProbeConfig(),
    threads: int | None = 1,
) -> ProbeSweepResult:
    """One probe per block on a shared split; best block by balanced accuracy."""
    if not blocks:
        raise ValueError("no blocks to sweep")
    indices = [b.block_index for b in blocks]
    if len(set(indices)) != len(indices):
        raise ValueError("duplicate block indices")
    ref = blocks[0]
    for b in blocks[1:]:
        if len(b.features) != len(ref.features) or not np.array_equal(b.labels, ref.labels):
            raise ValueError(f"block {b.block_index} rows or labels differ from block {ref.block_index}")
        if not np.array_equal(b.features.meta["experiment_id"].to_numpy(), ref.features.meta["experiment_id"].to_numpy()):
            raise ValueError(f"block {b.block_index} experiment assignment differs")
    split = split_by_experiment(ref.features, test_experiment_ids, ref.label_key)
    accs = pmap(lambda b: evaluate_block(b, split, cfg), list(blocks), threads)
    scored = sorted(zip(indices, accs))
    best_block, best_acc = scored[0]
    for idx, acc in scored[1:]:
        if acc > best_acc:
            best_block, best_acc = idx, acc
    return ProbeSweepResult(scored, best_block, best_acc)


def correlate_probe_with_benchmarks(probe_scores, benchmark_scores) -> float:
    """Spearman rank correlation between probe accuracies and a benchmark
    metric, matched by model tag."""
    probe = dict(probe_scores)
    bench = dict(benchmark_scores)
    if set(probe) != set(bench):
        raise ValueError(f"model tags differ: {sorted(set(probe) ^ set(bench))}")
    if len(probe) < 3:
        raise ValueError("need at least 3 models")
    tags = sorted(probe)
    return stats.spearman_rho([probe[t] for t in tags], [bench[t] for t in tags])
