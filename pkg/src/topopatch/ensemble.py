"""Fusion of local and global classifiers.

Scheme one: per-patch probabilities from all patch models, centered around
a zero decision boundary, feed an L2-penalized logistic regression whose
inverse-regularization strength is grid-searched by inner stratified CV.
Scheme two: the preclassification encodings of the best patch model and the
persistence-image model concatenate into a single dense+sigmoid layer
trained with an L1 penalty chosen by validation average precision.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import (
    AlignmentError,
    DataError,
    DegenerateDataError,
    ParameterError,
    RangeError,
)
from .evaluation import average_precision, stratified_indices
from .nn.train import AdamState, EarlyStopper, TrainConfig, adam_step


@dataclass(frozen=True)
class PatchProbabilityVector:
    """Centered per-patch probabilities for one image, patch-lexicographic order."""

    subject_id: str
    image_id: str
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise AlignmentError(f"feature vector must be 1D, got shape {vals.shape}")
        if (vals < -1).any() or (vals > 1).any():
            raise RangeError("centered probabilities must lie in [-1, 1]")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class FusionConfig:
    l1_grid: tuple[float, ...] = (1e-4, 1e-3, 1e-2, 1e-1)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=1e-2, max_epochs=2000, patience=100, batch_size=32))
    holdout_fraction: float = 0.25

    def __post_init__(self):
        if not self.l1_grid or any(l1 < 0 for l1 in self.l1_grid):
            raise ParameterError("l1_grid must be non-empty and non-negative")
        if not (0.0 < self.holdout_fraction < 1.0):
            raise ParameterError("holdout_fraction must lie in (0, 1)")


def normalize_center(probabilities: np.ndarray) -> np.ndarray:
    """p -> 2p - 1: maps [0, 1] onto [-1, 1] with the 0.5 boundary at zero."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.size and ((p < 0).any() or (p > 1).any()):
        raise RangeError("probabilities must lie in [0, 1]")
    return 2.0 * p - 1.0


# -- logistic regression -------------------------------------------------------


@dataclass
class LogisticModel:
    coef: np.ndarray
    intercept: float
    inverse_reg: float

    def decision(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.coef + self.intercept

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.coef.shape[0]:
            raise AlignmentError(
                f"feature matrix with {x.shape[-1] if x.ndim == 2 else '?'} columns "
                f"does not match {self.coef.shape[0]} coefficients")
        return expit(self.decision(x))


def fit_logistic(x: np.ndarray, y: np.ndarray, inverse_reg: float,
                 tol: float = 1e-6, max_iter: int = 200) -> LogisticModel:
    """Damped Newton on BCE-sum + ||w||^2 / (2 C); the intercept is not
    penalized. Deterministic, converges to max-abs gradient <= tol."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or len(x) != len(y):
        raise AlignmentError("features and labels must align")
    classes = np.unique(y)
    if len(classes) < 2:
        raise DegenerateDataError("logistic fit needs both classes present")
    if inverse_reg <= 0:
        raise ParameterError(f"inverse regularization must be positive, got {inverse_reg}")
    n, d = x.shape
    lam = 1.0 / inverse_reg
    theta = np.zeros(d + 1)
    xa = np.hstack([x, np.ones((n, 1))])

    def loss_grad(th):
        z = xa @ th
        p = expit(z)
        eps = 1e-12
        loss = -np.sum(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
        loss += 0.5 * lam * np.dot(th[:d], th[:d])
        g = xa.T @ (p - y)
        g[:d] += lam * th[:d]
        return loss, g, p

    loss, g, p = loss_grad(theta)
    for _ in range(max_iter):
        if np.max(np.abs(g)) <= tol:
            break
        w = np.maximum(p * (1 - p), 1e-10)
        h = (xa * w[:, None]).T @ xa
        h[np.arange(d), np.arange(d)] += lam
        h[np.arange(d + 1), np.arange(d + 1)] += 1e-12
        step = np.linalg.solve(h, g)
        t = 1.0
        for _ in range(50):
            cand = theta - t * step
            new_loss, new_g, new_p = loss_grad(cand)
            if new_loss <= loss + 1e-12:
                theta, loss, g, p = cand, new_loss, new_g, new_p
                break
            t *= 0.5
        else:
            break
    return LogisticModel(coef=theta[:d].copy(), intercept=float(theta[d]),
                         inverse_reg=inverse_reg)


def fit_lr_gridsearch(features: np.ndarray, labels: np.ndarray,
                      grid: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0),
                      folds: int = 3, seed: int = 0) -> tuple[LogisticModel, float]:
    """Choose the inverse-regularization strength by inner stratified k-fold
    mean average precision (ties go to the stronger penalty, i.e. the
    smaller value), then refit on everything."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if not len(grid):
        raise ParameterError("grid must be non-empty")
    counts = [int((y == c).sum()) for c in (0, 1)]
    if min(counts) < 2:
        raise DegenerateDataError("need at least 2 samples per class")
    if len(grid) == 1:
        c = float(grid[0])
        return fit_logistic(x, y, c), c

    k = min(folds, min(counts))
    fold_ids = stratified_indices(y, k, seed)
    scores = []
    for c in grid:
        aps = []
        for fold in range(k):
            tr = fold_ids != fold
            va = ~tr
            if len(np.unique(y[va])) < 2 or len(np.unique(y[tr])) < 2:
                continue
            m = fit_logistic(x[tr], y[tr], float(c))
            aps.append(average_precision(m.predict_proba(x[va]), y[va]))
        scores.append(float(np.mean(aps)) if aps else float("-inf"))
    order = sorted(range(len(grid)), key=lambda i: (-scores[i], grid[i]))
    chosen = float(grid[order[0]])
    return fit_logistic(x, y, chosen), chosen


# -- fused preclassification layer ----------------------------------------------


@dataclass
class FusionModel:
    weights: np.ndarray
    bias: float
    l1_strength: float
    history: list = field(default_factory=list, repr=False)

    def predict_proba(self, encodings: np.ndarray) -> np.ndarray:
        x = np.asarray(encodings, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weights.shape[0]:
            raise AlignmentError("encoding width does not match fusion weights")
        return expit(x @ self.weights + self.bias)


def _train_fusion_layer(x_tr, y_tr, x_va, y_va, l1_strength, config: TrainConfig):
    d = x_tr.shape[1]
    params = {"w": np.zeros(d, dtype=np.float64), "b": np.zeros(1, dtype=np.float64)}
    state = AdamState()
    shuffle = np.random.default_rng([config.seed, 3])
    stopper = EarlyStopper(config.patience)
    best = (params["w"].copy(), 0.0)
    history = []
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle.permutation(len(x_tr))
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            p = expit(xb @ params["w"] + params["b"][0])
            g = (p - yb) / len(idx)
            grads = {
                "w": xb.T @ g + l1_strength * np.sign(params["w"]),
                "b": np.array([g.sum()]),
            }
            adam_step(params, grads, state, config)
        p_va = expit(x_va @ params["w"] + params["b"][0])
        pc = np.clip(p_va, 1e-7, 1 - 1e-7)
        val_loss = float(-np.mean(y_va * np.log(pc) + (1 - y_va) * np.log1p(-pc)))
        history.append({"epoch": epoch, "val_loss": val_loss})
        improved = val_loss < stopper.best_loss
        if stopper.update(epoch, val_loss):
            if improved:
                best = (params["w"].copy(), float(params["b"][0]))
            break
        if improved:
            best = (params["w"].copy(), float(params["b"][0]))
    return best[0], best[1], history


def fit_fusion(encodings_a: np.ndarray, encodings_b: np.ndarray, labels: np.ndarray,
               config: FusionConfig | None = None, seed: int | None = None) -> FusionModel:
    """Train the dense(1)+sigmoid layer over concatenated frozen encodings.

    The L1 strength comes from config.l1_grid by average precision on an
    internal stratified holdout (which also drives early stopping); the
    winning candidate's weights are returned as-is.
    """
    config = config or FusionConfig()
    a = np.asarray(encodings_a, dtype=np.float64)
    b = np.asarray(encodings_b, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if a.ndim != 2 or b.ndim != 2 or len(a) != len(b) or len(a) != len(y):
        raise AlignmentError("encodings and labels must align row-wise")
    if len(y) == 0:
        raise DataError("empty training data")
    x = np.hstack([a, b])

    train_cfg = config.train if seed is None else TrainConfig(
        learning_rate=config.train.learning_rate,
        adam_beta1=config.train.adam_beta1,
        adam_beta2=config.train.adam_beta2,
        adam_eps=config.train.adam_eps,
        batch_size=config.train.batch_size,
        max_epochs=config.train.max_epochs,
        patience=config.train.patience,
        seed=seed,
    )

    k = max(2, round(1.0 / config.holdout_fraction))
    fold_ids = stratified_indices(y, k, train_cfg.seed)
    va = fold_ids == 0
    tr = ~va
    if len(np.unique(y[va])) < 2 or len(np.unique(y[tr])) < 2:
        raise DegenerateDataError("holdout split lacks a class; need more data")

    best = None
    for l1 in config.l1_grid:
        w, bias, hist = _train_fusion_layer(x[tr], y[tr], x[va], y[va], float(l1), train_cfg)
        p_va = expit(x[va] @ w + bias)
        aps = average_precision(p_va, y[va])
        if best is None or aps > best[0] + 1e-12:
            best = (aps, float(l1), w, bias, hist)
    _, l1, w, bias, hist = best
    return FusionModel(weights=w, bias=bias, l1_strength=l1, history=hist)


def predict_ensemble(model, inputs: np.ndarray) -> np.ndarray:
    """Probabilities from a fitted LogisticModel or FusionModel."""
    return model.predict_proba(inputs)


# -- feature matrix I/O ----------------------------------------------------------


def save_feature_matrix(path, rows: list[PatchProbabilityVector], labels: dict[str, int]) -> None:
    """CSV: subject_id, image_id, f000..fNNN, label."""
    if not rows:
        raise DataError("no feature rows to save")
    width = len(rows[0].values)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "image_id"] + [f"f{i:03d}" for i in range(width)] + ["label"])
        for r in rows:
            if len(r.values) != width:
                raise AlignmentError("inconsistent feature widths")
            writer.writerow([r.subject_id, r.image_id] + [repr(float(v)) for v in r.values]
                            + [labels[r.subject_id]])


def load_feature_matrix(path) -> tuple[list[PatchProbabilityVector], dict[str, int]]:
    rows = []
    labels = {}
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        width = len(header) - 3
        for rec in reader:
            vals = np.array([float(v) for v in rec[2 : 2 + width]])
            rows.append(PatchProbabilityVector(rec[0], rec[1], vals))
            labels[rec[0]] = int(rec[-1])
    return rows, labels
