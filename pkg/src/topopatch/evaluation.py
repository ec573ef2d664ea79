"""Evaluation protocol: patient-stratified folds, classification metrics,
run-then-fold aggregation, the Wilcoxon signed-rank test, and random
hyperparameter search.

Subjects (never images) are split; every longitudinal image of a training
subject is used, while each validation subject contributes one randomly
selected image.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AlignmentError,
    DataError,
    IncompleteGridError,
    MetricUndefinedError,
    ParameterError,
    StratificationError,
)

METRIC_NAMES = ("acc", "auc", "aps", "recall", "precision")


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    label: int
    images: tuple[str, ...]

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"{self.subject_id}: label must be 0 or 1, got {self.label}")
        if not self.images:
            raise DataError(f"{self.subject_id}: needs at least one image")
        object.__setattr__(self, "images", tuple(self.images))


@dataclass(frozen=True)
class Fold:
    train_subjects: tuple[str, ...]
    val_subjects: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: tuple[Fold, ...]
    val_image: dict[str, str]  # validation subject -> its selected image


def load_manifest(path) -> list[SubjectRecord]:
    """JSON-lines manifest: {"subject_id", "label", "images": [...]} per line."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            records.append(SubjectRecord(d["subject_id"], int(d["label"]),
                                         tuple(d["images"])))
    if not records:
        raise DataError(f"{path}: empty manifest")
    return records


def save_manifest(records, path) -> None:
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"subject_id": r.subject_id, "label": r.label,
                                 "images": list(r.images)}) + "\n")
    os.replace(tmp, path)


def stratified_indices(labels: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Per-sample fold ids in [0, k): round-robin within each shuffled class."""
    y = np.asarray(labels).reshape(-1)
    out = np.empty(len(y), dtype=np.int64)
    rng = np.random.default_rng([seed, 17])
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        rng.shuffle(idx)
        out[idx] = np.arange(len(idx)) % k
    return out


def stratified_folds(subjects: list[SubjectRecord], k: int = 4, seed: int = 0) -> FoldPlan:
    """Deterministic subject-level stratified k-fold plan.

    Validation sets are class-balanced to within one subject; each
    validation subject gets one image drawn uniformly from its longitudinal
    list. Training subjects contribute all their images downstream.
    """
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    ids = [s.subject_id for s in subjects]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate subject ids in cohort")
    by_class: dict[int, list[SubjectRecord]] = {0: [], 1: []}
    for s in subjects:
        by_class[s.label].append(s)
    for cls, members in by_class.items():
        if len(members) < k:
            raise StratificationError(
                f"class {cls} has {len(members)} subjects, needs >= {k} for {k} folds")

    rng = np.random.default_rng([seed, 23])
    fold_of: dict[str, int] = {}
    for cls in (0, 1):
        members = sorted(by_class[cls], key=lambda s: s.subject_id)
        order = rng.permutation(len(members))
        for pos, idx in enumerate(order):
            fold_of[members[idx].subject_id] = pos % k

    folds = []
    for f in range(k):
        val = tuple(s.subject_id for s in subjects if fold_of[s.subject_id] == f)
        train = tuple(s.subject_id for s in subjects if fold_of[s.subject_id] != f)
        folds.append(Fold(train_subjects=train, val_subjects=val))

    img_rng = np.random.default_rng([seed, 29])
    val_image = {}
    for s in sorted(subjects, key=lambda s: s.subject_id):
        val_image[s.subject_id] = s.images[int(img_rng.integers(len(s.images)))]
    return FoldPlan(k=k, seed=seed, folds=tuple(folds), val_image=val_image)


# -- metrics -------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsEntry:
    acc: float
    auc: float | None
    aps: float | None
    recall: float
    precision: float
    n: int

    def get(self, name: str) -> float:
        v = getattr(self, name)
        if v is None:
            raise MetricUndefinedError(f"{name} undefined (single-class labels)")
        return v

    def as_dict(self) -> dict:
        return {"acc": self.acc, "auc": self.auc, "aps": self.aps,
                "recall": self.recall, "precision": self.precision, "n": self.n}


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    npos = int((y == 1).sum())
    nneg = int((y == 0).sum())
    if npos == 0 or nneg == 0:
        raise MetricUndefinedError("AUC needs both classes")
    ranks = _average_ranks(scores)
    return float((ranks[y == 1].sum() - npos * (npos + 1) / 2.0) / (npos * nneg))


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Step-wise precision-recall summation, no interpolation; threshold
    sweeps the distinct score values in descending order."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    npos = int((y == 1).sum())
    if npos == 0 or npos == len(y):
        raise MetricUndefinedError("average precision needs both classes")
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # keep only the last index of each tied score group
    last = np.flatnonzero(np.diff(s_sorted, append=np.nan) != 0)
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / npos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def compute_metrics(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> MetricsEntry:
    """ACC/recall/precision at the threshold plus ranking AUC and APS.

    On single-class labels the ranking metrics are undefined and come back
    as None; reading them via .get() raises MetricUndefinedError.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if len(scores) != len(y):
        raise AlignmentError("scores and labels must align")
    if len(y) == 0:
        raise DataError("empty evaluation set")
    pred = (scores >= threshold).astype(np.int64)
    acc = float((pred == y).mean())
    tp = int(((pred == 1) & (y == 1)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    both = 0 < int((y == 1).sum()) < len(y)
    auc = roc_auc(scores, y) if both else None
    aps = average_precision(scores, y) if both else None
    return MetricsEntry(acc=acc, auc=auc, aps=aps, recall=float(recall),
                        precision=float(precision), n=len(y))


@dataclass(frozen=True)
class MetricsReport:
    per_run: dict[tuple[int, int], MetricsEntry]  # (fold, run) -> entry
    per_fold: dict[int, dict[str, float]]
    mean: dict[str, float]
    std: dict[str, float]

    def summary(self) -> str:
        parts = [f"{m}={self.mean[m]:.3f}±{self.std[m]:.3f}" for m in METRIC_NAMES]
        return " ".join(parts)


def aggregate(per_run_metrics: dict[tuple[int, int], MetricsEntry],
              runs_per_fold: int = 4) -> MetricsReport:
    """Mean over runs within folds, then mean and population sd over the
    fold means. The (fold, run) grid must be complete."""
    folds = sorted({f for f, _ in per_run_metrics})
    if not folds:
        raise IncompleteGridError("no metric entries")
    for f in folds:
        for r in range(runs_per_fold):
            if (f, r) not in per_run_metrics:
                raise IncompleteGridError(f"missing entry for fold {f}, run {r}")
    per_fold: dict[int, dict[str, float]] = {}
    for f in folds:
        per_fold[f] = {
            m: float(np.mean([per_run_metrics[(f, r)].get(m) for r in range(runs_per_fold)]))
            for m in METRIC_NAMES
        }
    mean = {m: float(np.mean([per_fold[f][m] for f in folds])) for m in METRIC_NAMES}
    std = {m: float(np.std([per_fold[f][m] for f in folds])) for m in METRIC_NAMES}
    return MetricsReport(per_run=dict(per_run_metrics), per_fold=per_fold, mean=mean, std=std)


# -- Wilcoxon signed-rank --------------------------------------------------------


def wilcoxon_signed_rank(paired_a, paired_b) -> tuple[float, float]:
    """(W, two-sided p); W is the smaller signed-rank sum.

    Zero differences are dropped; ties get average ranks. Exact p for n <=
    12 enumerates all sign assignments of the observed |differences| and
    counts min(T+, T-) <= observed; larger n uses the normal approximation
    with tie and continuity corrections. All-zero differences give p = 1.
    """
    a = np.asarray(paired_a, dtype=np.float64).reshape(-1)
    b = np.asarray(paired_b, dtype=np.float64).reshape(-1)
    if len(a) != len(b):
        raise AlignmentError("paired samples must have equal length")
    if len(a) == 0:
        raise DataError("empty paired samples")
    d = a - b
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return 0.0, 1.0
    ranks = _average_ranks(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    w_neg = float(ranks[d < 0].sum())
    w = min(w_pos, w_neg)
    if n <= 12:
        count = 0
        total = 1 << n
        for mask in range(total):
            t_pos = 0.0
            for i in range(n):
                if mask >> i & 1:
                    t_pos += ranks[i]
            t_min = min(t_pos, ranks.sum() - t_pos)
            if t_min <= w + 1e-9:
                count += 1
        return w, count / total
    # normal approximation with tie correction
    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    sigma = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
    if sigma == 0.0:
        return w, 1.0
    z = (w - mu + 0.5) / sigma
    p = math.erfc(-z / math.sqrt(2.0))  # 2 * Phi(z) for z <= 0
    return w, float(min(1.0, p))


# -- random hyperparameter search -------------------------------------------------


def sample_space(space: dict, rng: np.random.Generator) -> dict:
    """One draw from a search space: ("loguniform", lo, hi),
    ("uniform", lo, hi), or ("choice", [options])."""
    out = {}
    for name, spec in space.items():
        kind = spec[0]
        if kind == "loguniform":
            lo, hi = float(spec[1]), float(spec[2])
            out[name] = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        elif kind == "uniform":
            out[name] = float(rng.uniform(float(spec[1]), float(spec[2])))
        elif kind == "choice":
            options = list(spec[1])
            out[name] = options[int(rng.integers(len(options)))]
        else:
            raise ParameterError(f"unknown search dimension kind {kind!r}")
    return out


def random_search(space: dict, budget: int, objective, seed: int = 0):
    """Sample the space i.i.d., score each draw with the objective (higher is
    better, e.g. validation APS), return (best_config, trace)."""
    if budget < 1:
        raise ParameterError(f"budget must be >= 1, got {budget}")
    if not space:
        raise ParameterError("empty search space")
    rng = np.random.default_rng([seed, 31])
    trace = []
    best = None
    for i in range(budget):
        cfg = sample_space(space, rng)
        score = float(objective(cfg))
        trace.append({"index": i, "config": cfg, "score": score})
        if best is None or score > best[0]:
            best = (score, cfg)
    return best[1], trace
