import itertools
import math

import numpy as np
import pytest

from topopatch.errors import (
    AlignmentError,
    DataError,
    IncompleteGridError,
    MetricUndefinedError,
    StratificationError,
)
from topopatch.evaluation import (
    MetricsEntry,
    SubjectRecord,
    aggregate,
    average_precision,
    compute_metrics,
    load_manifest,
    random_search,
    roc_auc,
    save_manifest,
    stratified_folds,
    wilcoxon_signed_rank,
)


def make_cohort(n0, n1, max_images=3, seed=0):
    rng = np.random.default_rng(seed)
    subjects = []
    for i in range(n0 + n1):
        n_img = int(rng.integers(1, max_images + 1))
        subjects.append(SubjectRecord(
            subject_id=f"s{i:03d}", label=0 if i < n0 else 1,
            images=tuple(f"s{i:03d}_img{j}.rvol" for j in range(n_img))))
    return subjects


class TestFolds:
    def test_exact_stratification(self):
        plan = stratified_folds(make_cohort(4, 4), k=4, seed=1)
        subjects = {s.subject_id: s for s in make_cohort(4, 4)}
        for fold in plan.folds:
            labels = [subjects[sid].label for sid in fold.val_subjects]
            assert sorted(labels) == [0, 1]

    def test_deterministic(self):
        a = stratified_folds(make_cohort(10, 8), k=4, seed=9)
        b = stratified_folds(make_cohort(10, 8), k=4, seed=9)
        assert a == b

    def test_no_leakage_and_partition(self):
        cohort = make_cohort(11, 9)
        plan = stratified_folds(cohort, k=4, seed=3)
        all_ids = {s.subject_id for s in cohort}
        seen_val = []
        for fold in plan.folds:
            assert set(fold.train_subjects) & set(fold.val_subjects) == set()
            assert set(fold.train_subjects) | set(fold.val_subjects) == all_ids
            seen_val.extend(fold.val_subjects)
        assert sorted(seen_val) == sorted(all_ids)

    def test_all_longitudinal_images_stay_with_subject(self):
        cohort = make_cohort(5, 5, max_images=3, seed=7)
        plan = stratified_folds(cohort, k=5, seed=7)
        by_id = {s.subject_id: s for s in cohort}
        triple = next(s for s in cohort if len(s.images) == 3)
        in_train = [f for f in plan.folds if triple.subject_id in f.train_subjects]
        assert len(in_train) == 4  # k-1 folds use it for training, all images
        assert plan.val_image[triple.subject_id] in triple.images

    def test_val_image_from_longitudinal_list(self):
        cohort = make_cohort(6, 6, max_images=4, seed=2)
        plan = stratified_folds(cohort, k=3, seed=2)
        by_id = {s.subject_id: s for s in cohort}
        for sid, img in plan.val_image.items():
            assert img in by_id[sid].images

    def test_too_few_subjects(self):
        with pytest.raises(StratificationError):
            stratified_folds(make_cohort(3, 8), k=4, seed=0)

    def test_stratification_bound_random_cohorts(self, rng):
        for trial in range(20):
            n0 = int(rng.integers(5, 20))
            n1 = int(rng.integers(5, 20))
            k = int(rng.integers(2, 5))
            if min(n0, n1) < k:
                continue
            cohort = make_cohort(n0, n1, seed=trial)
            plan = stratified_folds(cohort, k=k, seed=trial)
            by_id = {s.subject_id: s for s in cohort}
            for fold in plan.folds:
                labels = [by_id[sid].label for sid in fold.val_subjects]
                for cls, n in ((0, n0), (1, n1)):
                    got = labels.count(cls)
                    assert abs(got - n / k) < 1.0 + 1e-9


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def brute_force_aps(scores, labels):
    order = np.argsort(-np.asarray(scores), kind="stable")
    s = np.asarray(scores)[order]
    y = np.asarray(labels)[order]
    npos = int(y.sum())
    ap = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores), reverse=True):
        sel = s >= thr
        tp = int(y[sel].sum())
        fp = int(sel.sum()) - tp
        precision = tp / (tp + fp)
        recall = tp / npos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


class TestMetrics:
    def test_perfect_separation(self):
        e = compute_metrics(np.array([0.9, 0.8, 0.3, 0.1]), np.array([1, 1, 0, 0]))
        assert (e.acc, e.auc, e.aps, e.recall, e.precision) == (1.0, 1.0, 1.0, 1.0, 1.0)

    def test_worked_example(self):
        e = compute_metrics(np.array([0.9, 0.6, 0.4, 0.1]), np.array([1, 0, 1, 0]))
        assert e.auc == 0.75
        assert abs(e.aps - (1.0 + 2.0 / 3.0) / 2.0) < 1e-12

    def test_tie_convention(self):
        e = compute_metrics(np.array([0.5, 0.5]), np.array([1, 0]))
        assert e.auc == 0.5

    def test_single_class_undefined(self):
        e = compute_metrics(np.array([0.2, 0.8]), np.array([1, 1]))
        assert e.auc is None and e.aps is None
        assert e.acc == 0.5
        with pytest.raises(MetricUndefinedError):
            e.get("auc")

    def test_threshold_semantics(self):
        e = compute_metrics(np.array([0.5, 0.4]), np.array([1, 0]), threshold=0.5)
        assert e.acc == 1.0  # score >= threshold predicts positive

    def test_matches_brute_force_on_random_vectors(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 60))
            scores = rng.choice([0.1, 0.25, 0.5, 0.75, 0.9], size=n)
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            assert abs(roc_auc(scores, labels) - brute_force_auc(scores, labels)) < 1e-12
            assert abs(average_precision(scores, labels) - brute_force_aps(scores, labels)) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(AlignmentError):
            compute_metrics(np.zeros(3), np.zeros(4))


class TestAggregate:
    def _entry(self, value):
        return MetricsEntry(acc=value, auc=value, aps=value, recall=value,
                            precision=value, n=10)

    def test_constant(self):
        grid = {(f, r): self._entry(0.8) for f in range(4) for r in range(4)}
        rep = aggregate(grid, runs_per_fold=4)
        assert rep.mean["acc"] == pytest.approx(0.8)
        assert rep.std["acc"] == pytest.approx(0.0)

    def test_hand_arithmetic(self):
        vals = {0: 0.9, 1: 0.9, 2: 0.7, 3: 0.7}
        grid = {(f, r): self._entry(vals[f]) for f in range(4) for r in range(2)}
        rep = aggregate(grid, runs_per_fold=2)
        assert rep.mean["auc"] == pytest.approx(0.8)
        assert rep.std["auc"] == pytest.approx(0.1)

    def test_run_mean_within_fold(self):
        grid = {(0, 0): self._entry(1.0), (0, 1): self._entry(0.6)}
        rep = aggregate(grid, runs_per_fold=2)
        assert rep.per_fold[0]["acc"] == pytest.approx(0.8)

    def test_missing_cell(self):
        grid = {(0, 0): self._entry(0.5)}
        with pytest.raises(IncompleteGridError):
            aggregate(grid, runs_per_fold=2)

    def test_run_permutation_invariance(self, rng):
        vals = rng.random((3, 4))
        grid = {(f, r): self._entry(float(vals[f, r])) for f in range(3) for r in range(4)}
        perm = rng.permutation(4)
        grid_p = {(f, r): self._entry(float(vals[f, perm[r]])) for f in range(3) for r in range(4)}
        a = aggregate(grid, runs_per_fold=4)
        b = aggregate(grid_p, runs_per_fold=4)
        assert a.mean == b.mean and a.std == b.std


def exact_wilcoxon_enumeration(diffs):
    """Independent oracle: enumerate sign assignments via itertools."""
    d = np.asarray([x for x in diffs if x != 0], dtype=float)
    n = len(d)
    if n == 0:
        return 0.0, 1.0
    absd = np.abs(d)
    order = np.argsort(absd, kind="stable")
    ranks = np.empty(n)
    sorted_abs = absd[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    w_pos = ranks[d > 0].sum()
    w_obs = min(w_pos, ranks.sum() - w_pos)
    count = 0
    for signs in itertools.product((0, 1), repeat=n):
        t = sum(r for s, r in zip(signs, ranks) if s)
        if min(t, ranks.sum() - t) <= w_obs + 1e-9:
            count += 1
    return float(w_obs), count / 2 ** n


class TestWilcoxon:
    def test_all_positive_distinct(self):
        w, p = wilcoxon_signed_rank([2, 4, 6, 8, 10], [1, 2, 3, 4, 5])
        assert w == 0.0
        assert p == pytest.approx(2 / 32)

    def test_identical_samples(self):
        w, p = wilcoxon_signed_rank([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert p == 1.0

    def test_swap_symmetry(self, rng):
        a = rng.standard_normal(9)
        b = rng.standard_normal(9)
        wa, pa = wilcoxon_signed_rank(a, b)
        wb, pb = wilcoxon_signed_rank(b, a)
        assert wa == wb and pa == pb

    def test_matches_enumeration_oracle(self, rng):
        for n in range(1, 11):
            for _ in range(5):
                a = rng.integers(-5, 6, n).astype(float)
                b = rng.integers(-5, 6, n).astype(float)
                w, p = wilcoxon_signed_rank(a, b)
                w_ref, p_ref = exact_wilcoxon_enumeration(a - b)
                assert w == pytest.approx(w_ref)
                assert p == pytest.approx(p_ref)

    def test_large_n_normal_approximation(self, rng):
        a = rng.standard_normal(40) + 0.8
        b = rng.standard_normal(40)
        w, p = wilcoxon_signed_rank(a, b)
        assert 0.0 < p < 0.05

    def test_length_mismatch(self):
        with pytest.raises(AlignmentError):
            wilcoxon_signed_rank([1, 2], [1])


class TestRandomSearch:
    def test_budget_one(self):
        space = {"x": ("choice", (1, 2, 3))}
        best, trace = random_search(space, 1, lambda cfg: cfg["x"], seed=5)
        assert len(trace) == 1
        assert best == trace[0]["config"]

    def test_finds_optimum_in_tiny_space(self):
        space = {"x": ("choice", (10, 20, 30))}
        best, trace = random_search(space, 50, lambda cfg: -abs(cfg["x"] - 20), seed=1)
        assert best["x"] == 20

    def test_deterministic_trace(self):
        space = {"lr": ("loguniform", 1e-4, 1e-1), "n": ("choice", (1, 2))}
        _, t1 = random_search(space, 10, lambda cfg: cfg["lr"], seed=3)
        _, t2 = random_search(space, 10, lambda cfg: cfg["lr"], seed=3)
        assert t1 == t2

    def test_loguniform_within_bounds(self):
        space = {"lr": ("loguniform", 1e-4, 1e-2)}
        _, trace = random_search(space, 40, lambda cfg: 0.0, seed=6)
        for t in trace:
            assert 1e-4 <= t["config"]["lr"] <= 1e-2


class TestManifest:
    def test_round_trip(self, tmp_path):
        cohort = make_cohort(3, 2)
        path = tmp_path / "manifest.jsonl"
        save_manifest(cohort, path)
        back = load_manifest(path)
        assert back == cohort

    def test_empty_rejected(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(DataError):
            load_manifest(path)

    def test_record_validation(self):
        with pytest.raises(DataError):
            SubjectRecord("s", 2, ("a.rvol",))
        with pytest.raises(DataError):
            SubjectRecord("s", 1, ())
