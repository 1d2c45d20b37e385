import math

import numpy as np
import pytest

from kgdiag.errors import ConfigError
from kgdiag.metrics import (
    EvalReport,
    compute_group_metrics,
    macro_f1,
    mean_std,
    micro_f1,
    precision_at_k,
    r_precision_at_k,
    recall_at_k,
)

# Brute-force oracles: independent of the library implementations on purpose.


def oracle_top_k(scores, k):
    pairs = sorted(enumerate(scores), key=lambda p: (-p[1], p[0]))
    return [i for i, _ in pairs[:k]]


def oracle_p_at_k(scores, truth, k, group=None):
    values = []
    for row_scores, row_truth in zip(scores, truth):
        positives = {
            i for i, t in enumerate(row_truth) if t and (group is None or i in group)
        }
        hits = len(set(oracle_top_k(row_scores, k)) & positives)
        values.append(hits / k)
    return sum(values) / len(values)


def oracle_r_at_k(scores, truth, k, group=None):
    values = []
    for row_scores, row_truth in zip(scores, truth):
        positives = {
            i for i, t in enumerate(row_truth) if t and (group is None or i in group)
        }
        if not positives:
            continue
        hits = len(set(oracle_top_k(row_scores, k)) & positives)
        values.append(hits / len(positives))
    return sum(values) / len(values) if values else 0.0


def oracle_rp_at_k(scores, truth, k, group=None):
    values = []
    for row_scores, row_truth in zip(scores, truth):
        positives = {
            i for i, t in enumerate(row_truth) if t and (group is None or i in group)
        }
        if not positives:
            continue
        k_star = min(k, len(positives))
        hits = len(set(oracle_top_k(row_scores, k_star)) & positives)
        values.append(hits / k_star)
    return sum(values) / len(values) if values else 0.0


def oracle_micro(probs, truth, threshold=0.5, group=None):
    cols = range(len(truth[0])) if group is None else sorted(group)
    tp = fp = fn = 0
    for row_probs, row_truth in zip(probs, truth):
        for col in cols:
            predicted = row_probs[col] > threshold
            actual = bool(row_truth[col])
            tp += predicted and actual
            fp += predicted and not actual
            fn += (not predicted) and actual
    return 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0


def oracle_macro(probs, truth, threshold=0.5, group=None):
    cols = range(len(truth[0])) if group is None else sorted(group)
    scores = []
    for col in cols:
        tp = fp = fn = 0
        for row_probs, row_truth in zip(probs, truth):
            predicted = row_probs[col] > threshold
            actual = bool(row_truth[col])
            tp += predicted and actual
            fp += predicted and not actual
            fn += (not predicted) and actual
        scores.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
    return sum(scores) / len(scores) if scores else 0.0


class TestRankingMetrics:
    def test_single_true_label_first(self):
        scores = np.array([[0.9, 0.2, 0.1]])
        truth = np.array([[1, 0, 0]])
        assert precision_at_k(scores, truth, 1) == 1.0
        assert recall_at_k(scores, truth, 1) == 1.0

    def test_hand_counts_p8_r8(self):
        scores = np.arange(12, 0, -1, dtype=float)[None, :]  # ranks = label order
        truth = np.zeros((1, 12))
        truth[0, [0, 5, 11]] = 1  # two of three inside the top 8
        assert precision_at_k(scores, truth, 8) == pytest.approx(0.25)
        assert recall_at_k(scores, truth, 8) == pytest.approx(2 / 3)

    def test_tie_break_by_ascending_index(self):
        scores = np.full((1, 4), 0.5)
        truth = np.array([[1, 0, 0, 0]])
        assert precision_at_k(scores, truth, 1) == 1.0
        truth2 = np.array([[0, 0, 0, 1]])
        assert precision_at_k(scores, truth2, 1) == 0.0

    def test_k_exceeding_labels_rejected(self):
        with pytest.raises(ConfigError):
            precision_at_k(np.zeros((1, 3)), np.zeros((1, 3)), 4)
        with pytest.raises(ConfigError):
            recall_at_k(np.zeros((1, 3)), np.zeros((1, 3)), 0)

    def test_recall_skips_empty_truth_instances(self):
        scores = np.array([[0.9, 0.1], [0.8, 0.2]])
        truth = np.array([[1, 0], [0, 0]])
        assert recall_at_k(scores, truth, 1) == 1.0

    def test_r_precision_examples(self):
        scores = np.array([[0.9, 0.5, 0.4, 0.3]])
        truth = np.array([[1, 0, 0, 0]])
        assert r_precision_at_k(scores, truth, 8 if False else 4) == 1.0
        # |truth| = 3, K = 8 -> k* = 3; top-3 holds 2 of them
        scores = np.array([[0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.15, 0.1]])
        truth = np.zeros((1, 10))
        truth[0, [0, 1, 9]] = 1
        assert r_precision_at_k(scores, truth, 8) == pytest.approx(2 / 3)

    def test_r_precision_skips_empty(self):
        assert r_precision_at_k(np.zeros((2, 3)), np.zeros((2, 3)), 1) == 0.0

    def test_per_instance_recall_precision_identity(self):
        rng = np.random.default_rng(0)
        scores = rng.random((50, 9))
        truth = (rng.random((50, 9)) < 0.3).astype(int)
        k = 4
        for i in range(50):
            n_pos = truth[i].sum()
            if n_pos == 0:
                continue
            p = precision_at_k(scores[i], truth[i], k)
            r = recall_at_k(scores[i], truth[i], k)
            assert r == pytest.approx(p * k / n_pos)


class TestThresholdMetrics:
    def test_hand_confusion_case(self):
        probs = np.array([[0.9, 0.1], [0.9, 0.1]])
        truth = np.array([[1, 1], [0, 0]])
        assert micro_f1(probs, truth) == pytest.approx(0.5)
        assert macro_f1(probs, truth) == pytest.approx(1 / 3)

    def test_perfect_predictions(self):
        truth = np.array([[1, 0, 1], [0, 1, 0]])
        probs = np.where(truth == 1, 0.9, 0.1)
        assert micro_f1(probs, truth) == 1.0
        assert macro_f1(probs, truth) == 1.0

    def test_all_zero_predictions(self):
        probs = np.zeros((3, 4))
        truth = np.zeros((3, 4))
        truth[0, 1] = 1
        assert micro_f1(probs, truth) == 0.0
        assert macro_f1(probs, truth) == 0.0

    def test_binarization_strictly_greater(self):
        probs = np.array([[0.5, 0.50001]])
        truth = np.array([[1, 1]])
        assert micro_f1(probs, truth) == pytest.approx(2 * 1 / (2 * 1 + 0 + 1))

    def test_macro_skip_convention(self):
        probs = np.array([[0.9, 0.1]])
        truth = np.array([[1, 0]])
        assert macro_f1(probs, truth, zero_support="zero") == pytest.approx(0.5)
        assert macro_f1(probs, truth, zero_support="skip") == pytest.approx(1.0)


class TestOracleEquivalence:
    def test_two_hundred_random_instances(self):
        rng = np.random.default_rng(42)
        L = 30
        scores = rng.random((200, L))
        scores[rng.random((200, L)) < 0.1] = 0.25  # plant ties
        truth = (rng.random((200, L)) < 0.15).astype(int)
        group = list(range(7, 19))
        rows = [list(r) for r in scores]
        truths = [list(r) for r in truth]
        for k in (1, 8):
            assert precision_at_k(scores, truth, k) == pytest.approx(
                oracle_p_at_k(rows, truths, k), abs=1e-9
            )
            assert recall_at_k(scores, truth, k) == pytest.approx(
                oracle_r_at_k(rows, truths, k), abs=1e-9
            )
            assert r_precision_at_k(scores, truth, k) == pytest.approx(
                oracle_rp_at_k(rows, truths, k), abs=1e-9
            )
            assert precision_at_k(scores, truth, k, group) == pytest.approx(
                oracle_p_at_k(rows, truths, k, set(group)), abs=1e-9
            )
            assert recall_at_k(scores, truth, k, group) == pytest.approx(
                oracle_r_at_k(rows, truths, k, set(group)), abs=1e-9
            )
        assert micro_f1(scores, truth) == pytest.approx(
            oracle_micro(rows, truths), abs=1e-9
        )
        assert macro_f1(scores, truth) == pytest.approx(
            oracle_macro(rows, truths), abs=1e-9
        )
        assert micro_f1(scores, truth, group_labels=group) == pytest.approx(
            oracle_micro(rows, truths, group=group), abs=1e-9
        )
        assert macro_f1(scores, truth, group_labels=group) == pytest.approx(
            oracle_macro(rows, truths, group=group), abs=1e-9
        )


class TestGroupMetrics:
    def test_single_group_covering_all_equals_overall(self):
        rng = np.random.default_rng(1)
        scores = rng.random((40, 10))
        truth = (rng.random((40, 10)) < 0.3).astype(int)
        out = compute_group_metrics(scores, truth, 3, {"everything": list(range(10))})
        for metric, value in out["overall"].items():
            assert out["everything"][metric] == pytest.approx(value, abs=1e-12)


class TestEvalReport:
    def test_two_seed_mean_and_sample_std(self):
        report = EvalReport(k=1)
        report.add_seed(0, {"overall": {"miF": 0.5, "maF": 0.4, "P@K": 0.8, "R@K": 0.7}})
        report.add_seed(1, {"overall": {"miF": 0.5, "maF": 0.4, "P@K": 0.9, "R@K": 0.7}})
        mean, std = report.aggregate()["overall"]["P@K"]
        assert mean == pytest.approx(0.85)
        assert std == pytest.approx(0.07071067811865475)

    def test_single_seed_std_zero(self):
        report = EvalReport(k=8)
        report.add_seed(0, {"overall": {"miF": 1.0, "maF": 1.0, "P@K": 1.0, "R@K": 1.0}})
        _, std = report.aggregate()["overall"]["miF"]
        assert std == 0.0
        assert "±0.0" in report.render_table()

    def test_group_rows_exactly_head_middle_tail_overall(self):
        metrics = {
            group: {"miF": 0.1, "maF": 0.1, "P@K": 0.1, "R@K": 0.1}
            for group in ("middle", "overall", "head", "tail")
        }
        report = EvalReport(k=8)
        report.add_seed(0, metrics)
        lines = report.render_table().splitlines()
        assert [ln.split()[0] for ln in lines[1:5]] == ["head", "middle", "tail", "overall"]

    def test_missing_seed_marked(self):
        report = EvalReport(k=1)
        report.add_seed(0, {"overall": {"miF": 1.0, "maF": 1.0, "P@K": 1.0, "R@K": 1.0}})
        report.mark_missing(42)
        assert report.to_jsonable()["missing_seeds"] == [42]
        assert "missing seeds" in report.render_table()

    def test_json_round_trip(self, tmp_path):
        import json

        report = EvalReport(k=8)
        report.add_seed(3, {"overall": {"miF": 0.25, "maF": 0.5, "P@K": 0.75, "R@K": 1.0}})
        path = tmp_path / "report.json"
        report.save(path)
        payload = json.loads(path.read_text())
        assert payload["k"] == 8
        assert payload["seeds"]["3"]["overall"]["miF"] == 0.25


def test_mean_std_helper():
    assert mean_std([0.8, 0.9]) == (
        pytest.approx(0.85),
        pytest.approx(0.07071067811865475),
    )
    assert mean_std([0.3]) == (0.3, 0.0)
    assert all(math.isnan(v) for v in mean_std([]))
