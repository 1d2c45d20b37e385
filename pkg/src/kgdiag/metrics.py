"""Multi-label ranking and threshold metrics with per-group breakdowns.

Group variants (head/middle/tail) always rank over ALL labels and only
restrict the truth set to the group, so a group score reflects how the full
ranking serves that group's labels. Ties in scores are broken by ascending
label index. Instances whose (restricted) truth set is empty are skipped for
recall-style metrics and counted (contributing zero) for precision@K.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError

GROUP_ORDER = ("head", "middle", "tail", "overall")
METRIC_ORDER = ("miF", "maF", "P@K", "R@K")


def _as_2d(array) -> np.ndarray:
    out = np.asarray(array)
    if out.ndim == 1:
        out = out[None, :]
    return out


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores, ties broken by ascending label index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def _check_k(k: int, num_labels: int) -> None:
    if k < 1:
        raise ConfigError("K must be >= 1")
    if k > num_labels:
        raise ConfigError(f"K={k} exceeds the number of labels {num_labels}")


def _restrict(truth: np.ndarray, labels: Sequence[int] | None) -> np.ndarray:
    if labels is None:
        return truth
    keep = np.zeros(truth.shape[-1], dtype=bool)
    keep[list(labels)] = True
    return truth * keep


def precision_at_k(
    scores, truth, k: int, group_labels: Sequence[int] | None = None
) -> float:
    """Mean over instances of |top-K ∩ truth| / K."""
    scores, truth = _as_2d(scores), _as_2d(truth).astype(bool)
    _check_k(k, scores.shape[1])
    truth = _restrict(truth, group_labels)
    top = _top_k(scores, k)
    hits = np.take_along_axis(truth, top, axis=1).sum(axis=1)
    return float(np.mean(hits / k))


def recall_at_k(
    scores, truth, k: int, group_labels: Sequence[int] | None = None
) -> float:
    """Mean over instances of |top-K ∩ truth| / |truth|, skipping empty truth."""
    scores, truth = _as_2d(scores), _as_2d(truth).astype(bool)
    _check_k(k, scores.shape[1])
    truth = _restrict(truth, group_labels)
    positives = truth.sum(axis=1)
    keep = positives > 0
    if not keep.any():
        return 0.0
    top = _top_k(scores[keep], k)
    hits = np.take_along_axis(truth[keep], top, axis=1).sum(axis=1)
    return float(np.mean(hits / positives[keep]))


def r_precision_at_k(
    scores, truth, k: int, group_labels: Sequence[int] | None = None
) -> float:
    """Precision at min(K, |truth|) per instance; the early-stopping monitor."""
    scores, truth = _as_2d(scores), _as_2d(truth).astype(bool)
    _check_k(k, scores.shape[1])
    truth = _restrict(truth, group_labels)
    values = []
    for row_scores, row_truth in zip(scores, truth):
        n_pos = int(row_truth.sum())
        if n_pos == 0:
            continue
        k_star = min(k, n_pos)
        top = _top_k(row_scores, k_star)
        values.append(row_truth[top].sum() / k_star)
    return float(np.mean(values)) if values else 0.0


def _binarize(probs: np.ndarray, threshold: float) -> np.ndarray:
    return probs > threshold


def micro_f1(
    probs, truth, threshold: float = 0.5, group_labels: Sequence[int] | None = None
) -> float:
    """F1 from globally summed TP/FP/FN at a fixed decision threshold."""
    probs, truth = _as_2d(probs), _as_2d(truth).astype(bool)
    pred = _binarize(probs, threshold)
    if group_labels is not None:
        cols = list(group_labels)
        pred, truth = pred[:, cols], truth[:, cols]
    tp = int(np.logical_and(pred, truth).sum())
    fp = int(np.logical_and(pred, ~truth).sum())
    fn = int(np.logical_and(~pred, truth).sum())
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def macro_f1(
    probs,
    truth,
    threshold: float = 0.5,
    group_labels: Sequence[int] | None = None,
    zero_support: str = "zero",
) -> float:
    """Unweighted mean of per-label F1.

    Labels with neither true nor predicted positives score 0 under the
    default ``zero`` convention; ``skip`` drops them from the mean instead.
    """
    if zero_support not in ("zero", "skip"):
        raise ConfigError("zero_support must be zero|skip")
    probs, truth = _as_2d(probs), _as_2d(truth).astype(bool)
    pred = _binarize(probs, threshold)
    cols = range(truth.shape[1]) if group_labels is None else list(group_labels)
    scores = []
    for col in cols:
        tp = int(np.logical_and(pred[:, col], truth[:, col]).sum())
        fp = int(np.logical_and(pred[:, col], ~truth[:, col]).sum())
        fn = int(np.logical_and(~pred[:, col], truth[:, col]).sum())
        denom = 2 * tp + fp + fn
        if denom == 0:
            if zero_support == "skip":
                continue
            scores.append(0.0)
        else:
            scores.append(2 * tp / denom)
    return float(np.mean(scores)) if scores else 0.0


def compute_group_metrics(
    probs,
    truth,
    k: int,
    groups: Mapping[str, Sequence[int]] | None = None,
    threshold: float = 0.5,
) -> dict[str, dict[str, float]]:
    """miF/maF/P@K/R@K overall and per label group."""
    out: dict[str, dict[str, float]] = {}
    selections: dict[str, Sequence[int] | None] = {"overall": None}
    for name, labels in (groups or {}).items():
        selections[name] = list(labels)
    for name, labels in selections.items():
        out[name] = {
            "miF": micro_f1(probs, truth, threshold, labels),
            "maF": macro_f1(probs, truth, threshold, labels),
            "P@K": precision_at_k(probs, truth, k, labels),
            "R@K": recall_at_k(probs, truth, k, labels),
        }
    return out


@dataclass
class EvalReport:
    """Per-seed group metrics plus mean ± sample std across seeds."""

    k: int
    per_seed: dict[int, dict[str, dict[str, float]]] = field(default_factory=dict)
    missing_seeds: list[int] = field(default_factory=list)

    def add_seed(self, seed: int, metrics: dict[str, dict[str, float]]) -> None:
        self.per_seed[seed] = metrics

    def mark_missing(self, seed: int) -> None:
        if seed not in self.missing_seeds:
            self.missing_seeds.append(seed)

    def aggregate(self) -> dict[str, dict[str, tuple[float, float]]]:
        groups: dict[str, dict[str, tuple[float, float]]] = {}
        for group in self._group_names():
            groups[group] = {}
            for metric in METRIC_ORDER:
                values = [
                    m[group][metric] for m in self.per_seed.values() if group in m
                ]
                if not values:
                    continue
                mean = float(np.mean(values))
                std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
                groups[group][metric] = (mean, std)
        return groups

    def _group_names(self) -> list[str]:
        names = [g for g in GROUP_ORDER if any(g in m for m in self.per_seed.values())]
        extra = sorted(
            {g for m in self.per_seed.values() for g in m} - set(names)
        )
        return names + extra

    def to_jsonable(self) -> dict:
        return {
            "k": self.k,
            "seeds": {
                str(seed): metrics for seed, metrics in sorted(self.per_seed.items())
            },
            "missing_seeds": sorted(self.missing_seeds),
            "aggregate": {
                group: {m: {"mean": v[0], "std": v[1]} for m, v in metrics.items()}
                for group, metrics in self.aggregate().items()
            },
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_jsonable(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    def render_table(self) -> str:
        """Aligned text table: one row per group, mean ± std per metric."""
        headers = ["group"] + [m.replace("K", str(self.k)) for m in METRIC_ORDER]
        rows = []
        agg = self.aggregate()
        for group in self._group_names():
            row = [group]
            for metric in METRIC_ORDER:
                if metric in agg.get(group, {}):
                    mean, std = agg[group][metric]
                    row.append(f"{100 * mean:.1f} ±{100 * std:.1f}")
                else:
                    row.append("-")
            rows.append(row)
        widths = [max(len(r[i]) for r in [headers] + rows) for i in range(len(headers))]
        lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
        for row in rows:
            lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
        if self.missing_seeds:
            lines.append(f"missing seeds: {sorted(self.missing_seeds)}")
        return "\n".join(lines)


def mean_std(values: Iterable[float]) -> tuple[float, float]:
    vals = list(values)
    if not vals:
        return (math.nan, math.nan)
    if len(vals) == 1:
        return (float(vals[0]), 0.0)
    return (float(np.mean(vals)), float(np.std(vals, ddof=1)))
