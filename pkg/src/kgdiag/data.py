"""Labeled datasets: JSONL IO, stratified splitting, frequency grouping.

Records live in JSONL as ``{"text": ..., "labels": [label ids]}`` with a
separate label vocabulary file (JSON list, index = label id, value =
description). Splitting uses iterative stratification over order-2 label
combinations so rare label pairs stay proportionally represented in every
fold; it is deterministic for a given seed.
"""

from __future__ import annotations

import itertools
import json
import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, FormatError

logger = logging.getLogger(__name__)


@dataclass
class LabeledRecord:
    text: str
    labels: list[int]


@dataclass
class LabeledDataset:
    records: list[LabeledRecord]
    label_descriptions: list[str]
    splits: dict[str, list[int]] = field(default_factory=dict)

    @property
    def num_labels(self) -> int:
        return len(self.label_descriptions)

    def split_records(self, tag: str) -> list[LabeledRecord]:
        return [self.records[i] for i in self.splits.get(tag, [])]

    def label_matrix(self, tag: str | None = None) -> np.ndarray:
        rows = self.records if tag is None else self.split_records(tag)
        matrix = np.zeros((len(rows), self.num_labels), dtype=np.int64)
        for i, record in enumerate(rows):
            matrix[i, record.labels] = 1
        return matrix


def load_records_jsonl(path: str | Path) -> list[LabeledRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                records.append(
                    LabeledRecord(text=row["text"], labels=[int(l) for l in row["labels"]])
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{line_no}: bad record ({exc})") from exc
    return records


def save_records_jsonl(records: Iterable[LabeledRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(
                json.dumps({"text": record.text, "labels": record.labels}, ensure_ascii=False)
            )
            fh.write("\n")


def load_label_descriptions(path: str | Path) -> list[str]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list) or not all(isinstance(x, str) for x in data):
        raise FormatError(f"{path}: label vocabulary must be a JSON list of descriptions")
    return data


def _order2_combos(labels: Sequence[int]) -> list[tuple[int, ...]]:
    ordered = sorted(labels)
    if len(ordered) >= 2:
        return list(itertools.combinations(ordered, 2))
    if len(ordered) == 1:
        return [(ordered[0],)]
    return []


def _fold_targets(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer fold sizes by largest-remainder apportionment."""
    floors = [int(ratio * n) for ratio in ratios]
    remainders = [ratio * n - f for ratio, f in zip(ratios, floors)]
    short = n - sum(floors)
    order = sorted(range(len(ratios)), key=lambda j: (-remainders[j], j))
    for j in order[:short]:
        floors[j] += 1
    return floors


def iterative_stratified_assign(
    label_sets: Sequence[Sequence[int]], ratios: Sequence[float], seed: int
) -> list[int]:
    """Assign each record to a fold, balancing order-2 label combinations.

    Greedy iterative stratification: repeatedly take the rarest unassigned
    combination and hand its records to the fold that most wants that
    combination (ties: fold that most wants records overall, then a seeded
    draw). A final pass then moves the records whose combinations suffer
    least so fold sizes hit their rounded targets exactly.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    rng = random.Random(seed)
    n_folds = len(ratios)
    combos_per_record = [_order2_combos(ls) for ls in label_sets]
    members: dict[tuple[int, ...], set[int]] = defaultdict(set)
    for idx, combos in enumerate(combos_per_record):
        for combo in combos:
            members[combo].add(idx)
    want_total = [ratio * len(label_sets) for ratio in ratios]
    want_combo = {
        combo: [ratio * len(recs) for ratio in ratios] for combo, recs in members.items()
    }

    assignment = [-1] * len(label_sets)

    def pick_fold(desire: list[float]) -> int:
        best = max(desire)
        folds = [j for j in range(n_folds) if desire[j] == best]
        if len(folds) > 1:
            best_total = max(want_total[j] for j in folds)
            folds = [j for j in folds if want_total[j] == best_total]
        return folds[0] if len(folds) == 1 else rng.choice(folds)

    while True:
        live = [(len(recs), combo) for combo, recs in members.items() if recs]
        if not live:
            break
        _, combo = min(live)
        pending = sorted(members[combo])
        rng.shuffle(pending)  # processing order is where the seed bites
        for idx in pending:
            fold = pick_fold(want_combo[combo])
            assignment[idx] = fold
            want_total[fold] -= 1
            for c in combos_per_record[idx]:
                members[c].discard(idx)
                want_combo[c][fold] -= 1

    for idx in range(len(label_sets)):
        if assignment[idx] < 0:  # label-free records: balance overall sizes
            fold = pick_fold(want_total)
            assignment[idx] = fold
            want_total[fold] -= 1

    _rebalance_sizes(assignment, combos_per_record, ratios)
    return assignment


def _rebalance_sizes(
    assignment: list[int],
    combos_per_record: Sequence[Sequence[tuple[int, ...]]],
    ratios: Sequence[float],
) -> None:
    """Move least-disruptive records until fold sizes match their targets."""
    n_folds = len(ratios)
    targets = _fold_targets(len(assignment), ratios)
    sizes = [0] * n_folds
    for fold in assignment:
        sizes[fold] += 1
    combo_counts: dict[tuple[int, ...], list[int]] = defaultdict(lambda: [0] * n_folds)
    combo_sizes: dict[tuple[int, ...], int] = defaultdict(int)
    for idx, combos in enumerate(combos_per_record):
        for combo in combos:
            combo_counts[combo][assignment[idx]] += 1
            combo_sizes[combo] += 1

    def move_cost(idx: int, src: int, dst: int) -> float:
        cost = 0.0
        for combo in combos_per_record[idx]:
            counts = combo_counts[combo]
            for fold, delta in ((src, -1), (dst, +1)):
                desired = combo_sizes[combo] * ratios[fold]
                cost += (counts[fold] + delta - desired) ** 2 - (counts[fold] - desired) ** 2
        return cost

    while True:
        over = [j for j in range(n_folds) if sizes[j] > targets[j]]
        under = [j for j in range(n_folds) if sizes[j] < targets[j]]
        if not over:
            break
        src, dst = over[0], under[0]
        candidates = [i for i, fold in enumerate(assignment) if fold == src]
        best = min(candidates, key=lambda i: (move_cost(i, src, dst), i))
        assignment[best] = dst
        sizes[src] -= 1
        sizes[dst] += 1
        for combo in combos_per_record[best]:
            combo_counts[combo][src] -= 1
            combo_counts[combo][dst] += 1


def split_dataset(
    records: Sequence[LabeledRecord],
    label_descriptions: Sequence[str],
    train_ratio: float = 0.7,
    val_fraction: float = 0.1,
    seed: int = 0,
) -> LabeledDataset:
    """Stratified train/val/test tags: train/test first, then val out of train."""
    if not 0 < train_ratio < 1:
        raise ConfigError("train_ratio must be in (0, 1)")
    if not 0 <= val_fraction < 1:
        raise ConfigError("val_fraction must be in [0, 1)")
    num_labels = len(label_descriptions)
    for record in records:
        if any(l < 0 or l >= num_labels for l in record.labels):
            raise FormatError(f"record has label id outside [0, {num_labels})")
    counts = np.zeros(num_labels, dtype=np.int64)
    for record in records:
        counts[record.labels] += 1
    for label_id in np.flatnonzero(counts == 0):
        logger.warning(
            "label %d (%r) never occurs; kept with zero support",
            label_id,
            label_descriptions[label_id],
        )

    assignment = iterative_stratified_assign(
        [r.labels for r in records], (train_ratio, 1.0 - train_ratio), seed
    )
    train_pool = [i for i, fold in enumerate(assignment) if fold == 0]
    test_idx = [i for i, fold in enumerate(assignment) if fold == 1]
    if val_fraction > 0 and train_pool:
        sub = iterative_stratified_assign(
            [records[i].labels for i in train_pool],
            (1.0 - val_fraction, val_fraction),
            seed + 1,
        )
        train_idx = [i for i, fold in zip(train_pool, sub) if fold == 0]
        val_idx = [i for i, fold in zip(train_pool, sub) if fold == 1]
    else:
        train_idx, val_idx = train_pool, []
    return LabeledDataset(
        records=list(records),
        label_descriptions=list(label_descriptions),
        splits={"train": train_idx, "val": val_idx, "test": test_idx},
    )


@dataclass
class LabelGroups:
    """Disjoint frequency bands over labels with training support."""

    head: set[int] = field(default_factory=set)
    middle: set[int] = field(default_factory=set)
    tail: set[int] = field(default_factory=set)
    zero: set[int] = field(default_factory=set)

    def as_mapping(self) -> dict[str, list[int]]:
        return {
            "head": sorted(self.head),
            "middle": sorted(self.middle),
            "tail": sorted(self.tail),
        }


HEAD_MIN_EXCLUSIVE = 1000  # head: count > 1000
TAIL_MAX_EXCLUSIVE = 10  # tail: 1 <= count < 10; middle covers [10, 1000]


def group_labels(train_counts: Mapping[int, int] | np.ndarray) -> LabelGroups:
    """Band labels by training frequency; zero-support labels sit apart."""
    if isinstance(train_counts, np.ndarray):
        items = enumerate(train_counts.tolist())
    else:
        items = train_counts.items()
    groups = LabelGroups()
    for label, count in items:
        if count <= 0:
            groups.zero.add(label)
        elif count > HEAD_MIN_EXCLUSIVE:
            groups.head.add(label)
        elif count < TAIL_MAX_EXCLUSIVE:
            groups.tail.add(label)
        else:
            groups.middle.add(label)
    return groups
