import json
import random

import numpy as np
import pytest

from kgdiag.data import (
    LabeledDataset,
    LabeledRecord,
    group_labels,
    iterative_stratified_assign,
    load_label_descriptions,
    load_records_jsonl,
    save_records_jsonl,
    split_dataset,
)
from kgdiag.errors import ConfigError, FormatError


def random_records(n, num_labels, seed, max_labels=3):
    rng = random.Random(seed)
    return [
        LabeledRecord(
            text=f"document {i}",
            labels=sorted(rng.sample(range(num_labels), rng.randint(1, max_labels))),
        )
        for i in range(n)
    ]


class TestRecordsIo:
    def test_jsonl_round_trip(self, tmp_path):
        records = random_records(20, 7, seed=1)
        path = tmp_path / "records.jsonl"
        save_records_jsonl(records, path)
        assert load_records_jsonl(path) == records

    def test_bad_line_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"text": "a", "labels": [0]}\n{"nope": 1}\n')
        with pytest.raises(FormatError, match=":2"):
            load_records_jsonl(path)

    def test_label_descriptions_must_be_string_list(self, tmp_path):
        path = tmp_path / "labels.json"
        path.write_text(json.dumps({"0": "x"}))
        with pytest.raises(FormatError):
            load_label_descriptions(path)
        path.write_text(json.dumps(["a", "b"]))
        assert load_label_descriptions(path) == ["a", "b"]


class TestSplitDataset:
    def test_hundred_records_seventy_thirty(self):
        records = random_records(100, 12, seed=0)
        labels = [f"label {i}" for i in range(12)]
        dataset = split_dataset(records, labels, 0.7, 0.0, seed=0)
        assert abs(len(dataset.splits["train"]) - 70) <= 1
        assert abs(len(dataset.splits["test"]) - 30) <= 1
        assert not dataset.splits["val"]

    def test_ems_shaped_sizes(self):
        rng = random.Random(7)
        weights = [1.0 / (i + 1) for i in range(43)]

        def draw():
            k = 1 if rng.random() < 0.8 else 2
            chosen: set[int] = set()
            while len(chosen) < k:
                chosen.add(rng.choices(range(43), weights)[0])
            return sorted(chosen)

        records = [LabeledRecord(f"report {i}", draw()) for i in range(4417)]
        labels = [f"protocol {i}" for i in range(43)]
        dataset = split_dataset(records, labels, 0.7, 0.1, seed=0)
        sizes = {tag: len(idx) for tag, idx in dataset.splits.items()}
        assert abs(sizes["train"] - 2787) <= 45
        assert abs(sizes["val"] - 314) <= 45
        assert abs(sizes["test"] - 1316) <= 45
        assert sum(sizes.values()) == 4417

    def test_same_seed_identical_assignment(self):
        records = random_records(200, 9, seed=3)
        labels = [f"l{i}" for i in range(9)]
        first = split_dataset(records, labels, 0.7, 0.1, seed=11)
        second = split_dataset(records, labels, 0.7, 0.1, seed=11)
        assert first.splits == second.splits

    def test_different_seed_differs(self):
        records = random_records(200, 9, seed=3)
        labels = [f"l{i}" for i in range(9)]
        first = split_dataset(records, labels, 0.7, 0.1, seed=1)
        second = split_dataset(records, labels, 0.7, 0.1, seed=2)
        assert first.splits != second.splits

    def test_partitions_are_disjoint_and_cover(self):
        records = random_records(150, 8, seed=5)
        dataset = split_dataset(records, [f"l{i}" for i in range(8)], 0.7, 0.1, seed=0)
        all_idx = sorted(
            dataset.splits["train"] + dataset.splits["val"] + dataset.splits["test"]
        )
        assert all_idx == list(range(150))

    def test_rare_label_pair_spread_across_folds(self):
        # 12 records sharing a rare label pair split roughly 70:30;
        # filler records use other labels so the pair stays rare.
        records = [LabeledRecord(f"r{i}", [8, 9]) for i in range(12)]
        records += [
            LabeledRecord(f"f{i}", rec.labels)
            for i, rec in enumerate(random_records(188, 8, seed=2))
        ]
        dataset = split_dataset(records, [f"l{i}" for i in range(10)], 0.7, 0.0, seed=0)
        train_pair = sum(
            1 for i in dataset.splits["train"] if set(records[i].labels) >= {8, 9}
        )
        assert 7 <= train_pair <= 10

    def test_zero_support_label_warns_and_kept(self, caplog):
        records = [LabeledRecord("a", [0])] * 10
        dataset = split_dataset(records, ["used", "unused"], 0.7, 0.0, seed=0)
        assert dataset.num_labels == 2
        assert any("never occurs" in message for message in caplog.messages)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(FormatError):
            split_dataset([LabeledRecord("a", [5])], ["only one"], 0.7, 0.1, 0)

    def test_bad_ratio_rejected(self):
        with pytest.raises(ConfigError):
            split_dataset([LabeledRecord("a", [0])], ["l"], 1.5, 0.1, 0)
        with pytest.raises(ConfigError):
            iterative_stratified_assign([[0]], (0.6, 0.6), 0)

    def test_label_free_records_distributed(self):
        records = [LabeledRecord(f"r{i}", []) for i in range(10)]
        assignment = iterative_stratified_assign([r.labels for r in records], (0.7, 0.3), 0)
        assert assignment.count(0) == 7

    def test_label_matrix(self):
        dataset = LabeledDataset(
            records=[LabeledRecord("a", [0, 2]), LabeledRecord("b", [1])],
            label_descriptions=["x", "y", "z"],
            splits={"train": [0, 1]},
        )
        matrix = dataset.label_matrix("train")
        assert matrix.tolist() == [[1, 0, 1], [0, 1, 0]]


class TestGroupLabels:
    def test_spec_thresholds(self):
        groups = group_labels({0: 1500, 1: 50, 2: 5})
        assert groups.head == {0}
        assert groups.middle == {1}
        assert groups.tail == {2}

    def test_boundaries(self):
        groups = group_labels({0: 10, 1: 9, 2: 1000, 3: 1001, 4: 500, 5: 1})
        assert 0 in groups.middle  # exactly 10
        assert 1 in groups.tail  # 9 is "less than 10"
        assert 2 in groups.middle  # gap closure: 1000 still middle
        assert 3 in groups.head  # strictly more than 1000
        assert 4 in groups.middle
        assert 5 in groups.tail

    def test_zero_support_excluded_from_bands(self):
        groups = group_labels(np.array([0, 3, 2000]))
        assert groups.zero == {0}
        assert groups.tail == {1}
        assert groups.head == {2}
        assert groups.as_mapping() == {"head": [2], "middle": [], "tail": [1]}

    def test_bands_disjoint_and_cover(self):
        rng = np.random.default_rng(0)
        counts = rng.integers(0, 2000, size=60)
        groups = group_labels(counts)
        bands = groups.head | groups.middle | groups.tail
        assert bands | groups.zero == set(range(60))
        assert len(groups.head) + len(groups.middle) + len(groups.tail) + len(groups.zero) == 60
