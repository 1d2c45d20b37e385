"""Training loop, early stopping on a validation ranking monitor, evaluation.

One model is trained per seed with an adaptive optimizer and weight decay;
after every epoch the validation monitor (precision at min(K, |truth|)) is
evaluated and training stops once it fails to improve by more than
``min_delta`` for ``patience`` consecutive evaluations. The checkpoint kept
is the epoch with the best monitor value seen, which need not be the epoch
that last reset patience.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import LabeledDataset, LabelGroups
from .encoders import PAD_INDEX, TokenizedDoc, Vocabulary, preprocess
from .errors import ConfigError, DivergenceError, EmptyDocError
from .metrics import EvalReport, compute_group_metrics, r_precision_at_k
from .model import DkecModel, bce_loss

DEFAULT_SEEDS = (0, 1, 42, 1234, 3407)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 10
    min_delta: float = 1e-3
    monitor_k: int = 1
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    deterministic: bool = True

    def __post_init__(self):
        if self.patience <= 0:
            raise ConfigError("patience must be positive")
        if self.monitor_k < 1:
            raise ConfigError("monitor K must be >= 1")


class EarlyStopper:
    """Stop after ``patience`` evaluations without a > ``min_delta`` gain.

    The patience reference only moves when an observation beats it by
    strictly more than ``min_delta``. The very first observation sets the
    reference and already counts as one non-improving evaluation, so a
    constant sequence stops after exactly ``patience`` observations. The best
    value/epoch (used to pick the checkpoint) moves on any strict
    improvement, qualifying or not.
    """

    def __init__(self, patience: int = 10, min_delta: float = 1e-3):
        if patience <= 0:
            raise ConfigError("patience must be positive")
        self.patience = patience
        self.min_delta = min_delta
        self.reference: float | None = None
        self.best_value = -math.inf
        self.best_epoch: int | None = None
        self.stale = 0
        self._epoch = 0

    def observe(self, value: float) -> bool:
        """Record one evaluation; returns True when training should stop."""
        self._epoch += 1
        if value > self.best_value:
            self.best_value = value
            self.best_epoch = self._epoch
        if self.reference is not None and value > self.reference + self.min_delta:
            self.reference = value
            self.stale = 0
        else:
            if self.reference is None:
                self.reference = value
            self.stale += 1
        return self.stale >= self.patience


@dataclass
class EncodedDataset:
    """Token-id tensors per record, ready for padded batching."""

    token_ids: list[torch.Tensor]
    labels: torch.Tensor  # [N, L] float
    indices: list[int]


def encode_split(
    dataset: LabeledDataset,
    vocab: Vocabulary,
    tag: str,
    stopwords: frozenset[str] = frozenset(),
    max_tokens: int | None = None,
) -> EncodedDataset:
    token_ids: list[torch.Tensor] = []
    keep: list[int] = []
    for idx in dataset.splits.get(tag, []):
        try:
            doc = preprocess(dataset.records[idx].text, stopwords, max_tokens)
        except EmptyDocError:
            continue
        token_ids.append(vocab.encode(doc))
        keep.append(idx)
    labels = torch.zeros(len(keep), dataset.num_labels)
    for row, idx in enumerate(keep):
        labels[row, dataset.records[idx].labels] = 1.0
    return EncodedDataset(token_ids=token_ids, labels=labels, indices=keep)


def build_vocabulary(
    dataset: LabeledDataset,
    tag: str = "train",
    stopwords: frozenset[str] = frozenset(),
    min_count: int = 1,
) -> Vocabulary:
    docs: list[TokenizedDoc] = []
    for record in dataset.split_records(tag):
        try:
            docs.append(preprocess(record.text, stopwords))
        except EmptyDocError:
            continue
    return Vocabulary.build(docs, min_count=min_count)


def _pad_batch(token_ids: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    max_len = max(int(t.shape[0]) for t in token_ids)
    batch = torch.full((len(token_ids), max_len), PAD_INDEX, dtype=torch.long)
    mask = torch.zeros(len(token_ids), max_len, dtype=torch.bool)
    for i, ids in enumerate(token_ids):
        batch[i, : ids.shape[0]] = ids
        mask[i, : ids.shape[0]] = True
    return batch, mask


def predict_probs(
    model: DkecModel, encoded: EncodedDataset, batch_size: int = 32
) -> np.ndarray:
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(encoded.token_ids), batch_size):
            chunk = encoded.token_ids[start : start + batch_size]
            if not chunk:
                break
            batch, mask = _pad_batch(chunk)
            outputs.append(model(batch, mask).cpu().numpy())
    if not outputs:
        return np.zeros((0, model.num_labels))
    return np.concatenate(outputs, axis=0)


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_monitor: float
    history: list[tuple[int, float, float]] = field(default_factory=list)
    stopped_early: bool = False

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "monitor"])
            for epoch, loss, monitor in self.history:
                writer.writerow([epoch, repr(loss), repr(monitor)])


def set_reproducible(seed: int, single_thread: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    if single_thread:
        torch.set_num_threads(1)


def train(
    model: DkecModel,
    train_data: EncodedDataset,
    val_data: EncodedDataset,
    config: TrainConfig,
    seed: int = 0,
) -> TrainResult:
    """Fit the model; returns the best-monitor checkpoint and the epoch log."""
    if config.deterministic:
        set_reproducible(seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    stopper = EarlyStopper(config.patience, config.min_delta)
    generator = torch.Generator().manual_seed(seed)
    n = len(train_data.token_ids)
    if n == 0:
        raise ConfigError("training split is empty")
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    history: list[tuple[int, float, float]] = []
    stopped = False
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = torch.randperm(n, generator=generator).tolist()
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            rows = order[start : start + config.batch_size]
            batch, mask = _pad_batch([train_data.token_ids[i] for i in rows])
            targets = train_data.labels[rows]
            optimizer.zero_grad()
            probs = model(batch, mask)
            loss = bce_loss(probs, targets)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}", last_good_state=best_state
                )
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
        monitor = r_precision_at_k(
            predict_probs(model, val_data), val_data.labels.numpy(), config.monitor_k
        )
        history.append((epoch, epoch_loss, monitor))
        stop = stopper.observe(monitor)
        if stopper.best_epoch == len(history):
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if stop:
            stopped = True
            break
    return TrainResult(
        best_state=best_state,
        best_epoch=stopper.best_epoch or 0,
        best_monitor=stopper.best_value,
        history=history,
        stopped_early=stopped,
    )


def evaluate_model(
    model: DkecModel,
    encoded: EncodedDataset,
    groups: LabelGroups,
    k: int,
    threshold: float = 0.5,
) -> dict[str, dict[str, float]]:
    probs = predict_probs(model, encoded)
    return compute_group_metrics(
        probs, encoded.labels.numpy(), k, groups.as_mapping(), threshold
    )


def evaluate_seeds(
    metrics_by_seed: dict[int, dict[str, dict[str, float]] | None], k: int
) -> EvalReport:
    """Fold per-seed metric dicts (None = missing checkpoint) into a report."""
    report = EvalReport(k=k)
    for seed, metrics in metrics_by_seed.items():
        if metrics is None:
            report.mark_missing(seed)
        else:
            report.add_seed(seed, metrics)
    return report
