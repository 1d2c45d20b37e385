"""Long-document encoders producing token-level feature matrices.

Two routes to ``[Seq, d_doc]`` features: a multi-filter CNN over word
embeddings trained from scratch (same-length padding keeps token alignment),
and a chunked pretrained contextual encoder whose per-chunk last-layer states
are concatenated along the sequence axis.
"""

from __future__ import annotations

import json
import logging
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, EmptyDocError, EncoderError

logger = logging.getLogger(__name__)

_PUNCT_TABLE = str.maketrans({ch: " " for ch in string.punctuation})


@dataclass
class TokenizedDoc:
    tokens: list[str]

    @property
    def seq_len(self) -> int:
        return len(self.tokens)


def load_stopwords(path: str | Path) -> frozenset[str]:
    """Plain text stopword list, one word per line; blank lines ignored."""
    words = Path(path).read_text(encoding="utf-8").split("\n")
    return frozenset(w.strip().casefold() for w in words if w.strip())


def preprocess(
    raw_text: str,
    stopwords: Iterable[str] = frozenset(),
    max_tokens: int | None = None,
) -> TokenizedDoc:
    """Lowercase, strip punctuation, drop stopwords, whitespace-split.

    Deterministic; punctuation characters become spaces so joined words
    split apart. Raises EmptyDocError when nothing survives.
    """
    stop = {w.casefold() for w in stopwords}
    tokens = [
        tok for tok in raw_text.casefold().translate(_PUNCT_TABLE).split() if tok not in stop
    ]
    if not tokens:
        raise EmptyDocError("document is empty after preprocessing")
    if max_tokens is not None and len(tokens) > max_tokens:
        logger.info("truncating document from %d to %d tokens", len(tokens), max_tokens)
        tokens = tokens[:max_tokens]
    return TokenizedDoc(tokens)


PAD_INDEX = 0
UNK_INDEX = 1


class Vocabulary:
    """token -> index map with reserved PAD (0) and UNK (1) rows."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.index: dict[str, int] = {}
        for tok in tokens:
            self.index.setdefault(tok, len(self.index) + 2)

    @classmethod
    def build(cls, docs: Iterable[TokenizedDoc], min_count: int = 1) -> "Vocabulary":
        counts = Counter(tok for doc in docs for tok in doc.tokens)
        kept = [t for t, c in counts.items() if c >= min_count]
        # Frequency-then-lexicographic order keeps ids stable across runs.
        kept.sort(key=lambda t: (-counts[t], t))
        return cls(kept)

    def __len__(self) -> int:
        return len(self.index) + 2

    def encode(self, doc: TokenizedDoc) -> torch.Tensor:
        return torch.tensor(
            [self.index.get(tok, UNK_INDEX) for tok in doc.tokens], dtype=torch.long
        )

    def save(self, path: str | Path) -> None:
        payload = json.dumps(self.index, ensure_ascii=False, sort_keys=True, indent=0)
        Path(path).write_text(payload + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        vocab = cls()
        vocab.index = {str(k): int(v) for k, v in json.loads(Path(path).read_text("utf-8")).items()}
        return vocab


@dataclass
class EncoderConfig:
    kind: str = "multi_filter_cnn"  # multi_filter_cnn | single_filter_cnn | chunked_pretrained
    embedding_dim: int = 100
    kernel_sizes: tuple[int, ...] = (3, 5, 9)
    channels_per_kernel: int = 100
    chunk_len: int = 512
    dropout: float = 0.2
    max_tokens: int = 4000

    def __post_init__(self):
        if self.kind not in ("multi_filter_cnn", "single_filter_cnn", "chunked_pretrained"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "single_filter_cnn" and len(self.kernel_sizes) > 1:
            self.kernel_sizes = self.kernel_sizes[:1]
        for k in self.kernel_sizes:
            if k <= 0 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd positive integers, got {k}")
        if self.chunk_len <= 0:
            raise ConfigError("chunk_len must be positive")

    @property
    def cnn_output_dim(self) -> int:
        return self.channels_per_kernel * len(self.kernel_sizes)


class MultiFilterCnn(nn.Module):
    """Word embeddings plus parallel same-padded 1-D convolutions.

    Output is the channel-wise concatenation over kernel sizes, shape
    ``[batch, seq, channels * len(kernel_sizes)]``; sequence length is
    preserved so token positions still line up for label-wise attention.
    """

    def __init__(
        self,
        vocab_size: int,
        embedding_dim: int = 100,
        kernel_sizes: Sequence[int] = (3, 5, 9),
        channels_per_kernel: int = 100,
        dropout: float = 0.2,
        activation: str = "tanh",
    ):
        super().__init__()
        for k in kernel_sizes:
            if k % 2 == 0:
                raise ConfigError(f"kernel size {k} must be odd for same-length padding")
        self.embedding = nn.Embedding(vocab_size, embedding_dim, padding_idx=PAD_INDEX)
        self.convs = nn.ModuleList(
            nn.Conv1d(embedding_dim, channels_per_kernel, k, padding=(k - 1) // 2)
            for k in kernel_sizes
        )
        self.dropout = nn.Dropout(dropout)
        if activation == "tanh":
            self.activation = torch.tanh
        elif activation == "none":
            self.activation = None
        else:
            raise ConfigError(f"unknown activation {activation!r}")
        self.output_dim = channels_per_kernel * len(kernel_sizes)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.dim() == 1:
            return self.forward(token_ids.unsqueeze(0)).squeeze(0)
        emb = self.dropout(self.embedding(token_ids))  # [B, S, E]
        channels = emb.transpose(1, 2)  # [B, E, S]
        outs = []
        for conv in self.convs:
            feat = conv(channels)
            if self.activation is not None:
                feat = self.activation(feat)
            outs.append(feat)
        return torch.cat(outs, dim=1).transpose(1, 2)  # [B, S, sum(channels)]


class ChunkEncoder(Protocol):
    """Pretrained contextual encoder over a token window.

    ``encode_tokens`` returns last-layer hidden states aligned one-to-one
    with the input tokens (any special tokens the underlying model adds must
    already be stripped).
    """

    hidden_size: int

    def encode_tokens(self, tokens: Sequence[str]) -> np.ndarray: ...


def encode_chunked_pretrained(
    doc: TokenizedDoc, encoder: ChunkEncoder, chunk_len: int = 512
) -> torch.Tensor:
    """Encode a long doc as consecutive non-overlapping chunks.

    Each chunk of at most ``chunk_len`` tokens is encoded independently and
    the per-chunk last-layer states are concatenated along the sequence axis,
    so the output has one row per input token.
    """
    if chunk_len <= 0:
        raise ConfigError("chunk_len must be positive")
    pieces: list[torch.Tensor] = []
    for start in range(0, doc.seq_len, chunk_len):
        chunk = doc.tokens[start : start + chunk_len]
        try:
            states = encoder.encode_tokens(chunk)
        except Exception as exc:
            raise EncoderError(f"chunk encoder failed at offset {start}: {exc}") from exc
        states = torch.as_tensor(np.asarray(states), dtype=torch.get_default_dtype())
        if states.shape[0] != len(chunk):
            raise EncoderError(
                f"encoder returned {states.shape[0]} rows for a {len(chunk)}-token chunk"
            )
        pieces.append(states)
    return torch.cat(pieces, dim=0)
