"""Initial node embeddings from a contextual text encoder, plus persistence.

Every graph node's display text is encoded once; the hidden states of the
last four encoder layers are summed and mean-pooled over token positions to
give a single vector per node. Tables are stored as one JSON manifest line
followed by the raw row-major float32 little-endian matrix.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import FormatError
from .graph import HeteroGraph

logger = logging.getLogger(__name__)

NodeEmbeddingTable = dict[str, np.ndarray]

LAYERS_TO_SUM = 4


class LayeredTextEncoder(Protocol):
    """Contextual encoder exposing per-layer hidden states for a text.

    ``layer_states`` returns one ``[num_tokens, hidden_size]`` array per
    layer, ordered from first to last layer. Implementations truncate inputs
    longer than their window (and should log when they do).
    """

    hidden_size: int

    def layer_states(self, text: str) -> Sequence[np.ndarray]: ...


def pool_layer_states(states: Sequence[np.ndarray]) -> np.ndarray:
    """Sum the last four layers, then mean over token positions."""
    stacked = np.stack([np.asarray(s, dtype=np.float64) for s in states[-LAYERS_TO_SUM:]])
    return stacked.sum(axis=0).mean(axis=0)


def init_node_embeddings(graph: HeteroGraph, encoder: LayeredTextEncoder) -> NodeEmbeddingTable:
    """Encode every node's display text into one fixed-size vector."""
    table: NodeEmbeddingTable = {}
    for node_id in sorted(graph.nodes):
        states = encoder.layer_states(graph.nodes[node_id].text)
        vector = pool_layer_states(states).astype(np.float32)
        if not np.all(np.isfinite(vector)):
            raise FormatError(f"non-finite embedding for node {node_id!r}")
        table[node_id] = vector
    dims = {v.shape for v in table.values()}
    if len(dims) > 1:
        raise FormatError(f"inconsistent embedding dimensions: {sorted(dims)}")
    return table


class HashingTextEncoder:
    """Deterministic stand-in encoder for offline and synthetic runs.

    Each (token, layer) pair maps to a fixed pseudo-random vector seeded from
    its hash, so identical texts always embed identically and distinct tokens
    get well-separated directions. Not a language model; it exists so the
    full pipeline runs without downloading pretrained weights.
    """

    def __init__(self, hidden_size: int = 64, num_layers: int = 4, seed: int = 0):
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.seed = seed

    def _token_vector(self, token: str, layer: int) -> np.ndarray:
        digest = hashlib.sha256(
            f"{self.seed}\x00{layer}\x00{token}".encode("utf-8")
        ).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
        return rng.standard_normal(self.hidden_size)

    def layer_states(self, text: str) -> list[np.ndarray]:
        tokens = text.casefold().split() or [""]
        return [
            np.stack([self._token_vector(tok, layer) for tok in tokens])
            for layer in range(self.num_layers)
        ]


class TransformersTextEncoder:
    """Adapter over a Hugging Face encoder exposing all hidden layers.

    Optional dependency; only imported when constructed. Inputs longer than
    the model window are truncated and logged.
    """

    def __init__(self, model_name: str = "bert-base-uncased", device: str = "cpu"):
        from transformers import AutoModel, AutoTokenizer  # deferred: optional extra

        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModel.from_pretrained(model_name, output_hidden_states=True)
        self.model.to(device).eval()
        self.device = device
        self.hidden_size = int(self.model.config.hidden_size)
        self.window = int(self.tokenizer.model_max_length)

    def layer_states(self, text: str) -> list[np.ndarray]:
        import torch

        encoded = self.tokenizer(text, return_tensors="pt", truncation=True)
        if len(self.tokenizer(text)["input_ids"]) > self.window:
            logger.warning("truncating node text of %d tokens to window %d",
                           len(self.tokenizer(text)["input_ids"]), self.window)
        with torch.no_grad():
            out = self.model(**{k: v.to(self.device) for k, v in encoded.items()})
        # hidden_states[0] is the embedding layer; keep transformer layers only.
        return [h[0].cpu().numpy() for h in out.hidden_states[1:]]


def save_embeddings(table: NodeEmbeddingTable, path: str | Path) -> None:
    ids = sorted(table)
    dim = int(next(iter(table.values())).shape[0]) if ids else 0
    manifest = {
        "format_version": 1,
        "dtype": "<f4",
        "count": len(ids),
        "dim": dim,
        "ids": ids,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, ensure_ascii=False, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        if ids:
            matrix = np.stack([table[i] for i in ids]).astype("<f4")
            fh.write(matrix.tobytes(order="C"))


def load_embeddings(path: str | Path) -> NodeEmbeddingTable:
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            manifest = json.loads(header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: bad embedding manifest line: {exc}") from exc
        if manifest.get("format_version") != 1 or manifest.get("dtype") != "<f4":
            raise FormatError(f"{path}: unsupported embedding format")
        count, dim = int(manifest["count"]), int(manifest["dim"])
        blob = fh.read()
    expected = count * dim * 4
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} matrix bytes, found {len(blob)}")
    matrix = np.frombuffer(blob, dtype="<f4").reshape(count, dim)
    return {node_id: matrix[i].copy() for i, node_id in enumerate(manifest["ids"])}
