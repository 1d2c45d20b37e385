"""Graph-enhanced label-wise attention classifier.

The graph branch runs a heterogeneous graph transformer (node-kind-specific
key/query/message/output projections, edge-kind-specific attention and
message transforms, multi-head softmax over each node's typed neighborhood,
residual update) and a linear head that turns updated diagnosis-node states
into one embedding per label. The text branch supplies token-level document
features. Label-wise attention scores every token against every label
embedding, the attended features are pooled per label, and a final
label-to-label linear plus logistic head yields per-label probabilities
trained with summed binary cross-entropy.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import torch
from torch import nn

from .embeddings import NodeEmbeddingTable
from .errors import ConfigError, FormatError
from .graph import EdgeKind, HeteroGraph, NodeKind

# All directed (source kind, edge kind, target kind) relations the schema allows.
RELATIONS: tuple[tuple[NodeKind, EdgeKind, NodeKind], ...] = (
    (NodeKind.SYMPTOM, EdgeKind.HAS_INDICATES, NodeKind.DIAGNOSIS),
    (NodeKind.DIAGNOSIS, EdgeKind.HAS_INDICATES, NodeKind.SYMPTOM),
    (NodeKind.TREATMENT, EdgeKind.SUGGESTS_ADMINISTERS, NodeKind.DIAGNOSIS),
    (NodeKind.DIAGNOSIS, EdgeKind.SUGGESTS_ADMINISTERS, NodeKind.TREATMENT),
    (NodeKind.HIERARCHY, EdgeKind.CHILDREN_PARENT, NodeKind.DIAGNOSIS),
    (NodeKind.DIAGNOSIS, EdgeKind.CHILDREN_PARENT, NodeKind.HIERARCHY),
)


def relation_key(src: NodeKind, edge: EdgeKind, dst: NodeKind) -> str:
    return f"{src.value}--{edge.value}--{dst.value}"


@dataclass
class ModelConfig:
    hidden_size: int = 256
    num_heads: int = 8
    hgt_layers: int = 1
    label_dim: int = 256
    pooling: str = "sum"  # sum | max
    hla_attend_raw: bool = False
    dropout: float = 0.2

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError("hidden_size must be divisible by num_heads")
        if self.pooling not in ("sum", "max"):
            raise ConfigError(f"pooling must be sum|max, got {self.pooling!r}")
        if self.hgt_layers < 1:
            raise ConfigError("need at least one graph layer")


class GraphTensors:
    """Canonically ordered tensor view of a graph plus node features.

    Diagnosis nodes follow ``label_index`` order; other kinds are sorted by
    node id and edges are sorted, so two graphs that are equal as data
    produce bit-identical tensors regardless of insertion order.
    """

    def __init__(self, graph: HeteroGraph, table: NodeEmbeddingTable, dtype=torch.float32):
        graph.validate()
        self.kind_ids: dict[NodeKind, list[str]] = {}
        for kind in NodeKind:
            if kind == NodeKind.DIAGNOSIS:
                self.kind_ids[kind] = list(graph.label_index)
            else:
                self.kind_ids[kind] = sorted(
                    n.node_id for n in graph.nodes_of_kind(kind)
                )
        missing = [i for ids in self.kind_ids.values() for i in ids if i not in table]
        if missing:
            raise ConfigError(f"nodes missing from the embedding table: {missing[:5]}")
        dims = {table[i].shape[0] for ids in self.kind_ids.values() for i in ids}
        if len(dims) > 1:
            raise ConfigError(f"mixed embedding dimensions {sorted(dims)}")
        self.input_dim = dims.pop() if dims else 0

        self.features: dict[NodeKind, torch.Tensor] = {}
        index_of: dict[str, int] = {}
        for kind, ids in self.kind_ids.items():
            for pos, node_id in enumerate(ids):
                index_of[node_id] = pos
            if ids:
                rows = [torch.as_tensor(table[i], dtype=dtype) for i in ids]
                self.features[kind] = torch.stack(rows)
            else:
                self.features[kind] = torch.zeros((0, self.input_dim), dtype=dtype)

        edges_by_rel: dict[str, list[tuple[int, int]]] = {
            relation_key(*rel): [] for rel in RELATIONS
        }
        for src, dst, kind in sorted(graph.edges, key=lambda e: (e[0], e[1], e[2].value)):
            key = relation_key(graph.nodes[src].kind, kind, graph.nodes[dst].kind)
            edges_by_rel[key].append((index_of[src], index_of[dst]))
        self.edge_index: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        for key, pairs in edges_by_rel.items():
            if pairs:
                src_idx = torch.tensor([p[0] for p in pairs], dtype=torch.long)
                dst_idx = torch.tensor([p[1] for p in pairs], dtype=torch.long)
            else:
                src_idx = torch.zeros(0, dtype=torch.long)
                dst_idx = torch.zeros(0, dtype=torch.long)
            self.edge_index[key] = (src_idx, dst_idx)

        self.in_degree: dict[NodeKind, torch.Tensor] = {}
        for kind in NodeKind:
            deg = torch.zeros(len(self.kind_ids[kind]), dtype=torch.long)
            for src_kind, edge_kind, dst_kind in RELATIONS:
                if dst_kind == kind:
                    _, dst_idx = self.edge_index[relation_key(src_kind, edge_kind, dst_kind)]
                    deg.index_add_(0, dst_idx, torch.ones_like(dst_idx))
            self.in_degree[kind] = deg

    def to(self, dtype: torch.dtype) -> "GraphTensors":
        for kind in self.features:
            self.features[kind] = self.features[kind].to(dtype)
        return self


class AttentionRecord(NamedTuple):
    dst_kind: NodeKind
    dst_index: torch.Tensor  # [E]
    weights: torch.Tensor  # [E, heads]


class HgtLayer(nn.Module):
    """One round of typed multi-head message passing with residual update.

    A target node attends over all its incoming typed edges with one softmax
    per head; messages are source states projected per source kind and
    transformed per relation. Nodes with no neighbors fall back to their own
    message projection, so an edgeless graph reduces to a per-node
    feed-forward update.
    """

    def __init__(self, hidden_size: int, num_heads: int, dropout: float = 0.2):
        super().__init__()
        if hidden_size % num_heads != 0:
            raise ConfigError("hidden_size must be divisible by num_heads")
        self.hidden_size = hidden_size
        self.num_heads = num_heads
        self.head_dim = hidden_size // num_heads
        self.key_proj = nn.ModuleDict()
        self.query_proj = nn.ModuleDict()
        self.message_proj = nn.ModuleDict()
        self.out_proj = nn.ModuleDict()
        for kind in NodeKind:
            self.key_proj[kind.value] = nn.Linear(hidden_size, hidden_size)
            self.query_proj[kind.value] = nn.Linear(hidden_size, hidden_size)
            self.message_proj[kind.value] = nn.Linear(hidden_size, hidden_size)
            self.out_proj[kind.value] = nn.Linear(hidden_size, hidden_size)
        self.rel_att = nn.ParameterDict()
        self.rel_msg = nn.ParameterDict()
        self.rel_priority = nn.ParameterDict()
        for rel in RELATIONS:
            key = relation_key(*rel)
            self.rel_att[key] = nn.Parameter(
                torch.empty(num_heads, self.head_dim, self.head_dim)
            )
            self.rel_msg[key] = nn.Parameter(
                torch.empty(num_heads, self.head_dim, self.head_dim)
            )
            self.rel_priority[key] = nn.Parameter(torch.ones(num_heads))
            nn.init.xavier_uniform_(self.rel_att[key])
            nn.init.xavier_uniform_(self.rel_msg[key])
        self.dropout = nn.Dropout(dropout)

    def _heads(self, tensor: torch.Tensor) -> torch.Tensor:
        return tensor.view(tensor.shape[0], self.num_heads, self.head_dim)

    def forward(
        self,
        states: dict[NodeKind, torch.Tensor],
        gt: GraphTensors,
        record_attention: bool = False,
    ) -> tuple[dict[NodeKind, torch.Tensor], list[AttentionRecord]]:
        keys = {k: self._heads(self.key_proj[k.value](x)) for k, x in states.items()}
        queries = {k: self._heads(self.query_proj[k.value](x)) for k, x in states.items()}
        messages = {k: self._heads(self.message_proj[k.value](x)) for k, x in states.items()}

        records: list[AttentionRecord] = []
        out: dict[NodeKind, torch.Tensor] = {}
        for dst_kind in NodeKind:
            n_dst = states[dst_kind].shape[0]
            logits_parts, msg_parts, dst_parts = [], [], []
            for src_kind, edge_kind, rel_dst in RELATIONS:
                if rel_dst != dst_kind:
                    continue
                key = relation_key(src_kind, edge_kind, rel_dst)
                src_idx, dst_idx = gt.edge_index[key]
                if src_idx.numel() == 0:
                    continue
                k_edge = keys[src_kind][src_idx]  # [E, h, d]
                q_edge = queries[dst_kind][dst_idx]
                logits = torch.einsum("ehd,hdf,ehf->eh", k_edge, self.rel_att[key], q_edge)
                logits = logits * self.rel_priority[key] / math.sqrt(self.head_dim)
                msg = torch.einsum("ehd,hdf->ehf", messages[src_kind][src_idx], self.rel_msg[key])
                logits_parts.append(logits)
                msg_parts.append(msg)
                dst_parts.append(dst_idx)

            if logits_parts:
                logits = torch.cat(logits_parts)  # [E, h]
                msg = torch.cat(msg_parts)  # [E, h, d]
                dst_idx = torch.cat(dst_parts)  # [E]
                # Per-(node, head) softmax over the typed neighborhood.
                idx = dst_idx.unsqueeze(1).expand(-1, self.num_heads)
                seg_max = torch.full(
                    (n_dst, self.num_heads), -torch.inf, dtype=logits.dtype
                ).scatter_reduce(0, idx, logits.detach(), reduce="amax", include_self=True)
                shifted = torch.exp(logits - seg_max[dst_idx])
                denom = torch.zeros(n_dst, self.num_heads, dtype=logits.dtype).index_add(
                    0, dst_idx, shifted
                )
                weights = shifted / denom[dst_idx]
                if record_attention:
                    records.append(AttentionRecord(dst_kind, dst_idx, weights.detach()))
                agg = torch.zeros(
                    n_dst, self.num_heads, self.head_dim, dtype=msg.dtype
                ).index_add(0, dst_idx, weights.unsqueeze(-1) * msg)
            else:
                agg = torch.zeros(n_dst, self.num_heads, self.head_dim, dtype=states[dst_kind].dtype)

            # Neighborless nodes keep their own message projection as the aggregate.
            isolated = gt.in_degree[dst_kind] == 0
            if bool(isolated.any()):
                agg = torch.where(
                    isolated.view(-1, 1, 1), messages[dst_kind], agg
                )
            flat = self.dropout(agg.reshape(n_dst, self.hidden_size))
            out[dst_kind] = self.out_proj[dst_kind.value](torch.nn.functional.gelu(flat)) + states[dst_kind]
        return out, records


class HgtEncoder(nn.Module):
    """Per-kind input projection followed by a stack of HGT layers."""

    def __init__(self, input_dim: int, hidden_size: int, num_heads: int, num_layers: int,
                 dropout: float = 0.2):
        super().__init__()
        self.input_proj = nn.ModuleDict(
            {kind.value: nn.Linear(input_dim, hidden_size) for kind in NodeKind}
        )
        self.layers = nn.ModuleList(
            HgtLayer(hidden_size, num_heads, dropout) for _ in range(num_layers)
        )
        self.last_attention: list[AttentionRecord] = []

    def forward(
        self, gt: GraphTensors, record_attention: bool = False
    ) -> dict[NodeKind, torch.Tensor]:
        states = {
            kind: self.input_proj[kind.value](feat) for kind, feat in gt.features.items()
        }
        self.last_attention = []
        for layer in self.layers:
            states, records = layer(states, gt, record_attention=record_attention)
            self.last_attention.extend(records)
        return states


def hgt_forward(
    encoder: HgtEncoder, gt: GraphTensors, record_attention: bool = False
) -> dict[NodeKind, torch.Tensor]:
    """Updated node states per kind (diagnosis rows follow label_index order)."""
    return encoder(gt, record_attention=record_attention)


class HlaOutput(NamedTuple):
    attention: torch.Tensor  # [..., L, Seq]
    attended: torch.Tensor  # [..., L, out_dim]


def hla_attention(
    doc_features: torch.Tensor,
    label_embeddings: torch.Tensor,
    proj: nn.Linear,
    attend_raw: bool = False,
    mask: torch.Tensor | None = None,
) -> HlaOutput:
    """Label-wise attention over token features.

    Token features are mapped into the label space with a tanh-squashed
    linear layer; each label's scores over tokens are softmax-normalized and
    used to average the (projected, or raw when ``attend_raw``) token
    features into one vector per label. ``mask`` marks valid tokens for
    padded batches.
    """
    hidden = torch.tanh(proj(doc_features))  # [..., Seq, label_dim]
    target = doc_features if attend_raw else hidden
    scores = hidden.matmul(label_embeddings.transpose(-1, -2))  # [..., Seq, L]
    scores = scores.transpose(-1, -2)  # [..., L, Seq]
    if mask is not None:
        scores = scores.masked_fill(~mask.unsqueeze(-2), -torch.inf)
    attention = torch.softmax(scores, dim=-1)
    return HlaOutput(attention, attention.matmul(target))


def pool_attended(attended: torch.Tensor, pooling: str) -> torch.Tensor:
    """Reduce attended features over the hidden axis to one scalar per label."""
    if pooling == "sum":
        return attended.sum(dim=-1)
    if pooling == "max":
        return attended.max(dim=-1).values
    raise ConfigError(f"pooling must be sum|max, got {pooling!r}")


def classify(
    attended: torch.Tensor, pooling: str, classifier: nn.Linear
) -> torch.Tensor:
    """Pool per label, mix with the label-to-label linear, squash to (0, 1)."""
    return torch.sigmoid(classifier(pool_attended(attended, pooling)))


def bce_loss(
    probs: torch.Tensor, targets: torch.Tensor, eps: float = 1e-7
) -> torch.Tensor:
    """Summed binary cross-entropy over labels (and documents, if batched)."""
    probs = probs.clamp(eps, 1.0 - eps)
    targets = targets.to(probs.dtype)
    return -(targets * probs.log() + (1.0 - targets) * (1.0 - probs).log()).sum()


class DkecModel(nn.Module):
    """Full classifier: document encoder + graph branch + label-wise attention.

    ``doc_encoder`` maps token-id tensors to ``[B, Seq, doc_dim]`` features;
    pass ``None`` and use :meth:`forward_features` when features come from an
    external (e.g. chunked pretrained) encoder. Label embeddings are
    recomputed from the graph on every training forward so graph parameters
    learn; at eval time they are cached until the mode flips back.
    """

    def __init__(
        self,
        graph_tensors: GraphTensors,
        config: ModelConfig,
        doc_encoder: nn.Module | None = None,
        doc_dim: int | None = None,
    ):
        super().__init__()
        self.config = config
        self.graph_tensors = graph_tensors
        self.doc_encoder = doc_encoder
        if doc_dim is None:
            if doc_encoder is None or not hasattr(doc_encoder, "output_dim"):
                raise ConfigError("doc_dim is required when the encoder does not expose one")
            doc_dim = int(doc_encoder.output_dim)
        self.doc_dim = doc_dim
        self.num_labels = len(graph_tensors.kind_ids[NodeKind.DIAGNOSIS])
        self.hgt = HgtEncoder(
            graph_tensors.input_dim,
            config.hidden_size,
            config.num_heads,
            config.hgt_layers,
            config.dropout,
        )
        self.label_proj = nn.Linear(config.hidden_size, config.label_dim)
        self.hla_proj = nn.Linear(doc_dim, config.label_dim)
        self.classifier = nn.Linear(self.num_labels, self.num_labels)
        self._label_cache: torch.Tensor | None = None

    def train(self, mode: bool = True):
        self._label_cache = None
        return super().train(mode)

    def label_embeddings(self, record_attention: bool = False) -> torch.Tensor:
        """Graph-updated diagnosis embeddings, one row per label."""
        if not self.training and self._label_cache is not None and not record_attention:
            return self._label_cache
        states = self.hgt(self.graph_tensors, record_attention=record_attention)
        d_star = self.label_proj(states[NodeKind.DIAGNOSIS])
        if not self.training:
            self._label_cache = d_star.detach()
        return d_star

    def forward_features(
        self, doc_features: torch.Tensor, mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        d_star = self.label_embeddings()
        hla = hla_attention(
            doc_features, d_star, self.hla_proj, self.config.hla_attend_raw, mask
        )
        return classify(hla.attended, self.config.pooling, self.classifier)

    def forward(
        self, token_ids: torch.Tensor, mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        if self.doc_encoder is None:
            raise ConfigError("model was built without a token-level document encoder")
        return self.forward_features(self.doc_encoder(token_ids), mask)

    def to_double(self) -> "DkecModel":
        self.double()
        self.graph_tensors.to(torch.float64)
        return self


def config_hash(config: ModelConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(
    model: DkecModel, path: str | Path, seed: int, epoch: int, extra: dict | None = None
) -> None:
    manifest = {
        "config": asdict(model.config),
        "config_hash": config_hash(model.config),
        "doc_dim": model.doc_dim,
        "num_labels": model.num_labels,
        "seed": seed,
        "epoch": epoch,
    }
    if extra:
        manifest.update(extra)
    torch.save({"manifest": manifest, "state_dict": model.state_dict()}, path)


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
        return payload["manifest"], payload["state_dict"]
    except Exception as exc:
        raise FormatError(f"cannot load checkpoint {path}: {exc}") from exc
