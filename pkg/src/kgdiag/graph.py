"""Heterogeneous diagnosis knowledge graph: assembly, persistence, statistics.

Node kinds are diagnosis (D), symptom (S), treatment (T) and hierarchy (H);
the three edge kinds connect D to exactly one of the others and every edge is
stored in both directions. Symptom/treatment nodes are unified by CUI when
normalization produced one, else by case-folded name, so the same concept
extracted from different surface forms becomes a single node.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import BuildError, CodingError, FormatError
from .normalize import NormalizedConcept

GRAPH_FORMAT_VERSION = 1


class NodeKind(str, enum.Enum):
    DIAGNOSIS = "diagnosis"
    SYMPTOM = "symptom"
    TREATMENT = "treatment"
    HIERARCHY = "hierarchy"


class EdgeKind(str, enum.Enum):
    HAS_INDICATES = "has_indicates"
    SUGGESTS_ADMINISTERS = "suggests_administers"
    CHILDREN_PARENT = "children_parent"


# Each edge kind links diagnosis nodes to exactly one partner kind.
EDGE_PARTNER: dict[EdgeKind, NodeKind] = {
    EdgeKind.HAS_INDICATES: NodeKind.SYMPTOM,
    EdgeKind.SUGGESTS_ADMINISTERS: NodeKind.TREATMENT,
    EdgeKind.CHILDREN_PARENT: NodeKind.HIERARCHY,
}

_KIND_PREFIX = {
    NodeKind.DIAGNOSIS: "D",
    NodeKind.SYMPTOM: "S",
    NodeKind.TREATMENT: "T",
    NodeKind.HIERARCHY: "H",
}


@dataclass(frozen=True)
class Node:
    node_id: str
    kind: NodeKind
    text: str
    cui: str | None = None

    def identity(self) -> tuple[str, str]:
        """Cross-graph identity: CUI when present, else case-folded name."""
        return (self.kind.value, self.cui if self.cui else self.text.casefold())


def diagnosis_node_id(label: str) -> str:
    return "D:" + label.casefold()


def concept_node_id(kind: NodeKind, concept: NormalizedConcept | str) -> str:
    prefix = _KIND_PREFIX[kind]
    if isinstance(concept, NormalizedConcept):
        return f"{prefix}:{concept.cui}"
    return f"{prefix}:{concept.casefold()}"


def hierarchy_node_id(text: str) -> str:
    return "H:" + text.casefold()


@dataclass
class HeteroGraph:
    nodes: dict[str, Node] = field(default_factory=dict)
    edges: set[tuple[str, str, EdgeKind]] = field(default_factory=set)
    label_index: list[str] = field(default_factory=list)

    def add_node(self, node: Node) -> Node:
        existing = self.nodes.get(node.node_id)
        if existing is not None:
            return existing
        self.nodes[node.node_id] = node
        return node

    def add_edge_pair(self, diagnosis_id: str, other_id: str, kind: EdgeKind) -> None:
        self._check_edge(diagnosis_id, other_id, kind)
        self.edges.add((diagnosis_id, other_id, kind))
        self.edges.add((other_id, diagnosis_id, kind))

    def _check_edge(self, src: str, dst: str, kind: EdgeKind) -> None:
        for node_id in (src, dst):
            if node_id not in self.nodes:
                raise BuildError(f"edge endpoint {node_id!r} is not a node")
        kinds = {self.nodes[src].kind, self.nodes[dst].kind}
        if kinds != {NodeKind.DIAGNOSIS, EDGE_PARTNER[kind]}:
            raise BuildError(
                f"edge kind {kind.value} cannot connect "
                f"{self.nodes[src].kind.value} to {self.nodes[dst].kind.value}"
            )

    def nodes_of_kind(self, kind: NodeKind) -> list[Node]:
        return [n for n in self.nodes.values() if n.kind == kind]

    def undirected_edges(self) -> set[tuple[str, str, EdgeKind]]:
        """One canonical entry per bidirectional pair (diagnosis side first)."""
        out = set()
        for src, dst, kind in self.edges:
            if self.nodes[src].kind == NodeKind.DIAGNOSIS:
                out.add((src, dst, kind))
        return out

    def validate(self) -> None:
        """Check every structural invariant; raise FormatError on violation."""
        for src, dst, kind in self.edges:
            if src not in self.nodes or dst not in self.nodes:
                raise FormatError(f"edge ({src}, {dst}, {kind.value}) references unknown node")
            kinds = {self.nodes[src].kind, self.nodes[dst].kind}
            if kinds != {NodeKind.DIAGNOSIS, EDGE_PARTNER[kind]}:
                raise FormatError(
                    f"edge ({src}, {dst}, {kind.value}) violates the kind constraint"
                )
            if (dst, src, kind) not in self.edges:
                raise FormatError(f"edge ({src}, {dst}, {kind.value}) has no reverse edge")
        diag_ids = {n.node_id for n in self.nodes_of_kind(NodeKind.DIAGNOSIS)}
        if len(self.label_index) != len(set(self.label_index)):
            raise FormatError("label_index contains duplicates")
        if set(self.label_index) != diag_ids:
            raise FormatError("label_index does not cover exactly the diagnosis nodes")
        for kind in (NodeKind.SYMPTOM, NodeKind.TREATMENT):
            cuis = [n.cui for n in self.nodes_of_kind(kind) if n.cui]
            if len(cuis) != len(set(cuis)):
                raise FormatError(f"duplicate CUI among {kind.value} nodes")

    @property
    def num_labels(self) -> int:
        return len(self.label_index)

    def label_texts(self) -> list[str]:
        return [self.nodes[i].text for i in self.label_index]


_RELATION_KINDS = {
    EdgeKind.HAS_INDICATES: NodeKind.SYMPTOM,
    EdgeKind.SUGGESTS_ADMINISTERS: NodeKind.TREATMENT,
}

Triplet = tuple[str, "EdgeKind | str", "NormalizedConcept | str"]


def build_graph(
    labels: Sequence[str],
    triplets: Iterable[Triplet],
    hierarchy: Mapping[str, "str | Sequence[str]"] | None = None,
) -> HeteroGraph:
    """Assemble the graph from per-diagnosis concept triplets and a hierarchy.

    ``labels`` fixes the diagnosis nodes and their order. Triplets are
    ``(diagnosis, relation, concept)`` where the concept is a
    :class:`NormalizedConcept` (unified by CUI) or a bare string (unified by
    case-folded name). Hierarchy maps a diagnosis to one or more ancestor
    strings; an ancestor equal to the diagnosis itself is skipped rather than
    creating a self-category node.
    """
    if len({l.casefold() for l in labels}) != len(labels):
        raise BuildError("labels must be unique (case-insensitive)")
    graph = HeteroGraph()
    by_key: dict[str, str] = {}
    for label in labels:
        node = Node(diagnosis_node_id(label), NodeKind.DIAGNOSIS, label)
        graph.add_node(node)
        graph.label_index.append(node.node_id)
        by_key[label.casefold()] = node.node_id

    def diagnosis_for(name: str) -> str:
        node_id = by_key.get(name.casefold())
        if node_id is None:
            raise BuildError(f"triplet references unknown diagnosis {name!r}")
        return node_id

    for diagnosis, relation, concept in triplets:
        kind = EdgeKind(relation)
        if kind not in _RELATION_KINDS:
            raise BuildError(f"triplets cannot carry relation {kind.value}")
        node_kind = _RELATION_KINDS[kind]
        if isinstance(concept, NormalizedConcept):
            node = Node(
                concept_node_id(node_kind, concept), node_kind, concept.concept_name, concept.cui
            )
        else:
            node = Node(concept_node_id(node_kind, concept), node_kind, str(concept))
        node = graph.add_node(node)
        graph.add_edge_pair(diagnosis_for(diagnosis), node.node_id, kind)

    for diagnosis, ancestors in (hierarchy or {}).items():
        diag_id = diagnosis_for(diagnosis)
        if isinstance(ancestors, str):
            ancestors = [ancestors]
        for ancestor in ancestors:
            if ancestor.casefold() == diagnosis.casefold():
                continue
            node = graph.add_node(Node(hierarchy_node_id(ancestor), NodeKind.HIERARCHY, ancestor))
            graph.add_edge_pair(diag_id, node.node_id, EdgeKind.CHILDREN_PARENT)

    graph.validate()
    return graph


def strip_edge_kinds(graph: HeteroGraph, kinds: Iterable[EdgeKind]) -> HeteroGraph:
    """Rebuild the graph without edges of the given kinds (nodes are kept)."""
    drop = set(EdgeKind(k) for k in kinds)
    return HeteroGraph(
        nodes=dict(graph.nodes),
        edges={e for e in graph.edges if e[2] not in drop},
        label_index=list(graph.label_index),
    )


_ICD9_DOTTED = re.compile(r"^(E\d{3}|V\d{2}|\d{3})(?:\.(\d{1,2}))?$")
_ICD9_PLAIN = re.compile(r"^(E\d{3}|V\d{2}|\d{3})(\d{1,2})?$")


def icd9_category(code: str) -> str:
    """Three-digit (or V##/E###) category prefix of an ICD-9 code."""
    cleaned = code.strip().upper()
    match = _ICD9_DOTTED.match(cleaned) or _ICD9_PLAIN.match(cleaned)
    if not match:
        raise CodingError(f"cannot parse ICD-9 code {code!r}")
    return match.group(1)


def hierarchy_from_label_coding(
    scheme: str,
    codes: Sequence[str],
    sidecar: Mapping[str, str] | None = None,
) -> dict[str, str]:
    """Ancestor per label code under the dataset's coding scheme.

    ``icd9`` derives the 3-digit category from the code structure;
    ``ems_protocol`` looks the protocol up in a sidecar mapping of protocol
    name to category (case-insensitive keys).
    """
    if scheme == "icd9":
        return {code: icd9_category(code) for code in codes}
    if scheme == "ems_protocol":
        if sidecar is None:
            raise CodingError("ems_protocol scheme requires a sidecar mapping")
        lookup = {k.casefold(): v for k, v in sidecar.items()}
        out: dict[str, str] = {}
        for code in codes:
            category = lookup.get(code.casefold())
            if category is None:
                raise CodingError(f"protocol {code!r} missing from the sidecar mapping")
            out[code] = category
        return out
    raise CodingError(f"unknown coding scheme {scheme!r}")


@dataclass(frozen=True)
class OverlapRatios:
    """Share of the union held by each side and by the intersection."""

    wou: float
    mou: float
    iou: float


def _overlap(first: set, second: set) -> OverlapRatios:
    union = first | second
    if not union:
        # Two empty sets are identical; report full agreement.
        return OverlapRatios(1.0, 1.0, 1.0)
    return OverlapRatios(
        wou=len(first) / len(union),
        mou=len(second) / len(union),
        iou=len(first & second) / len(union),
    )


@dataclass
class GraphStats:
    node_counts: dict[str, int]
    edge_counts: dict[str, int]
    total_nodes: int
    total_edges: int
    overlap: dict[str, OverlapRatios] | None = None

    def to_jsonable(self) -> dict:
        out = {
            "node_counts": self.node_counts,
            "edge_counts": self.edge_counts,
            "total_nodes": self.total_nodes,
            "total_edges": self.total_edges,
        }
        if self.overlap is not None:
            out["overlap"] = {
                key: {"WoU": r.wou, "MoU": r.mou, "IoU": r.iou}
                for key, r in self.overlap.items()
            }
        return out


def _node_identities(graph: HeteroGraph, kind: NodeKind | None = None) -> set:
    return {
        n.identity() for n in graph.nodes.values() if kind is None or n.kind == kind
    }


def _edge_identities(graph: HeteroGraph, kind: EdgeKind | None = None) -> set:
    out = set()
    for src, dst, edge_kind in graph.undirected_edges():
        if kind is not None and edge_kind != kind:
            continue
        out.add((graph.nodes[src].identity(), graph.nodes[dst].identity(), edge_kind.value))
    return out


def graph_stats(graph: HeteroGraph, other: HeteroGraph | None = None) -> GraphStats:
    """Per-kind counts, plus overlap ratios against ``other`` when given.

    Edge counts are bidirectional pairs counted once. Overlap uses node
    identity (kind, CUI-or-name) so the same concept matches across graphs
    regardless of node ids; ratios are |W|/|W∪M|, |M|/|W∪M| and |W∩M|/|W∪M|.
    """
    stats = GraphStats(
        node_counts={k.value: len(graph.nodes_of_kind(k)) for k in NodeKind},
        edge_counts={
            k.value: sum(1 for e in graph.undirected_edges() if e[2] == k) for k in EdgeKind
        },
        total_nodes=len(graph.nodes),
        total_edges=len(graph.undirected_edges()),
    )
    if other is None:
        return stats
    overlap: dict[str, OverlapRatios] = {
        "nodes": _overlap(_node_identities(graph), _node_identities(other)),
        "edges": _overlap(_edge_identities(graph), _edge_identities(other)),
    }
    for kind in NodeKind:
        overlap["nodes." + kind.value] = _overlap(
            _node_identities(graph, kind), _node_identities(other, kind)
        )
    for kind in EdgeKind:
        overlap["edges." + kind.value] = _overlap(
            _edge_identities(graph, kind), _edge_identities(other, kind)
        )
    stats.overlap = overlap
    return stats


def graph_to_jsonable(graph: HeteroGraph) -> dict:
    return {
        "format_version": GRAPH_FORMAT_VERSION,
        "nodes": [
            {"id": n.node_id, "kind": n.kind.value, "text": n.text, "cui": n.cui}
            for n in sorted(graph.nodes.values(), key=lambda n: n.node_id)
        ],
        "edges": sorted([src, dst, kind.value] for src, dst, kind in graph.edges),
        "label_index": list(graph.label_index),
    }


def save_graph(graph: HeteroGraph, path: str | Path) -> None:
    """Write the graph as deterministic, human-inspectable JSON."""
    graph.validate()
    payload = json.dumps(graph_to_jsonable(graph), ensure_ascii=False, indent=2, sort_keys=True)
    Path(path).write_text(payload + "\n", encoding="utf-8")


def load_graph(path: str | Path) -> HeteroGraph:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if data.get("format_version") != GRAPH_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {data.get('format_version')!r}")
    graph = HeteroGraph()
    for i, row in enumerate(data.get("nodes", [])):
        try:
            node = Node(row["id"], NodeKind(row["kind"]), row["text"], row.get("cui"))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: bad node at index {i}: {exc}") from exc
        if node.node_id in graph.nodes:
            raise FormatError(f"{path}: duplicate node id {node.node_id!r}")
        graph.nodes[node.node_id] = node
    for i, row in enumerate(data.get("edges", [])):
        try:
            src, dst, kind = row
            graph.edges.add((src, dst, EdgeKind(kind)))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"{path}: bad edge at index {i}: {exc}") from exc
    graph.label_index = list(data.get("label_index", []))
    try:
        graph.validate()
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return graph
