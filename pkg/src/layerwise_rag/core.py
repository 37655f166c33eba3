"""Domain types and the undirected claim multigraph."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator


class GraphError(Exception):
    pass


class ClaimNotFoundError(GraphError, KeyError):
    pass


class GraphParseError(GraphError, ValueError):
    pass


@dataclass(frozen=True)
class DocumentChunk:
    chunk_id: str
    corpus_id: str
    text: str
    source_doc_id: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError(f"chunk {self.chunk_id!r} has empty text")


@dataclass
class Claim:
    claim_id: str
    text: str
    source_chunk_id: str
    relevance_score: float | None = None

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError(f"claim {self.claim_id!r} has empty text")


@dataclass(frozen=True)
class Triple:
    claim_id: str
    subject: str
    predicate: str
    object: str

    def __post_init__(self):
        if not self.subject or not self.object:
            raise ValueError(f"triple for {self.claim_id!r} has an empty entity")


@dataclass
class EntityNode:
    canonical_label: str
    member_surface_forms: set[str] = field(default_factory=set)

    def __post_init__(self):
        self.member_surface_forms.add(self.canonical_label)


@dataclass
class Summary:
    text: str
    focus_claim_id: str
    contributing_claim_ids: set[str]
    contributing_chunk_ids: set[str]
    rank: int


@dataclass(frozen=True)
class Edge:
    a: str
    b: str
    claim: Claim
    predicate: str = ""

    @property
    def claim_id(self) -> str:
        return self.claim.claim_id

    def endpoints(self) -> tuple[str, str]:
        return self.a, self.b


class ClaimGraph:
    """Undirected multigraph: nodes are canonical entities, edges carry claims.

    Parallel edges and self-loops are kept. Two claims are adjacent when their
    edges share an endpoint node.
    """

    def __init__(self, allow_self_loops: bool = True):
        self.allow_self_loops = allow_self_loops
        self._nodes: dict[str, EntityNode] = {}
        self._edges: dict[str, Edge] = {}
        self._incident: dict[str, list[str]] = {}
        self._frozen = False

    # -- construction -----------------------------------------------------
    def add_node(self, label: str, surface_forms: Iterable[str] = ()) -> EntityNode:
        self._check_mutable()
        node = self._nodes.get(label)
        if node is None:
            node = EntityNode(label, set(surface_forms))
            self._nodes[label] = node
            self._incident[label] = []
        else:
            node.member_surface_forms.update(surface_forms)
        return node

    def add_claim_edge(self, triple: Triple, claim: Claim) -> Edge:
        """Insert one edge for ``claim`` between the triple's (canonical) entities."""
        self._check_mutable()
        if triple.claim_id != claim.claim_id:
            raise GraphError(f"triple belongs to {triple.claim_id!r}, not {claim.claim_id!r}")
        if claim.claim_id in self._edges:
            raise GraphError(f"duplicate claim id {claim.claim_id!r}")
        a, b = triple.subject, triple.object
        if a == b and not self.allow_self_loops:
            raise GraphError(f"self-loop on {a!r} rejected for claim {claim.claim_id!r}")
        self.add_node(a)
        self.add_node(b)
        edge = Edge(a, b, claim, triple.predicate)
        self._edges[claim.claim_id] = edge
        self._incident[a].append(claim.claim_id)
        if b != a:
            self._incident[b].append(claim.claim_id)
        return edge

    def freeze(self) -> "ClaimGraph":
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def _check_mutable(self):
        if self._frozen:
            raise GraphError("graph is frozen")

    # -- access -----------------------------------------------------------
    @property
    def nodes(self) -> dict[str, EntityNode]:
        return self._nodes

    @property
    def edges(self) -> list[Edge]:
        return list(self._edges.values())

    def claim_ids(self) -> list[str]:
        return list(self._edges)

    def edge(self, claim_id: str) -> Edge:
        try:
            return self._edges[claim_id]
        except KeyError:
            raise ClaimNotFoundError(claim_id) from None

    def claim(self, claim_id: str) -> Claim:
        return self.edge(claim_id).claim

    def __contains__(self, claim_id: object) -> bool:
        return claim_id in self._edges

    def __len__(self) -> int:
        return len(self._edges)

    def __iter__(self) -> Iterator[Edge]:
        return iter(self._edges.values())

    def incident(self, node: str) -> list[str]:
        return list(self._incident.get(node, ()))

    def degree(self, node: str) -> int:
        # a self-loop contributes 2 to the degree of its node
        return sum(2 if self._edges[c].a == self._edges[c].b else 1 for c in self._incident[node])

    # -- traversal --------------------------------------------------------
    def claim_neighbors_1hop(self, claim_id: str) -> set[str]:
        edge = self.edge(claim_id)
        out: set[str] = set()
        for node in {edge.a, edge.b}:
            out.update(self._incident[node])
        out.discard(claim_id)
        return out

    def connected_component_claims(self, claim_id: str) -> set[str]:
        edge = self.edge(claim_id)
        seen_nodes = {edge.a, edge.b}
        queue = deque(seen_nodes)
        claims: set[str] = set()
        while queue:
            node = queue.popleft()
            for cid in self._incident[node]:
                claims.add(cid)
                e = self._edges[cid]
                for nxt in (e.a, e.b):
                    if nxt not in seen_nodes:
                        seen_nodes.add(nxt)
                        queue.append(nxt)
        return claims

    def node_distances(self, sources: Iterable[str]) -> dict[str, int]:
        """BFS hop distance of every reachable node from a set of source nodes."""
        dist = {s: 0 for s in sources}
        queue = deque(dist)
        while queue:
            node = queue.popleft()
            for cid in self._incident[node]:
                e = self._edges[cid]
                for nxt in (e.a, e.b):
                    if nxt not in dist:
                        dist[nxt] = dist[node] + 1
                        queue.append(nxt)
        return dist

    # -- derived graphs ---------------------------------------------------
    def without_claims(self, drop: Iterable[str]) -> "ClaimGraph":
        """Copy with the given edges removed; nodes left without edges are removed too."""
        drop = set(drop)
        out = ClaimGraph(self.allow_self_loops)
        for e in self._edges.values():
            if e.claim_id in drop:
                continue
            for label in (e.a, e.b):
                out.add_node(label, self._nodes[label].member_surface_forms)
            out.add_claim_edge(Triple(e.claim_id, e.a, e.predicate, e.b), e.claim)
        return out

    # -- comparison -------------------------------------------------------
    def structurally_equal(self, other: "ClaimGraph") -> bool:
        if {k: v.member_surface_forms for k, v in self._nodes.items()} != {
            k: v.member_surface_forms for k, v in other._nodes.items()
        }:
            return False
        return _edge_multiset(self) == _edge_multiset(other)

    def __repr__(self) -> str:
        return f"ClaimGraph(nodes={len(self._nodes)}, edges={len(self._edges)})"


def _edge_key(e: Edge):
    a, b = sorted((e.a, e.b))
    c = e.claim
    return (a, b, c.claim_id, c.text, c.relevance_score, c.source_chunk_id, e.predicate)


def _edge_multiset(g: ClaimGraph) -> list:
    return sorted(_edge_key(e) for e in g.edges)


# -- persistence ------------------------------------------------------------

def graph_to_dict(graph: ClaimGraph) -> dict:
    return {
        "nodes": [
            {"label": n.canonical_label, "surface_forms": sorted(n.member_surface_forms)}
            for n in graph.nodes.values()
        ],
        "edges": [
            {
                "a": e.a,
                "b": e.b,
                "claim_id": e.claim_id,
                "text": e.claim.text,
                "score": e.claim.relevance_score,
                "chunk_id": e.claim.source_chunk_id,
                "predicate": e.predicate,
            }
            for e in graph.edges
        ],
    }


def graph_from_dict(data: dict) -> ClaimGraph:
    if not isinstance(data, dict) or "nodes" not in data or "edges" not in data:
        raise GraphParseError("graph document must be an object with 'nodes' and 'edges'")
    graph = ClaimGraph()
    for i, rec in enumerate(data["nodes"]):
        try:
            label = rec["label"]
            forms = rec.get("surface_forms", [])
            if not isinstance(label, str) or not isinstance(forms, list):
                raise TypeError("bad field types")
        except (KeyError, TypeError, AttributeError) as exc:
            raise GraphParseError(f"nodes[{i}]: malformed node record {rec!r} ({exc})") from None
        if label in graph.nodes:
            raise GraphParseError(f"nodes[{i}]: duplicate node label {label!r}")
        graph.add_node(label, forms)
    for i, rec in enumerate(data["edges"]):
        try:
            a, b, cid = rec["a"], rec["b"], rec["claim_id"]
            score = rec.get("score")
            claim = Claim(cid, rec["text"], rec["chunk_id"], None if score is None else float(score))
            triple = Triple(cid, a, rec.get("predicate", ""), b)
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise GraphParseError(f"edges[{i}]: malformed edge record {rec!r} ({exc})") from None
        if cid in graph:
            raise GraphParseError(f"edges[{i}]: duplicate edge id {cid!r}")
        if a not in graph.nodes or b not in graph.nodes:
            raise GraphParseError(f"edges[{i}]: endpoint of {cid!r} is not a declared node")
        graph.add_claim_edge(triple, claim)
    return graph


def save_graph(graph: ClaimGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(graph), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_graph(path: str | Path) -> ClaimGraph:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphParseError(f"{path}: invalid JSON ({exc})") from None
    return graph_from_dict(data)
