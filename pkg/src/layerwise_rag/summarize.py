"""Claims of interest, hop layering and outside-in layerwise summarization."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._text import ordered_map, token_count
from .core import ClaimGraph, ClaimNotFoundError, Summary
from .gateway import GatewayError, GenerationRequest, ModelGateway, cosine
from .validation import check_positive_int

log = logging.getLogger(__name__)

SUMMARIZER_STRATEGIES = ("layerwise", "subgraph", "semantic")


@dataclass
class ClaimOfInterest:
    claim_id: str
    initial_rank: int
    test_summary: str = ""
    test_score: float = 0.0
    final_rank: int = 0
    absorbed_claim_ids: set[str] = field(default_factory=set)


@dataclass
class LayerAssignment:
    focus: str
    layers: dict[str, int]

    @property
    def max_layer(self) -> int:
        return max(self.layers.values())

    def by_layer(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.max_layer + 1)]
        for cid in sorted(self.layers):
            out[self.layers[cid]].append(cid)
        return out

    def __getitem__(self, claim_id: str) -> int:
        return self.layers[claim_id]


def ranked_claim_ids(graph: ClaimGraph, ids=None) -> list[str]:
    """Claim ids by descending relevance score, ties by claim id."""
    ids = graph.claim_ids() if ids is None else ids
    return sorted(ids, key=lambda c: (-(graph.claim(c).relevance_score or 0.0), c))


def assign_layers(graph: ClaimGraph, focus: str) -> LayerAssignment:
    """Hop distance of every claim in the focus's component.

    Claims are adjacent when their edges share a node. Node distances are
    measured from the focus edge's endpoints; a claim other than the focus on
    edge ``(u, v)`` sits ``1 + min(d(u), d(v))`` hops out, which is its
    shortest-path distance to the focus in the claim adjacency graph.
    """
    if focus not in graph:
        raise ClaimNotFoundError(focus)
    e = graph.edge(focus)
    dist = graph.node_distances({e.a, e.b})
    layers = {}
    for cid in graph.connected_component_claims(focus):
        edge = graph.edge(cid)
        layers[cid] = 1 + min(dist[edge.a], dist[edge.b])
    layers[focus] = 0
    return LayerAssignment(focus, layers)


def _summarize_call(gateway: ModelGateway, question: str, claim_id: str, claim_text: str,
                    input_ids: Sequence[str], inputs: Sequence[str]) -> str:
    prompt = gateway.templates.render(
        "summarize", question=question, claim=claim_text,
        inputs="\n".join(f"- {s}" for s in inputs) or "(none)")
    return gateway.generate(GenerationRequest(prompt, task="summarize", variables={
        "question": question, "claim_id": claim_id, "claim": claim_text,
        "input_ids": list(input_ids), "input_list": list(inputs)})).strip()


def _summary(graph: ClaimGraph, text: str, focus: str, contributors: set[str], rank: int = 1) -> Summary:
    chunks = {graph.claim(c).source_chunk_id for c in contributors}
    return Summary(text, focus, set(contributors), chunks, rank)


def layerwise_summarize(graph: ClaimGraph, focus: str, question: str, gateway: ModelGateway,
                        rank: int = 1, max_workers: int = 1,
                        layers: LayerAssignment | None = None) -> tuple[Summary, list[dict]]:
    """Summarize the focus's component from the outermost layer inwards.

    A claim in the outermost layer is its own summary. Every other claim is
    summarized once from its own text plus the summaries of adjacent claims
    one layer further out (ordered by claim id). Returns the focus summary
    and a per-claim trace.
    """
    layers = layers or assign_layers(graph, focus)
    schedule = layers.by_layer()
    outer = len(schedule) - 1
    summaries: dict[str, str] = {}
    contributors: dict[str, set[str]] = {}
    trace: list[dict] = []

    def run(cid: str, depth: int) -> tuple[str, set[str], dict]:
        text = graph.claim(cid).text
        if depth == outer:
            return text, {cid}, {"claim_id": cid, "layer": depth, "inputs": [], "generated": False, "text": text}
        input_ids = sorted(n for n in graph.claim_neighbors_1hop(cid) if layers.layers.get(n) == depth + 1)
        inputs = [summaries[n] for n in input_ids]
        contrib = {cid}.union(*(contributors[n] for n in input_ids))
        try:
            out = _summarize_call(gateway, question, cid, text, input_ids, inputs)
            generated = True
        except GatewayError as exc:
            log.warning("summary generation failed for %s, concatenating inputs: %s", cid, exc)
            out, generated = " ".join([text, *inputs]), False
        return out, contrib, {"claim_id": cid, "layer": depth, "inputs": input_ids, "generated": generated,
                              "text": out}

    for depth in range(outer, -1, -1):
        ids = schedule[depth]
        # layer barrier: every claim at depth+1 is finished before this map starts
        for cid, (text, contrib, rec) in zip(ids, ordered_map(lambda c: run(c, depth), ids, max_workers)):
            summaries[cid] = text
            contributors[cid] = contrib
            trace.append(rec)
    return _summary(graph, summaries[focus], focus, contributors[focus], rank), trace


def select_claims_of_interest(graph: ClaimGraph, question: str, gateway: ModelGateway,
                              top_candidates: int = 10, neighbor_cap: int = 12,
                              max_workers: int = 1) -> list[ClaimOfInterest]:
    """Top-ranked claims, re-ranked by test summaries, with neighbours absorbed.

    1. the ``top_candidates`` best-scored claims;
    2. a test summary for each from itself plus its ``neighbor_cap`` best-scored
       1-hop neighbours;
    3. candidates reordered by the reranker score of their test summary;
    4. sweeping in that order, a candidate adjacent to an already retained
       claim is absorbed into the first such claim instead of being retained.
    """
    check_positive_int(top_candidates, "top_candidates")
    if len(graph) == 0:
        return []
    top = ranked_claim_ids(graph)[:top_candidates]
    cands = [ClaimOfInterest(cid, i + 1) for i, cid in enumerate(top)]

    def test_summary(c: ClaimOfInterest) -> str:
        nbrs = ranked_claim_ids(graph, graph.claim_neighbors_1hop(c.claim_id))[:neighbor_cap]
        text = graph.claim(c.claim_id).text
        try:
            return _summarize_call(gateway, question, c.claim_id, text, nbrs, [graph.claim(n).text for n in nbrs])
        except GatewayError as exc:
            log.warning("test summary failed for %s, using claim text: %s", c.claim_id, exc)
            return text

    for c, s in zip(cands, ordered_map(test_summary, cands, max_workers)):
        c.test_summary = s
    for c, r in zip(cands, gateway.rerank(question, [c.test_summary for c in cands])):
        c.test_score = r.score
    cands.sort(key=lambda c: (-c.test_score, c.claim_id))

    retained: list[ClaimOfInterest] = []
    for c in cands:
        nbrs = graph.claim_neighbors_1hop(c.claim_id)
        host = next((r for r in retained if r.claim_id in nbrs), None)
        if host is None:
            retained.append(c)
        else:
            host.absorbed_claim_ids.add(c.claim_id)
    for i, c in enumerate(retained, 1):
        c.final_rank = i
    return retained


def subgraph_community_summary(graph: ClaimGraph, focus: str, question: str, gateway: ModelGateway,
                               rank: int = 1) -> Summary:
    """Summary of the focus claim and every claim on an edge touching its entities."""
    nbrs = ranked_claim_ids(graph, graph.claim_neighbors_1hop(focus))
    text = _summarize_call(gateway, question, focus, graph.claim(focus).text, nbrs,
                           [graph.claim(n).text for n in nbrs])
    return _summary(graph, text, focus, {focus, *nbrs}, rank)


def semantic_community_summary(graph: ClaimGraph, focus: str, question: str, gateway: ModelGateway,
                               rank: int = 1, threshold: float = 0.8,
                               vectors: dict[str, np.ndarray] | None = None) -> Summary:
    """Summary of the focus claim and every claim whose embedding is within ``threshold`` cosine of it."""
    if vectors is None:
        ids = graph.claim_ids()
        vectors = dict(zip(ids, gateway.embed([graph.claim(c).text for c in ids])))
    fv = vectors[focus]
    members = ranked_claim_ids(graph, [c for c in graph.claim_ids()
                                       if c != focus and cosine(fv, vectors[c]) >= threshold])
    text = _summarize_call(gateway, question, focus, graph.claim(focus).text, members,
                           [graph.claim(n).text for n in members])
    return _summary(graph, text, focus, {focus, *members}, rank)


@dataclass
class SummarizationResult:
    summaries: list[Summary]
    claims_of_interest: list[ClaimOfInterest]
    trace: dict


class GraphSummarizer(BaseEstimator):
    """Turn a claim graph into ranked summaries for one question.

    ``fit(graph, question)`` selects claims of interest and summarizes around
    each with the configured ``strategy`` (``"layerwise"``, ``"subgraph"`` or
    ``"semantic"``); ``transform()`` returns the assembled context string.
    """

    def __init__(self, gateway: ModelGateway | None = None, strategy: str = "layerwise",
                 top_candidates: int = 10, neighbor_cap: int = 12, limit_tokens: int = 3000,
                 semantic_threshold: float = 0.8, max_workers: int = 1):
        self.gateway = gateway
        self.strategy = strategy
        self.top_candidates = top_candidates
        self.neighbor_cap = neighbor_cap
        self.limit_tokens = limit_tokens
        self.semantic_threshold = semantic_threshold
        self.max_workers = max_workers

    def fit(self, graph: ClaimGraph, question: str):
        if self.strategy not in SUMMARIZER_STRATEGIES:
            raise ValueError(f"unknown summarizer strategy {self.strategy!r}")
        self.result_ = summarize_graph(graph, question, self.gateway, strategy=self.strategy,
                                       top_candidates=self.top_candidates, neighbor_cap=self.neighbor_cap,
                                       semantic_threshold=self.semantic_threshold,
                                       max_workers=self.max_workers)
        self.summaries_ = self.result_.summaries
        return self

    def transform(self, X=None) -> str:
        check_is_fitted(self, "summaries_")
        return assemble_context(self.summaries_, self.limit_tokens)

    def fit_transform(self, graph: ClaimGraph, question: str) -> str:
        return self.fit(graph, question).transform()


def summarize_graph(graph: ClaimGraph, question: str, gateway: ModelGateway, strategy: str = "layerwise",
                    top_candidates: int = 10, neighbor_cap: int = 12, semantic_threshold: float = 0.8,
                    max_workers: int = 1, claims_of_interest: list[ClaimOfInterest] | None = None
                    ) -> SummarizationResult:
    if claims_of_interest is None:
        claims_of_interest = select_claims_of_interest(graph, question, gateway, top_candidates, neighbor_cap,
                                                       max_workers)
    vectors = None
    if strategy == "semantic" and claims_of_interest:
        ids = graph.claim_ids()
        vectors = dict(zip(ids, gateway.embed([graph.claim(c).text for c in ids])))

    def one(coi: ClaimOfInterest):
        if strategy == "layerwise":
            return layerwise_summarize(graph, coi.claim_id, question, gateway, coi.final_rank, max_workers)
        if strategy == "subgraph":
            return subgraph_community_summary(graph, coi.claim_id, question, gateway, coi.final_rank), []
        if strategy == "semantic":
            return semantic_community_summary(graph, coi.claim_id, question, gateway, coi.final_rank,
                                              semantic_threshold, vectors), []
        raise ValueError(f"unknown summarizer strategy {strategy!r}")

    results = ordered_map(one, claims_of_interest, max_workers)
    trace = {
        "strategy": strategy,
        "claims_of_interest": [
            {"claim_id": c.claim_id, "initial_rank": c.initial_rank, "test_summary": c.test_summary,
             "test_score": c.test_score, "final_rank": c.final_rank,
             "absorbed_claim_ids": sorted(c.absorbed_claim_ids)}
            for c in claims_of_interest
        ],
        "summaries": [
            {"focus_claim_id": s.focus_claim_id, "rank": s.rank, "text": s.text,
             "contributing_claim_ids": sorted(s.contributing_claim_ids),
             "contributing_chunk_ids": sorted(s.contributing_chunk_ids), "layers": t}
            for s, t in results
        ],
    }
    return SummarizationResult([s for s, _ in results], claims_of_interest, trace)


def assemble_context(summaries: Sequence[Summary], limit_tokens: int = 3000) -> str:
    """Summaries joined by blank lines from rank 1 upward.

    A summary that would push the total past ``limit_tokens`` whitespace
    tokens is left out whole; later, shorter summaries may still fit.
    """
    used = 0
    parts = []
    for s in sorted(summaries, key=lambda s: s.rank):
        n = token_count(s.text)
        if used + n > limit_tokens:
            log.warning("summary ranked %d (%d tokens) does not fit the %d-token context", s.rank, n, limit_tokens)
            continue
        parts.append(s.text)
        used += n
    return "\n\n".join(parts)
