"""Entity deduplication, scored graph construction and denoising."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._text import ordered_map
from .core import Claim, ClaimGraph, Triple
from .gateway import GatewayError, ModelGateway
from .validation import check_fraction, check_matrix

log = logging.getLogger(__name__)

# Absorbs rounding in cosine computations so that a pair constructed to sit
# exactly on the threshold is merged.
THRESHOLD_EPS = 1e-12


class GraphBuildError(Exception):
    pass


def cosine_similarity_matrix(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    U = X / norms
    return U @ U.T


class UPGMAClustering(ClusterMixin, BaseEstimator):
    """Average-linkage agglomerative clustering on cosine similarity.

    Cluster similarity is the mean cosine similarity over all cross-cluster
    member pairs. The most similar pair of clusters is merged while that mean
    is at least ``threshold``. Ties go to the pair whose lowest member indices
    are lexicographically smallest, so callers control tie-breaking through
    row order.

    Parameters
    ----------
    threshold : float in [0, 1]
        Minimum mean similarity for a merge (inclusive).
    metric : {"cosine", "precomputed"}
        With ``"precomputed"``, ``X`` is a square similarity matrix.

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
        Cluster index per row, numbered in order of first appearance.
    n_clusters_ : int
    merges_ : list of (int, int, float)
        Merged cluster slots (lowest member index of each) and their mean similarity.
    """

    def __init__(self, threshold: float = 0.8, metric: str = "cosine"):
        self.threshold = threshold
        self.metric = metric

    def fit(self, X, y=None):
        check_fraction(self.threshold, "threshold")
        if self.metric == "precomputed":
            S = check_matrix(X, "X")
            if S.shape[0] != S.shape[1]:
                raise ValueError("precomputed similarity matrix must be square")
        elif self.metric == "cosine":
            S = cosine_similarity_matrix(check_matrix(X, "X"))
        else:
            raise ValueError(f"unknown metric {self.metric!r}")
        n = S.shape[0]
        M = np.array(S, dtype=float)
        np.fill_diagonal(M, -np.inf)
        sizes = np.ones(n)
        slot = np.arange(n)  # slot of each sample; a slot is named by its lowest member
        merges = []
        for _ in range(n - 1):
            flat = int(np.argmax(M))
            i, j = divmod(flat, n)
            best = M[i, j]
            if not np.isfinite(best) or best < self.threshold - THRESHOLD_EPS:
                break
            if i > j:
                i, j = j, i
            merges.append((i, j, float(best)))
            merged = (sizes[i] * M[i] + sizes[j] * M[j]) / (sizes[i] + sizes[j])
            M[i, :] = merged
            M[:, i] = merged
            M[i, i] = -np.inf
            M[j, :] = -np.inf
            M[:, j] = -np.inf
            sizes[i] += sizes[j]
            slot[slot == j] = i
        relabel: dict[int, int] = {}
        self.labels_ = np.array([relabel.setdefault(int(s), len(relabel)) for s in slot])
        self.n_clusters_ = len(relabel)
        self.merges_ = merges
        return self


@dataclass
class CanonicalizationMap:
    mapping: dict[str, str]
    threshold: float

    def __getitem__(self, form: str) -> str:
        return self.mapping[form]

    def get(self, form: str, default: str | None = None) -> str | None:
        return self.mapping.get(form, default)

    def apply(self, form: str) -> str:
        # unseen forms are their own canonical label
        return self.mapping.get(form, form)

    def clusters(self) -> dict[str, set[str]]:
        out: dict[str, set[str]] = {}
        for form, label in self.mapping.items():
            out.setdefault(label, set()).add(form)
        return out

    @property
    def n_clusters(self) -> int:
        return len(set(self.mapping.values()))


def _embed_forms(forms: list[str], gateway: ModelGateway) -> dict[str, np.ndarray]:
    try:
        return dict(zip(forms, gateway.embed(forms)))
    except GatewayError as exc:
        log.warning("batch entity embedding failed (%s); retrying one by one", exc)
    out = {}
    for form in forms:
        try:
            out[form] = gateway.embed([form])[0]
        except GatewayError as exc:
            log.warning("could not embed entity %r, leaving it as a singleton: %s", form, exc)
    return out


def dedup_entities(surface_forms: Iterable[str], gateway: ModelGateway, threshold: float = 0.8) -> CanonicalizationMap:
    """Cluster entity surface forms by embedding similarity (UPGMA).

    Every cluster is labelled with its lexicographically smallest member.
    """
    forms = sorted(set(surface_forms))
    if not forms:
        raise ValueError("no surface forms to deduplicate")
    check_fraction(threshold, "threshold")
    vectors = _embed_forms(forms, gateway)
    embedded = [f for f in forms if f in vectors]
    mapping = {f: f for f in forms}
    if embedded:
        model = UPGMAClustering(threshold).fit(np.vstack([vectors[f] for f in embedded]))
        groups: dict[int, list[str]] = {}
        for form, label in zip(embedded, model.labels_):
            groups.setdefault(int(label), []).append(form)
        for members in groups.values():
            canonical = min(members)
            for m in members:
                mapping[m] = canonical
    return CanonicalizationMap(mapping, threshold)


class EntityCanonicalizer(TransformerMixin, BaseEstimator):
    """Transformer mapping entity strings to canonical cluster labels.

    ``fit`` learns the clustering over the observed surface forms; ``transform``
    maps a sequence of forms to labels (unseen forms map to themselves).
    """

    def __init__(self, gateway: ModelGateway | None = None, threshold: float = 0.8):
        self.gateway = gateway
        self.threshold = threshold

    def fit(self, X: Sequence[str], y=None):
        if self.gateway is None:
            raise ValueError("EntityCanonicalizer needs a gateway")
        self.map_ = dedup_entities(X, self.gateway, self.threshold)
        return self

    def transform(self, X: Sequence[str]) -> list[str]:
        check_is_fitted(self, "map_")
        return [self.map_.apply(x) for x in X]


def triple_forms(triples: Iterable[Triple]) -> set[str]:
    return {f for t in triples for f in (t.subject, t.object)}


def build_graph(triples: Sequence[Triple], claims: Sequence[Claim], question: str, gateway: ModelGateway,
                canonical_map: CanonicalizationMap | Mapping[str, str] | None = None,
                allow_self_loops: bool = True) -> ClaimGraph:
    """One edge per (triple, claim), every claim scored by the reranker against the question."""
    by_id = {c.claim_id: c for c in claims}
    missing = [t.claim_id for t in triples if t.claim_id not in by_id]
    if missing:
        raise GraphBuildError(f"triples reference unknown claims: {missing[:5]}")
    canon = canonical_map.apply if isinstance(canonical_map, CanonicalizationMap) else (
        (lambda f: canonical_map.get(f, f)) if canonical_map is not None else (lambda f: f))
    graph = ClaimGraph(allow_self_loops)
    if not triples:
        return graph.freeze()
    texts = [by_id[t.claim_id].text for t in triples]
    try:
        scores = gateway.rerank(question, texts)
    except GatewayError as exc:
        raise GraphBuildError(f"reranking claims failed: {exc}") from exc
    for t, s in zip(triples, scores):
        src = by_id[t.claim_id]
        claim = Claim(src.claim_id, src.text, src.source_chunk_id, s.score)
        a, b = canon(t.subject), canon(t.object)
        graph.add_node(a, {t.subject})
        graph.add_node(b, {t.object})
        graph.add_claim_edge(Triple(t.claim_id, a, t.predicate, b), claim)
    return graph.freeze()


@dataclass(frozen=True)
class DenoiseVerdict:
    claim_id: str
    keep: bool
    rationale: str

    def to_json(self) -> str:
        return json.dumps({"claim_id": self.claim_id, "keep": self.keep, "rationale": self.rationale},
                          ensure_ascii=False)


def _judge_edge(graph: ClaimGraph, claim_id: str, question: str, gateway: ModelGateway) -> DenoiseVerdict:
    claim = graph.claim(claim_id)
    neighbors = sorted(graph.claim_neighbors_1hop(claim_id))
    neighbor_texts = [graph.claim(c).text for c in neighbors]
    instruction = gateway.templates.render("denoise", question=question, claim=claim.text)
    context = "\n".join(f"- {t}" for t in neighbor_texts) or "(no connected claims)"
    try:
        verdict = gateway.judge_bool(instruction, context, task="denoise", variables={
            "question": question, "claim": claim.text, "claim_id": claim_id, "neighbor_list": neighbor_texts})
    except GatewayError as exc:
        log.warning("denoise judge failed for %s, keeping it: %s", claim_id, exc)
        return DenoiseVerdict(claim_id, True, f"judge failure, kept: {exc}")
    return DenoiseVerdict(claim_id, verdict.value, verdict.rationale)


def denoise(graph: ClaimGraph, question: str, gateway: ModelGateway,
            max_workers: int = 1) -> tuple[ClaimGraph, list[DenoiseVerdict]]:
    """Judge every edge against its 1-hop neighbourhood in the input graph and
    drop the ones judged noise in a single batch."""
    ids = graph.claim_ids()
    verdicts = ordered_map(lambda cid: _judge_edge(graph, cid, question, gateway), ids, max_workers)
    for v in verdicts:
        log.info("denoise %s keep=%s: %s", v.claim_id, v.keep, v.rationale)
    dropped = {v.claim_id for v in verdicts if not v.keep}
    return graph.without_claims(dropped).freeze(), verdicts


def write_denoise_log(verdicts: Iterable[DenoiseVerdict], path: str | Path) -> None:
    Path(path).write_text("".join(v.to_json() + "\n" for v in verdicts), encoding="utf-8")
