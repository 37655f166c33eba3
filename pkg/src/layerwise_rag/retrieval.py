"""Corpus ingestion, chunking, exact cosine search and query construction."""
from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._text import ordered_map
from .core import DocumentChunk
from .gateway import GatewayError, GenerationRequest, ModelGateway
from .validation import check_matrix, check_positive_int

log = logging.getLogger(__name__)


class IngestError(ValueError):
    pass


@dataclass
class Corpus:
    corpus_id: str
    chunks: list[DocumentChunk]
    embeddings: np.ndarray  # (n_chunks, dim), float32

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if len(self.chunks) != self.embeddings.shape[0]:
            raise ValueError(f"{len(self.chunks)} chunks but {len(self.embeddings)} embeddings")
        ids = [c.chunk_id for c in self.chunks]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate chunk ids in corpus {self.corpus_id!r}")


@dataclass(frozen=True)
class RetrievalQuery:
    rewritten_question: str
    answer_options: tuple[str, ...] = ()
    hyde_candidate: str = ""
    fused_text: str = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "answer_options", tuple(self.answer_options))
        object.__setattr__(self, "fused_text", fuse_query(self.rewritten_question, self.answer_options,
                                                          self.hyde_candidate))


def fuse_query(question: str, options: Sequence[str], candidate: str) -> str:
    text = question
    if options:
        text += "\nOptions: " + "; ".join(options)
    if candidate:
        text += "\nCandidate: " + candidate
    return text


# -- chunking & ingest --------------------------------------------------------

def chunk_windows(n_tokens: int, size: int, overlap: int) -> list[tuple[int, int]]:
    """Half-open token windows ``[start, end)`` of at most ``size`` tokens,
    consecutive windows sharing ``overlap`` tokens."""
    check_positive_int(size, "chunk_size_tokens")
    if overlap < 0 or overlap >= size:
        raise ValueError(f"overlap must be in [0, {size}), got {overlap}")
    if n_tokens == 0:
        return []
    step = size - overlap
    out = []
    start = 0
    while True:
        end = min(start + size, n_tokens)
        out.append((start, end))
        if end >= n_tokens:
            return out
        start += step


def read_documents(path: str | Path) -> list[dict]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or not isinstance(rec.get("doc_id"), str):
                raise IngestError(f"{path}:{lineno}: record needs a string 'doc_id'")
            text = rec.get("text")
            if not isinstance(text, str) or not text.strip():
                raise IngestError(f"{path}:{lineno}: document {rec['doc_id']!r} has empty 'text'")
            docs.append(rec)
    return docs


def chunk_documents(docs: Sequence[dict], corpus_id: str, chunk_size_tokens: int,
                    overlap_tokens: int) -> list[DocumentChunk]:
    chunks = []
    for doc in docs:
        toks = doc["text"].split()
        for i, (s, e) in enumerate(chunk_windows(len(toks), chunk_size_tokens, overlap_tokens)):
            chunks.append(DocumentChunk(f"{doc['doc_id']}#{i}", corpus_id, " ".join(toks[s:e]), doc["doc_id"]))
    return chunks


def ingest_corpus(path: str | Path, gateway: ModelGateway, chunk_size_tokens: int = 128,
                  overlap_tokens: int = 16, corpus_id: str | None = None, batch_size: int = 32,
                  max_workers: int = 1) -> Corpus:
    path = Path(path)
    corpus_id = corpus_id or path.stem
    chunks = chunk_documents(read_documents(path), corpus_id, chunk_size_tokens, overlap_tokens)
    if not chunks:
        raise IngestError(f"{path}: no documents")
    batches = [chunks[i:i + batch_size] for i in range(0, len(chunks), batch_size)]
    vectors = ordered_map(lambda b: gateway.embed([c.text for c in b]), batches, max_workers)
    emb = np.vstack([np.vstack(v) for v in vectors])
    return Corpus(corpus_id, chunks, emb)


def save_index(corpus: Corpus, path: str | Path) -> None:
    recs = []
    for chunk, vec in zip(corpus.chunks, corpus.embeddings):
        recs.append({
            "chunk_id": chunk.chunk_id,
            "source_doc_id": chunk.source_doc_id,
            "text": chunk.text,
            "embedding": base64.b64encode(np.asarray(vec, dtype="<f4").tobytes()).decode("ascii"),
        })
    doc = {"corpus_id": corpus.corpus_id, "dimension": int(corpus.embeddings.shape[1]), "chunks": recs}
    Path(path).write_text(json.dumps(doc, ensure_ascii=False) + "\n", encoding="utf-8")


def load_index(path: str | Path) -> Corpus:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        dim = int(doc["dimension"])
        chunks, vecs = [], []
        for rec in doc["chunks"]:
            chunks.append(DocumentChunk(rec["chunk_id"], doc["corpus_id"], rec["text"], rec["source_doc_id"]))
            vec = np.frombuffer(base64.b64decode(rec["embedding"]), dtype="<f4")
            if vec.shape != (dim,):
                raise ValueError(f"chunk {rec['chunk_id']!r} has {vec.size} dims, expected {dim}")
            vecs.append(vec)
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise IngestError(f"{path}: unreadable index ({exc})") from None
    return Corpus(doc["corpus_id"], chunks, np.vstack(vecs) if vecs else np.zeros((0, dim)))


# -- exact search --------------------------------------------------------------

class CosineIndex(BaseEstimator):
    """Brute-force cosine nearest neighbours with deterministic tie-breaking.

    ``fit(X, ids)`` stores row-normalized vectors; ``search`` ranks by cosine
    similarity descending, ties broken by ascending id.
    """

    def fit(self, X, ids=None):
        X = check_matrix(X, "X")
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        self.vectors_ = X / norms
        self.ids_ = np.asarray(list(ids) if ids is not None else [f"{i:09d}" for i in range(len(X))], dtype=object)
        if len(self.ids_) != len(X):
            raise ValueError("ids must align with rows of X")
        return self

    def similarities(self, q) -> np.ndarray:
        check_is_fitted(self, "vectors_")
        q = np.asarray(q, dtype=float).ravel()
        n = np.linalg.norm(q)
        return self.vectors_ @ (q / n if n else q)

    def search(self, q, k: int) -> tuple[np.ndarray, np.ndarray]:
        check_positive_int(k, "k")
        sims = self.similarities(q)
        order = np.lexsort((self.ids_.astype(str), -sims))[:k]
        return order, sims[order]


def build_query(question: str, options: Sequence[str], gateway: ModelGateway, rewrite: bool = True,
                hyde: bool = True) -> RetrievalQuery:
    rewritten = rewrite_question(question, gateway) if rewrite else question
    candidate = hyde_candidate(question, options, gateway) if hyde else ""
    return RetrievalQuery(rewritten, tuple(options), candidate)


def rewrite_question(question: str, gateway: ModelGateway) -> str:
    if not question.strip():
        raise ValueError("question is empty")
    prompt = gateway.templates.render("rewrite", question=question)
    try:
        out = gateway.generate(GenerationRequest(prompt, max_tokens=256, task="rewrite",
                                                 variables={"question": question})).strip()
    except GatewayError as exc:
        log.warning("question rewrite failed, using original question: %s", exc)
        return question
    return out or question


def hyde_candidate(question: str, options: Sequence[str], gateway: ModelGateway) -> str:
    if not question.strip():
        raise ValueError("question is empty")
    prompt = gateway.templates.render("hyde", question=question, options="\n".join(options))
    try:
        return gateway.generate(GenerationRequest(
            prompt, max_tokens=256, task="hyde",
            variables={"question": question, "option_texts": list(options)})).strip()
    except GatewayError as exc:
        log.warning("HyDE candidate generation failed, query will omit it: %s", exc)
        return ""


def retrieve_scored(corpora: Sequence[Corpus], query: RetrievalQuery | str, k: int,
                    gateway: ModelGateway) -> list[tuple[DocumentChunk, float]]:
    """Top-k chunks pooled across all corpora by exact cosine similarity."""
    check_positive_int(k, "k")
    chunks = [c for corpus in corpora for c in corpus.chunks]
    if not chunks:
        return []
    ids = [c.chunk_id for c in chunks]
    if len(set(ids)) != len(ids):
        raise ValueError("chunk ids collide across corpora")
    text = query.fused_text if isinstance(query, RetrievalQuery) else query
    qvec = gateway.embed([text])[0]
    index = CosineIndex().fit(np.vstack([corpus.embeddings for corpus in corpora if len(corpus.chunks)]), ids)
    order, sims = index.search(qvec, k)
    return [(chunks[i], float(s)) for i, s in zip(order, sims)]


def retrieve(corpora: Sequence[Corpus], query: RetrievalQuery | str, k: int,
             gateway: ModelGateway) -> list[DocumentChunk]:
    return [c for c, _ in retrieve_scored(corpora, query, k, gateway)]
