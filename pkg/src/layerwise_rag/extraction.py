"""Claim and triple extraction from retrieved chunks.

Four strategies are supported:

``single_stage``
    one prompt extracts atomic, decontextualized claims; one triple per claim.
``two_stage``
    atomic extraction, then a separate decontextualization prompt over the
    chunk's claims; one triple per claim.
``direct_triples``
    triples straight from the chunk; claim text is ``"subj pred obj"``.
``pairs_relations``
    entities first, then a relation prompt connecting entity pairs.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from ._text import normalize_ws, ordered_map, parse_list
from .core import Claim, DocumentChunk, Triple
from .gateway import GatewayError, GenerationRequest, ModelGateway

log = logging.getLogger(__name__)

_LIST_HINT = '\n\nFormat: one item per line, each line starting with "- ", or "(no claims)".'
_TRIPLE_HINT = "\n\nFormat: exactly one line: subject | predicate | object"
_PAREN_TRIPLE = re.compile(r"\(\s*([^,()]+?)\s*,\s*([^,()]+?)\s*,\s*([^()]+?)\s*\)")


class ExtractionStrategy(str, Enum):
    SINGLE_STAGE = "single_stage"
    TWO_STAGE = "two_stage"
    DIRECT_TRIPLES = "direct_triples"
    PAIRS_RELATIONS = "pairs_relations"


class ExtractionError(Exception):
    pass


class TripleError(ExtractionError):
    pass


@dataclass
class Extraction:
    claims: list[Claim] = field(default_factory=list)
    triples: list[Triple] = field(default_factory=list)
    failed_chunks: list[str] = field(default_factory=list)
    failed_claims: list[str] = field(default_factory=list)

    def extend(self, other: "Extraction"):
        self.claims += other.claims
        self.triples += other.triples
        self.failed_chunks += other.failed_chunks
        self.failed_claims += other.failed_claims


def normalize_entity(text: str) -> str:
    return normalize_ws(text).lower()


def parse_triple(output: str) -> tuple[str, str, str] | None:
    """First ``subject | predicate | object`` (or ``(s, p, o)``) found in the output."""
    for raw in output.splitlines():
        line = raw.strip().lstrip("-*• ").strip()
        parts = [p.strip() for p in line.split("|")]
        if len(parts) == 3 and all(parts):
            return parts[0], parts[1], parts[2]
        m = _PAREN_TRIPLE.search(line)
        if m:
            return m.group(1), m.group(2), m.group(3)
    return None


def _make_triple(claim_id: str, parts: tuple[str, str, str]) -> Triple | None:
    subj, pred, obj = (normalize_entity(p) for p in parts)
    if not subj or not obj:
        return None
    return Triple(claim_id, subj, pred, obj)


def _generate_list(gateway: ModelGateway, prompt: str, task: str, variables: dict) -> list[str]:
    out = gateway.generate(GenerationRequest(prompt, task=task, variables=variables))
    items = parse_list(out)
    if items is None:
        out = gateway.generate(GenerationRequest(prompt + _LIST_HINT, task=task, variables=variables))
        items = parse_list(out)
        if items is None:
            raise ExtractionError(f"unparseable {task} output: {out[:200]!r}")
    return items


def _claim_id(chunk: DocumentChunk, j: int) -> str:
    return f"{chunk.chunk_id}/c{j}"


def extract_claims(chunk: DocumentChunk, strategy: ExtractionStrategy | str, gateway: ModelGateway) -> list[Claim]:
    """Claims for one chunk. Raises :class:`ExtractionError` on unparseable output."""
    strategy = ExtractionStrategy(strategy)
    if strategy in (ExtractionStrategy.DIRECT_TRIPLES, ExtractionStrategy.PAIRS_RELATIONS):
        return _entity_first(chunk, strategy, gateway).claims
    t = gateway.templates
    if strategy is ExtractionStrategy.SINGLE_STAGE:
        texts = _generate_list(gateway, t.render("claims", chunk=chunk.text), "claims", {"chunk": chunk.text})
    else:
        raw = _generate_list(gateway, t.render("atomic", chunk=chunk.text), "atomic", {"chunk": chunk.text})
        texts = _decontextualize(chunk, raw, gateway) if raw else []
    return [Claim(_claim_id(chunk, j), normalize_ws(txt), chunk.chunk_id) for j, txt in enumerate(texts)]


def _decontextualize(chunk: DocumentChunk, claims: list[str], gateway: ModelGateway) -> list[str]:
    prompt = gateway.templates.render("decontext", chunk=chunk.text, claims="\n".join(f"- {c}" for c in claims))
    variables = {"chunk": chunk.text, "claim_list": list(claims)}
    for p in (prompt, prompt + _LIST_HINT):
        out = parse_list(gateway.generate(GenerationRequest(p, task="decontext", variables=variables)))
        if out is not None and len(out) == len(claims):
            return out
    raise ExtractionError(f"decontextualization of {chunk.chunk_id} did not return {len(claims)} claims")


def extract_triple(claim: Claim, gateway: ModelGateway) -> Triple:
    """One triple per claim; the first well-formed line wins."""
    prompt = gateway.templates.render("triple", claim=claim.text)
    variables = {"claim": claim.text}
    out = ""
    for p in (prompt, prompt + _TRIPLE_HINT):
        out = gateway.generate(GenerationRequest(p, max_tokens=128, task="triple", variables=variables))
        parts = parse_triple(out)
        if parts is not None:
            triple = _make_triple(claim.claim_id, parts)
            if triple is not None:
                return triple
    raise TripleError(f"no triple for claim {claim.claim_id}: {out[:200]!r}")


def _entity_first(chunk: DocumentChunk, strategy: ExtractionStrategy, gateway: ModelGateway) -> Extraction:
    t = gateway.templates
    if strategy is ExtractionStrategy.DIRECT_TRIPLES:
        lines = _generate_list(gateway, t.render("direct_triples", chunk=chunk.text), "direct_triples",
                               {"chunk": chunk.text})
    else:
        entities = _generate_list(gateway, t.render("entities", chunk=chunk.text), "entities", {"chunk": chunk.text})
        if not entities:
            return Extraction()
        lines = _generate_list(
            gateway, t.render("pairs", chunk=chunk.text, entities="\n".join(f"- {e}" for e in entities)),
            "pairs", {"chunk": chunk.text, "entity_list": list(entities)})
    res = Extraction()
    for line in lines:
        parts = parse_triple(line)
        if parts is None:
            log.warning("skipping malformed triple line from %s: %r", chunk.chunk_id, line)
            continue
        cid = _claim_id(chunk, len(res.claims))
        triple = _make_triple(cid, parts)
        if triple is None:
            continue
        text = normalize_ws(" ".join(parts))
        res.claims.append(Claim(cid, text, chunk.chunk_id))
        res.triples.append(triple)
    return res


def extract_chunk(chunk: DocumentChunk, strategy: ExtractionStrategy | str, gateway: ModelGateway) -> Extraction:
    """Claims and triples for one chunk; failures are recorded, not raised."""
    strategy = ExtractionStrategy(strategy)
    try:
        if strategy in (ExtractionStrategy.DIRECT_TRIPLES, ExtractionStrategy.PAIRS_RELATIONS):
            return _entity_first(chunk, strategy, gateway)
        claims = extract_claims(chunk, strategy, gateway)
    except (ExtractionError, GatewayError) as exc:
        log.warning("skipping chunk %s: %s", chunk.chunk_id, exc)
        return Extraction(failed_chunks=[chunk.chunk_id])
    res = Extraction(claims=claims)
    for claim in claims:
        try:
            res.triples.append(extract_triple(claim, gateway))
        except (TripleError, GatewayError) as exc:
            log.warning("claim %s kept without an edge: %s", claim.claim_id, exc)
            res.failed_claims.append(claim.claim_id)
    return res


def extract_all(chunks: Sequence[DocumentChunk], strategy: ExtractionStrategy | str, gateway: ModelGateway,
                max_workers: int = 1) -> Extraction:
    """Extraction over many chunks, ordered by (chunk order, claim order)."""
    out = Extraction()
    for part in ordered_map(lambda c: extract_chunk(c, strategy, gateway), chunks, max_workers):
        out.extend(part)
    return out
