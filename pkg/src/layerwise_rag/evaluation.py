"""Component metrics and multiple-choice answering."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from ._text import parse_list, sentences
from .core import Claim, DocumentChunk, Summary
from .extraction import ExtractionError, ExtractionStrategy, extract_claims
from .gateway import GatewayError, GenerationRequest, ModelGateway, cosine

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass
class MCQuestion:
    question_id: str
    question: str
    options: dict[str, str]
    gold_label: str | None = None

    def __post_init__(self):
        if len(self.options) < 2:
            raise DatasetError(f"{self.question_id}: needs at least two options")
        if self.gold_label is not None and self.gold_label not in self.options:
            raise DatasetError(f"{self.question_id}: gold label {self.gold_label!r} is not an option")

    @property
    def labels(self) -> list[str]:
        return list(self.options)

    def labeled_options(self) -> list[str]:
        return [f"{k}. {v}" for k, v in self.options.items()]

    @classmethod
    def from_dict(cls, rec: dict) -> "MCQuestion":
        try:
            options = rec["options"]
            if isinstance(options, list):
                options = {chr(ord("A") + i): o for i, o in enumerate(options)}
            return cls(str(rec.get("question_id", "q")), rec["question"], dict(options), rec.get("gold"))
        except (KeyError, TypeError, AttributeError) as exc:
            raise DatasetError(f"malformed question record ({exc})") from None

    def to_dict(self) -> dict:
        return {"question_id": self.question_id, "question": self.question, "options": self.options,
                "gold": self.gold_label}


def load_question(path: str | Path) -> MCQuestion:
    """A single question: one JSON object, or the first line of a JSONL file."""
    text = Path(path).read_text(encoding="utf-8").strip()
    try:
        rec = json.loads(text)
    except json.JSONDecodeError:
        try:
            rec = json.loads(text.splitlines()[0])
        except (json.JSONDecodeError, IndexError) as exc:
            raise DatasetError(f"{path}: invalid question JSON ({exc})") from None
    return MCQuestion.from_dict(rec)


def load_dataset(path: str | Path) -> list[MCQuestion]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(MCQuestion.from_dict(json.loads(line)))
        except (json.JSONDecodeError, DatasetError) as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return out


@dataclass
class MetricReport:
    name: str
    scores: list[float | None] = field(default_factory=list)
    flagged: list[str] = field(default_factory=list)

    @property
    def valid(self) -> list[float]:
        return [s for s in self.scores if s is not None]

    @property
    def aggregate(self) -> float | None:
        v = self.valid
        return sum(v) / len(v) if v else None

    @property
    def count(self) -> int:
        return len(self.valid)

    @property
    def excluded(self) -> int:
        return len(self.scores) - len(self.valid)

    def to_dict(self) -> dict:
        return {"metric": self.name, "aggregate": self.aggregate, "count": self.count,
                "excluded": self.excluded, "flagged": list(self.flagged), "scores": list(self.scores)}


# -- decontextualization ---------------------------------------------------------

class MentionExtractor(Protocol):
    def mentions(self, text: str) -> tuple[int, int]:
        """Return ``(explicit, unresolved)`` entity reference counts."""


_TOKEN = re.compile(r"[A-Za-z0-9][A-Za-z0-9\-'/]*")

PRONOUNS = frozenset({"he", "she", "it", "they"})
DEMONSTRATIVES = frozenset({"this", "that", "these", "those"})
# words after which a demonstrative is standing alone rather than determining a noun
BARE_FOLLOWERS = frozenset("""
is are was were be been being has have had can could may might must shall should will would
does do did also not only then therefore thus however which who that and or but of in on at to
for by with from as than so such because when where while if leads lead causes cause results
""".split())
# capitalized at the start of a sentence without naming anything
SENTENCE_STARTERS = frozenset("""
the a an in on at of for to by with from as and or but if when while although because since
after before during many most some several all each every both either neither no one other
another such there here what which who whom whose why how however therefore thus also
""".split())
DEFAULT_LEXICON = frozenset("""
fever pain inflammation infection disease diseases blood platelet platelets cell cells protein
proteins enzyme enzymes receptor receptors gene genes dna rna virus viruses bacteria bacterium
heart liver kidney kidneys lung lungs brain muscle muscles bone bones skin tumor tumors cancer
insulin glucose hormone hormones antibody antibodies antibiotic antibiotics drug drugs
vaccine vaccines patient patients symptom symptoms prostaglandin prostaglandins artery arteries
vein veins neuron neurons nerve nerves stomach intestine pancreas thyroid diabetes hypertension
asthma anemia inflammation swelling clotting bleeding ulcer ulcers stroke
""".split())


class RuleBasedMentionExtractor:
    """Counts explicit and unresolved entity references with closed-class rules.

    Explicit: maximal runs of capitalized tokens (ignoring function words that
    merely open a sentence) and lexicon terms outside such runs. Unresolved:
    he/she/it/they; this/these/those when not followed by a noun (end of
    sentence or a word from ``BARE_FOLLOWERS``); sentence-initial bare "that";
    "the former"/"the latter".
    """

    def __init__(self, lexicon: Iterable[str] | None = None):
        self.lexicon = frozenset(w.lower() for w in (DEFAULT_LEXICON if lexicon is None else lexicon))

    def mentions(self, text: str) -> tuple[int, int]:
        explicit = unresolved = 0
        for sent in sentences(text) or [text]:
            toks = _TOKEN.findall(sent)
            in_span = False
            for i, tok in enumerate(toks):
                low = tok.lower()
                nxt = toks[i + 1].lower() if i + 1 < len(toks) else None
                bare = nxt is None or nxt in BARE_FOLLOWERS
                if low in PRONOUNS:
                    unresolved += 1
                    in_span = False
                    continue
                if low in DEMONSTRATIVES:
                    if bare and (low != "that" or i == 0):
                        unresolved += 1
                    in_span = False
                    continue
                if low == "the" and nxt in ("former", "latter"):
                    unresolved += 1
                    in_span = False
                    continue
                if low in ("former", "latter") and i > 0 and toks[i - 1].lower() == "the":
                    continue
                capitalized = any(ch.isupper() for ch in tok) and not (i == 0 and low in SENTENCE_STARTERS)
                if capitalized:
                    if not in_span:
                        explicit += 1
                    in_span = True
                    continue
                in_span = False
                if low in self.lexicon:
                    explicit += 1
        return explicit, unresolved


def ref_score(claims: Sequence[Claim], extractor: MentionExtractor | None = None) -> MetricReport:
    """Fraction of explicit entity references per claim; claims without any
    reference are excluded from the mean."""
    if not claims:
        raise ValueError("ref_score needs at least one claim")
    extractor = extractor or RuleBasedMentionExtractor()
    report = MetricReport("ref_score")
    for c in claims:
        explicit, unresolved = extractor.mentions(c.text)
        if explicit + unresolved == 0:
            report.scores.append(None)
            report.flagged.append(c.claim_id)
        else:
            report.scores.append(explicit / (explicit + unresolved))
    return report


def semantic_preservation(chunk: DocumentChunk, claims: Sequence[Claim], gateway: ModelGateway) -> float:
    """Cosine similarity between the chunk and its concatenated claims."""
    if not claims:
        log.warning("no claims for chunk %s; semantic preservation is 0", chunk.chunk_id)
        return 0.0
    u, v = gateway.embed([chunk.text, " ".join(c.text for c in claims)])
    return cosine(u, v)


def semantic_preservation_report(chunks: Sequence[DocumentChunk], claims: Sequence[Claim],
                                 gateway: ModelGateway) -> MetricReport:
    report = MetricReport("semantic_preservation")
    for chunk in chunks:
        own = [c for c in claims if c.source_chunk_id == chunk.chunk_id]
        if not own:
            report.flagged.append(chunk.chunk_id)
        report.scores.append(semantic_preservation(chunk, own, gateway))
    return report


def _judge_fraction(name: str, items: Sequence[tuple[str, str, str]], gateway: ModelGateway, task: str,
                    report: MetricReport | None = None) -> MetricReport:
    """Judge (item_id, instruction, context) triples; failures score 0 and are flagged."""
    report = report or MetricReport(name)
    for item_id, instruction, context in items:
        try:
            report.scores.append(1.0 if gateway.judge_bool(instruction, context, task=task).value else 0.0)
        except GatewayError as exc:
            log.warning("%s judge failed for %s: %s", name, item_id, exc)
            report.scores.append(0.0)
            report.flagged.append(item_id)
    return report


def _list_from(gateway: ModelGateway, template: str, task: str, chunk: DocumentChunk) -> list[str] | None:
    prompt = gateway.templates.render(template, chunk=chunk.text)
    req = GenerationRequest(prompt, task=task, variables={"chunk": chunk.text})
    out = parse_list(gateway.generate(req))
    if out is None:
        retry = GenerationRequest(prompt + '\n\nFormat: one item per line starting with "- ".', task=task,
                                  variables={"chunk": chunk.text})
        out = parse_list(gateway.generate(retry))
    return out


def _summaries_text(summaries: Sequence[Summary]) -> str:
    return "\n\n".join(s.text for s in sorted(summaries, key=lambda s: s.rank))


def key_claim_retention(chunks: Sequence[DocumentChunk], summaries: Sequence[Summary],
                        gateway: ModelGateway) -> MetricReport:
    """Fraction of judge-extracted key claims that the summaries still contain."""
    report = MetricReport("key_claim_retention")
    context = _summaries_text(summaries) or "(empty)"
    items = []
    for chunk in chunks:
        try:
            keys = _list_from(gateway, "keyclaims", "keyclaims", chunk)
        except GatewayError as exc:
            log.warning("key claim extraction failed for %s: %s", chunk.chunk_id, exc)
            keys = None
        if keys is None:
            report.flagged.append(chunk.chunk_id)
            continue
        for j, k in enumerate(keys):
            items.append((f"{chunk.chunk_id}/k{j}",
                          f"Is the following claim stated or clearly implied by the summaries? Claim: {k}",
                          context))
    return _judge_fraction("key_claim_retention", items, gateway, "retention", report)


def _summary_claims(summaries: Sequence[Summary], gateway: ModelGateway) -> list[Claim]:
    claims: list[Claim] = []
    for s in sorted(summaries, key=lambda s: s.rank):
        if not s.text.strip():
            continue
        pseudo = DocumentChunk(f"summary-{s.rank}", "summaries", s.text, s.focus_claim_id)
        try:
            claims += extract_claims(pseudo, ExtractionStrategy.SINGLE_STAGE, gateway)
        except (ExtractionError, GatewayError) as exc:
            log.warning("could not split summary %d into claims: %s", s.rank, exc)
    return claims


def faithfulness(summaries: Sequence[Summary], chunks: Sequence[DocumentChunk], gateway: ModelGateway) -> MetricReport:
    """Fraction of summary claims supported by the retrieved documents."""
    docs = "\n\n".join(c.text for c in chunks)
    items = [(c.claim_id, f"Is the following claim supported by the documents? Claim: {c.text}", docs)
             for c in _summary_claims(summaries, gateway)]
    return _judge_fraction("faithfulness", items, gateway, "faithfulness")


def answer_relevance(summaries: Sequence[Summary], question: str, gateway: ModelGateway) -> MetricReport:
    """Fraction of summary claims relevant to the question."""
    items = [(c.claim_id, f"Is the following claim relevant to answering the question? Claim: {c.text}",
              f"Question: {question}") for c in _summary_claims(summaries, gateway)]
    return _judge_fraction("answer_relevance", items, gateway, "relevance")


def source_diversity(summaries: Sequence[Summary], retrieved: Sequence[DocumentChunk | str]) -> float:
    """Share of retrieved chunks that feed at least one summary."""
    ids = {c if isinstance(c, str) else c.chunk_id for c in retrieved}
    if not ids:
        return 0.0
    used = set().union(*(s.contributing_chunk_ids for s in summaries)) if summaries else set()
    return len(used & ids) / len(ids)


# -- answering -----------------------------------------------------------------

_ANSWER_PATTERNS = tuple(re.compile(p, re.MULTILINE) for p in (
    r"(?i:answer)\s*(?i:is)?\s*[:\-]?\s*\(?\s*([A-Z])\b",
    r"\(([A-Z])\)",
    r"^\s*([A-Z])(?:[.):\s]|$)",
))


def parse_option_label(output: str, labels: Sequence[str]) -> str | None:
    valid = set(labels)
    for pat in _ANSWER_PATTERNS:
        for m in pat.finditer(output):
            label = m.group(1)
            if label in valid:
                return label
    return None


@dataclass(frozen=True)
class AnswerResult:
    label: str
    parse_failure: bool
    raw: str


def answer_question(context: str, q: MCQuestion, gateway: ModelGateway) -> AnswerResult:
    """Pick an option label; one reprompt on an unparseable reply, then the first label, flagged."""
    block = f"Context:\n{context}\n\n" if context else ""
    prompt = gateway.templates.render("qa", context_block=block, question=q.question,
                                      options="\n".join(q.labeled_options()))
    variables = {"context": context, "question": q.question, "options": dict(q.options)}
    raw = ""
    for p in (prompt, prompt + "\n\nReply with a single option letter."):
        raw = gateway.generate(GenerationRequest(p, max_tokens=64, task="qa", variables=variables))
        label = parse_option_label(raw, q.labels)
        if label is not None:
            return AnswerResult(label, False, raw)
    log.warning("unparseable answer for %s, falling back to %s", q.question_id, q.labels[0])
    return AnswerResult(q.labels[0], True, raw)


def accuracy(predicted: Sequence[str], gold: Sequence[str]) -> float:
    if len(predicted) != len(gold):
        raise ValueError("predicted and gold lengths differ")
    if not gold:
        return 0.0
    return sum(p == g for p, g in zip(predicted, gold)) / len(gold)
