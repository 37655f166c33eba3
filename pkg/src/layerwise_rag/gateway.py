"""Model services behind one interface: generation, embedding, reranking, judging.

Two implementations are provided. :class:`HttpGateway` talks to an
OpenAI-compatible server (chat completions + embeddings) and a reranking
endpoint returning ``{"scores": [...]}``. :class:`MockGateway` answers from a
script keyed by request fingerprints and is a pure function of
``(script, request)``, so whole pipeline runs are reproducible offline.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import struct
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx
import numpy as np

from ._text import NO_CLAIMS, normalize_ws, sentences
from .templates import DEFAULT_TEMPLATES, Templates

log = logging.getLogger(__name__)


class GatewayError(Exception):
    pass


class TransportError(GatewayError):
    pass


class ScriptMissError(GatewayError):
    def __init__(self, kind: str, fp: str):
        super().__init__(f"no scripted {kind} response for fingerprint {fp}")
        self.kind = kind
        self.fingerprint = fp


class JudgeParseError(GatewayError):
    def __init__(self, raw: str):
        super().__init__(f"could not parse YES/NO from judge output: {raw!r}")
        self.raw = raw


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_tokens: int = 512
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()
    # Not part of the fingerprint: structured inputs the mock's default
    # responder uses, and the template that produced the prompt.
    task: str = field(default="", compare=False)
    variables: Mapping[str, Any] | None = field(default=None, compare=False, hash=False)
    judge: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def canonical(self) -> dict:
        return {
            "prompt": self.prompt,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "stop_sequences": list(self.stop_sequences),
        }


@dataclass(frozen=True)
class RerankScore:
    query: str
    passage: str
    score: float


@dataclass(frozen=True)
class JudgeVerdict:
    value: bool
    rationale: str

    def __bool__(self) -> bool:
        return self.value


def fingerprint(kind: str, payload: Any) -> str:
    canon = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return f"{kind}:{hashlib.sha256(canon.encode('utf-8')).hexdigest()}"


def request_fingerprint(kind: str, request: Any) -> str:
    """Fingerprint for ``generate`` (a GenerationRequest), ``embed`` (a text) or
    ``rerank`` (a ``(query, passage)`` pair)."""
    if kind == "generate":
        if isinstance(request, str):
            request = GenerationRequest(request)
        elif isinstance(request, Mapping):
            request = GenerationRequest(**request)
        return fingerprint(kind, request.canonical())
    if kind == "embed":
        return fingerprint(kind, {"text": request})
    if kind == "rerank":
        query, passage = (request["query"], request["passage"]) if isinstance(request, Mapping) else request
        return fingerprint(kind, {"query": query, "passage": passage})
    raise ValueError(f"unknown request kind {kind!r}")


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


_YES_NO = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


def parse_yes_no(output: str) -> bool | None:
    m = _YES_NO.search(output)
    if m is None:
        return None
    return m.group(1).lower() == "yes"


class ModelGateway:
    """Base class. Subclasses implement ``_generate``, ``_embed`` and ``_rerank``."""

    def __init__(self, templates: Templates | None = None):
        self.templates = templates or DEFAULT_TEMPLATES
        self.calls: Counter[str] = Counter()
        self._ledger_lock = threading.Lock()

    def _count(self, kind: str, n: int = 1):
        with self._ledger_lock:
            self.calls[kind] += n

    def generate(self, request: GenerationRequest | str) -> str:
        if isinstance(request, str):
            request = GenerationRequest(request)
        self._count("generate")
        return self._generate(request)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        texts = list(texts)
        if not texts:
            raise ValueError("embed() needs at least one text")
        self._count("embed")
        vectors = self._embed(texts)
        if len(vectors) != len(texts):
            raise GatewayError(f"embedder returned {len(vectors)} vectors for {len(texts)} texts")
        return [np.asarray(v, dtype=float) for v in vectors]

    def rerank(self, query: str, passages: Sequence[str]) -> list[RerankScore]:
        passages = list(passages)
        if not passages:
            raise ValueError("rerank() needs at least one passage")
        self._count("rerank")
        scores = self._rerank(query, passages)
        if len(scores) != len(passages):
            raise GatewayError(f"reranker returned {len(scores)} scores for {len(passages)} passages")
        return [RerankScore(query, p, float(s)) for p, s in zip(passages, scores)]

    def judge_bool(self, instruction: str, context: str, task: str = "judge",
                   variables: Mapping[str, Any] | None = None) -> JudgeVerdict:
        """Ask a YES/NO question; one reprompt on unparseable output."""
        prompt = self.templates.render("judge", instruction=instruction, context=context)
        vars_ = {"instruction": instruction, "context": context, **(variables or {})}
        raw = self.generate(GenerationRequest(prompt, max_tokens=128, task=task, variables=vars_, judge=True))
        value = parse_yes_no(raw)
        if value is None:
            retry = prompt + "\n\nReply with exactly YES or NO."
            raw = self.generate(GenerationRequest(retry, max_tokens=128, task=task, variables=vars_, judge=True))
            value = parse_yes_no(raw)
            if value is None:
                raise JudgeParseError(raw)
        return JudgeVerdict(value, raw.strip())

    def _generate(self, request: GenerationRequest) -> str:
        raise NotImplementedError

    def _embed(self, texts: list[str]) -> list[Sequence[float]]:
        raise NotImplementedError

    def _rerank(self, query: str, passages: list[str]) -> list[float]:
        raise NotImplementedError


# -- mock ----------------------------------------------------------------------

def hash_embedding(text: str, dim: int = 256, seed: int = 0) -> np.ndarray:
    """Deterministic bag-of-character-trigram projection.

    Non-alphanumerics collapse to single spaces and case is folded, so
    "COX-1" and "cox 1" embed identically.
    """
    norm = " " + " ".join(re.sub(r"[^0-9a-z]+", " ", text.lower()).split()) + " "
    vec = np.zeros(dim)
    for i in range(len(norm) - 2):
        gram = norm[i:i + 3]
        digest = hashlib.sha256(f"{seed}:{gram}".encode("utf-8")).digest()
        idx = struct.unpack_from("<I", digest, 0)[0] % dim
        sign = 1.0 if digest[4] & 1 else -1.0
        vec[idx] += sign
    if not vec.any():
        vec[0] = 1.0
    return vec / np.linalg.norm(vec)


def load_mock_script(path: str | Path) -> dict[str, Any]:
    """Read a JSONL mock script into ``{fingerprint: response}``.

    Lines carry ``kind`` and ``response`` plus either a ready ``fingerprint`` or
    a ``request`` from which the fingerprint is computed.
    """
    script: dict[str, Any] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            kind = rec["kind"]
            fp = rec.get("fingerprint") or request_fingerprint(kind, rec["request"])
            script[fp] = rec["response"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad mock script line ({exc})") from None
    return script


def _first_words_triple(text: str) -> tuple[str, str, str]:
    words = text.strip().rstrip(".!?").split()
    if len(words) >= 3:
        return words[0], words[1], " ".join(words[2:])
    if len(words) == 2:
        return words[0], "relates to", words[1]
    return words[0], "is", words[0]


def _overlap_choice(context: str, options: Mapping[str, str]) -> str:
    ctx = set(re.findall(r"[a-z0-9]+", context.lower()))
    best, best_score = None, -1
    for label in sorted(options):
        score = len(ctx & set(re.findall(r"[a-z0-9]+", options[label].lower())))
        if score > best_score:
            best, best_score = label, score
    return best or "A"


def echo_default(request: GenerationRequest) -> str:
    """Deterministic stand-in output derived from a request's structured inputs."""
    v = dict(request.variables or {})
    task = request.task
    if task == "rewrite":
        return v.get("question", request.prompt)
    if task == "hyde":
        return f"{v.get('question', '')} {' '.join(v.get('option_texts', []))}".strip()
    if task in ("claims", "atomic", "keyclaims"):
        sents = sentences(v.get("chunk", ""))
        if task == "keyclaims":
            sents = sents[:3]
        return "\n".join(f"- {s}" for s in sents) or NO_CLAIMS
    if task == "decontext":
        return "\n".join(f"- {c}" for c in v.get("claim_list", []))
    if task == "triple":
        return " | ".join(_first_words_triple(v.get("claim", request.prompt)))
    if task == "direct_triples":
        lines = [" | ".join(_first_words_triple(s)) for s in sentences(v.get("chunk", ""))]
        return "\n".join(f"- {x}" for x in lines) or NO_CLAIMS
    if task == "entities":
        ents: list[str] = []
        for s in sentences(v.get("chunk", "")):
            subj, _, obj = _first_words_triple(s)
            for e in (subj, obj):
                if e not in ents:
                    ents.append(e)
        return "\n".join(f"- {e}" for e in ents) or NO_CLAIMS
    if task == "pairs":
        ents = {normalize_ws(e).lower() for e in v.get("entity_list", [])}
        lines = []
        for s in sentences(v.get("chunk", "")):
            t = _first_words_triple(s)
            if t[0].lower() in ents and t[2].lower() in ents:
                lines.append(" | ".join(t))
        return "\n".join(f"- {x}" for x in lines) or NO_CLAIMS
    if task in ("judge", "denoise", "retention", "faithfulness", "relevance"):
        return "YES"
    if task == "summarize":
        seen: list[str] = []
        for part in [v.get("claim", "")] + list(v.get("input_list", [])):
            for s in sentences(part):
                if s not in seen:
                    seen.append(s)
        return " ".join(seen)
    if task == "qa":
        return f"Answer: {_overlap_choice(v.get('context', ''), v.get('options', {}))}"
    return request.prompt


class MockGateway(ModelGateway):
    """Scripted, deterministic gateway.

    Lookup order for ``generate``: script entry by fingerprint, then a
    per-task handler, then the miss policy (``"error"`` raises
    :class:`ScriptMissError`; ``"echo"`` answers with :func:`echo_default`).
    ``embed`` consults the script, then ``embedding_table``, then the hash
    projection. ``rerank`` consults the script per (query, passage), then
    ``rerank_table`` (keyed by passage or by ``(query, passage)``), then the
    cosine of mock embeddings.
    """

    def __init__(
        self,
        script: Mapping[str, Any] | None = None,
        policy: str = "echo",
        embedding_table: Mapping[str, Sequence[float]] | None = None,
        rerank_table: Mapping[Any, float] | None = None,
        handlers: Mapping[str, Callable[[GenerationRequest], str]] | None = None,
        dim: int = 256,
        templates: Templates | None = None,
        failures: Mapping[str, Any] | None = None,
        record: bool = False,
    ):
        super().__init__(templates)
        if policy not in ("error", "echo"):
            raise ValueError(f"unknown mock policy {policy!r}")
        self.script = dict(script or {})
        self.policy = policy
        self.embedding_table = dict(embedding_table or {})
        self.rerank_table = dict(rerank_table or {})
        self.handlers = dict(handlers or {})
        self.dim = dim
        # kind -> predicate(input) deciding whether to raise TransportError; for fault injection
        self.failures = dict(failures or {})
        self.log: list[tuple[str, str]] = []
        # with record=True, every generate call is kept as a mock-script line
        self.record = record
        self.transcript: list[dict] = []

    @classmethod
    def from_script_file(cls, path: str | Path, **kwargs) -> "MockGateway":
        return cls(load_mock_script(path), **kwargs)

    def _record(self, kind: str, fp: str):
        with self._ledger_lock:
            self.log.append((kind, fp))

    def _maybe_fail(self, kind: str, value: Any):
        pred = self.failures.get(kind)
        if pred is not None and pred(value):
            raise TransportError(f"injected {kind} failure")

    def _generate(self, request: GenerationRequest) -> str:
        fp = request_fingerprint("generate", request)
        self._record("generate", fp)
        self._maybe_fail("generate", request)
        if fp in self.script:
            out = str(self.script[fp])
        elif request.task in self.handlers:
            out = self.handlers[request.task](request)
        elif self.policy == "error":
            raise ScriptMissError("generate", fp)
        else:
            out = echo_default(request)
        if self.record:
            with self._ledger_lock:
                self.transcript.append({"kind": "generate", "task": request.task,
                                        "request": request.canonical(), "response": out})
        return out

    def write_script(self, path: str | Path) -> None:
        """Write the recorded generate calls as a mock script, one line per distinct request."""
        seen = set()
        lines = []
        for rec in self.transcript:
            fp = request_fingerprint("generate", rec["request"])
            if fp not in seen:
                seen.add(fp)
                lines.append(json.dumps(rec, ensure_ascii=False, sort_keys=True))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def embed_one(self, text: str) -> np.ndarray:
        fp = request_fingerprint("embed", text)
        self._maybe_fail("embed", text)
        if fp in self.script:
            return np.asarray(self.script[fp], dtype=float)
        if text in self.embedding_table:
            return np.asarray(self.embedding_table[text], dtype=float)
        if self.policy == "error":
            raise ScriptMissError("embed", fp)
        return hash_embedding(text, self.dim)

    def _embed(self, texts: list[str]) -> list[np.ndarray]:
        return [self.embed_one(t) for t in texts]

    def _rerank(self, query: str, passages: list[str]) -> list[float]:
        out = []
        for p in passages:
            fp = request_fingerprint("rerank", (query, p))
            self._maybe_fail("rerank", (query, p))
            if fp in self.script:
                out.append(float(self.script[fp]))
            elif (query, p) in self.rerank_table:
                out.append(float(self.rerank_table[(query, p)]))
            elif p in self.rerank_table:
                out.append(float(self.rerank_table[p]))
            elif self.policy == "error":
                raise ScriptMissError("rerank", fp)
            else:
                out.append(cosine(self.embed_one(query), self.embed_one(p)))
        return out


# -- HTTP ----------------------------------------------------------------------

_RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class HttpGateway(ModelGateway):
    """OpenAI-compatible client with bounded retries and a concurrency cap."""

    def __init__(
        self,
        generate_url: str,
        embed_url: str | None = None,
        rerank_url: str | None = None,
        api_key: str | None = None,
        model: str = "default",
        judge_model: str | None = None,
        embed_model: str = "default",
        rerank_model: str = "default",
        timeout_s: float = 60.0,
        max_concurrency: int = 8,
        max_retries: int = 3,
        backoff_s: float = 0.5,
        max_backoff_s: float = 8.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        templates: Templates | None = None,
    ):
        super().__init__(templates)
        self.generate_url = generate_url
        self.embed_url = embed_url
        self.rerank_url = rerank_url
        self.model = model
        self.judge_model = judge_model or model
        self.embed_model = embed_model
        self.rerank_model = rerank_model
        self.timeout_s = timeout_s
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.max_backoff_s = max_backoff_s
        self._sleep = sleep
        self._sem = threading.BoundedSemaphore(max_concurrency)
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout_s, headers=headers, transport=transport)

    @classmethod
    def from_config(cls, cfg, **kwargs) -> "HttpGateway":
        g = cfg.gateway
        return cls(
            generate_url=g.generate_url,
            embed_url=g.embed_url or None,
            rerank_url=g.rerank_url or None,
            api_key=os.environ.get(g.api_key_env) if g.api_key_env else None,
            model=g.model,
            judge_model=g.judge_model or None,
            embed_model=g.embed_model,
            rerank_model=g.rerank_model,
            timeout_s=g.timeout_s,
            max_concurrency=g.max_concurrency,
            max_retries=g.max_retries,
            **kwargs,
        )

    def close(self):
        self._client.close()

    def _post(self, url: str | None, payload: dict) -> dict:
        if not url:
            raise GatewayError("endpoint not configured")
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                with self._sem:
                    resp = self._client.post(url, json=payload, timeout=self.timeout_s)
                if resp.status_code in _RETRYABLE_STATUS:
                    last = TransportError(f"{url} returned HTTP {resp.status_code}")
                elif resp.status_code >= 400:
                    raise TransportError(f"{url} returned HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    return resp.json()
            except httpx.TransportError as exc:
                last = exc
            except ValueError as exc:  # undecodable body
                raise TransportError(f"{url} returned invalid JSON ({exc})") from None
            if attempt < self.max_retries:
                delay = min(self.backoff_s * 2 ** attempt, self.max_backoff_s)
                log.warning("request to %s failed (%s); retry %d in %.2fs", url, last, attempt + 1, delay)
                self._sleep(delay)
        raise TransportError(f"{url}: giving up after {self.max_retries + 1} attempts ({last})")

    def _generate(self, request: GenerationRequest) -> str:
        payload = {
            "model": self.judge_model if request.judge else self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        if request.stop_sequences:
            payload["stop"] = list(request.stop_sequences)
        data = self._post(self.generate_url, payload)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise TransportError(f"unexpected completion payload: {str(data)[:200]}") from None

    def _embed(self, texts: list[str]) -> list[list[float]]:
        data = self._post(self.embed_url, {"model": self.embed_model, "input": texts})
        try:
            items = sorted(data["data"], key=lambda d: d.get("index", 0))
            return [d["embedding"] for d in items]
        except (KeyError, TypeError):
            raise TransportError(f"unexpected embeddings payload: {str(data)[:200]}") from None

    def _rerank(self, query: str, passages: list[str]) -> list[float]:
        data = self._post(self.rerank_url, {"model": self.rerank_model, "query": query, "passages": passages,
                                            "documents": passages})
        if isinstance(data, dict) and "scores" in data:
            return [float(s) for s in data["scores"]]
        results = data.get("results") if isinstance(data, dict) else data
        try:
            scores = [0.0] * len(passages)
            for r in results:
                scores[r["index"]] = float(r.get("relevance_score", r.get("score")))
            return scores
        except (KeyError, TypeError, IndexError):
            raise TransportError(f"unexpected rerank payload: {str(data)[:200]}") from None
