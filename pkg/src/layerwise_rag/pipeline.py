"""End-to-end orchestration: retrieve, extract, build, denoise, summarize, answer."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._text import token_count
from .config import PipelineConfig
from .core import ClaimGraph, DocumentChunk, graph_to_dict
from .evaluation import (
    AnswerResult, MCQuestion, MetricReport, accuracy, answer_question, answer_relevance, faithfulness,
    key_claim_retention, ref_score, semantic_preservation_report, source_diversity,
)
from .extraction import Extraction, ExtractionStrategy, extract_all
from .gateway import GatewayError, HttpGateway, MockGateway, ModelGateway, load_mock_script
from .graphbuild import DenoiseVerdict, build_graph, dedup_entities, denoise, triple_forms
from .retrieval import Corpus, RetrievalQuery, build_query, load_index, retrieve_scored
from .summarize import ClaimOfInterest, assemble_context, select_claims_of_interest, summarize_graph
from .templates import Templates

log = logging.getLogger(__name__)

STAGES = ("query", "retrieve", "extract", "dedup", "build", "denoise", "select", "summarize", "assemble", "answer")
# settings that change how fast a run goes but never what it produces
EXECUTION_ONLY_KEYS = (("gateway", "max_concurrency"),)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def make_gateway(cfg: PipelineConfig, mock_script: str | None = None) -> ModelGateway:
    templates = Templates(cfg.templates.dir or None)
    if cfg.gateway.mode == "mock" or mock_script:
        path = mock_script or cfg.gateway.mock_script_path
        script = load_mock_script(path) if path else {}
        return MockGateway(script, policy=cfg.gateway.mock_policy, templates=templates)
    return HttpGateway.from_config(cfg, templates=templates)


@dataclass
class QuestionRun:
    question: MCQuestion
    variant: str
    query: RetrievalQuery | None = None
    retrieved: list[tuple[DocumentChunk, float]] = field(default_factory=list)
    extraction: Extraction | None = None
    canonical_map: dict[str, str] = field(default_factory=dict)
    graph_built: ClaimGraph | None = None
    graph: ClaimGraph | None = None
    verdicts: list[DenoiseVerdict] = field(default_factory=list)
    claims_of_interest: list[ClaimOfInterest] = field(default_factory=list)
    summaries: list = field(default_factory=list)
    summary_trace: dict = field(default_factory=dict)
    context: str = ""
    answer: AnswerResult | None = None

    @property
    def retrieved_chunks(self) -> list[DocumentChunk]:
        return [c for c, _ in self.retrieved]

    def trace(self) -> dict:
        out: dict = {"question": self.question.to_dict(), "variant": self.variant}
        if self.query is not None:
            out["query"] = {"rewritten_question": self.query.rewritten_question,
                            "hyde_candidate": self.query.hyde_candidate, "fused_text": self.query.fused_text}
        if self.retrieved:
            out["retrieved"] = [{"chunk_id": c.chunk_id, "score": s} for c, s in self.retrieved]
        if self.extraction is not None:
            out["extraction"] = {
                "claims": [{"claim_id": c.claim_id, "text": c.text, "chunk_id": c.source_chunk_id}
                           for c in self.extraction.claims],
                "triples": [[t.claim_id, t.subject, t.predicate, t.object] for t in self.extraction.triples],
                "failed_chunks": self.extraction.failed_chunks,
                "failed_claims": self.extraction.failed_claims,
            }
        if self.canonical_map:
            out["canonical_map"] = dict(sorted(self.canonical_map.items()))
        if self.graph is not None:
            out["denoise"] = {"kept": sum(v.keep for v in self.verdicts),
                              "dropped": sorted(v.claim_id for v in self.verdicts if not v.keep)}
        if self.summary_trace:
            out["summarization"] = self.summary_trace
        if self.answer is not None:
            out["answer"] = {"label": self.answer.label, "parse_failure": self.answer.parse_failure,
                             "raw": self.answer.raw}
        return out


def _stage(name: str):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
                raise StageError(name, exc) from exc
        return inner
    return wrap


def _chunk_context(run: QuestionRun, gateway: ModelGateway, limit_tokens: int) -> str:
    """Retrieved chunks reranked against the question and packed up to the token limit."""
    chunks = run.retrieved_chunks
    if not chunks:
        return ""
    scores = gateway.rerank(run.question.question, [c.text for c in chunks])
    order = sorted(range(len(chunks)), key=lambda i: (-scores[i].score, chunks[i].chunk_id))
    parts, used = [], 0
    for i in order:
        n = token_count(chunks[i].text)
        if used + n <= limit_tokens:
            parts.append(chunks[i].text)
            used += n
    return "\n\n".join(parts)


def run_question(question: MCQuestion, corpora: Sequence[Corpus], cfg: PipelineConfig, gateway: ModelGateway,
                 variant: str | None = None, max_workers: int = 1, on_stage=None) -> QuestionRun:
    """Answer one question with the configured variant.

    ``on_stage(name, run)`` is called after each completed stage so callers can
    persist intermediate artifacts.
    """
    variant = variant or cfg.variant
    run = QuestionRun(question, variant)
    notify = on_stage or (lambda name, r: None)
    options = list(question.options.values())

    if variant != "baseline":
        run.query = _stage("query")(build_query)(
            question.question, options, gateway, rewrite=variant in ("rewrite", "layerwise"),
            hyde=variant in ("hyde", "layerwise"))
        run.retrieved = _stage("retrieve")(retrieve_scored)(corpora, run.query, cfg.retrieval.k, gateway)
        notify("retrieve", run)

    if variant in ("rewrite", "hyde"):
        run.context = _stage("assemble")(_chunk_context)(run, gateway, cfg.context.limit_tokens)
    elif variant == "layerwise":
        layerwise_context(run, cfg, gateway, max_workers, notify)

    run.answer = _stage("answer")(answer_question)(run.context, question, gateway)
    notify("answer", run)
    return run


def layerwise_context(run: QuestionRun, cfg: PipelineConfig, gateway: ModelGateway, max_workers: int = 1,
                      notify=lambda name, r: None, summarizer: str | None = None) -> QuestionRun:
    q = run.question.question
    run.extraction = _stage("extract")(extract_all)(
        run.retrieved_chunks, ExtractionStrategy(cfg.extraction.strategy), gateway, max_workers)
    notify("extract", run)
    triples = run.extraction.triples
    if triples:
        cmap = _stage("dedup")(dedup_entities)(triple_forms(triples), gateway, cfg.dedup.threshold)
        run.canonical_map = dict(cmap.mapping)
    run.graph_built = _stage("build")(build_graph)(
        triples, run.extraction.claims, q, gateway, run.canonical_map, cfg.graph.allow_self_loops)
    if cfg.graph.denoise and len(run.graph_built):
        run.graph, run.verdicts = _stage("denoise")(denoise)(run.graph_built, q, gateway, max_workers)
    else:
        run.graph = run.graph_built
    notify("graph", run)
    run.claims_of_interest = _stage("select")(select_claims_of_interest)(
        run.graph, q, gateway, cfg.summarize.top_candidates, cfg.summarize.neighbor_cap, max_workers)
    if not run.claims_of_interest:
        log.warning("graph is empty; answering without context")
    result = _stage("summarize")(summarize_graph)(
        run.graph, q, gateway, strategy=summarizer or cfg.summarize.strategy,
        top_candidates=cfg.summarize.top_candidates, neighbor_cap=cfg.summarize.neighbor_cap,
        semantic_threshold=cfg.dedup.threshold, max_workers=max_workers,
        claims_of_interest=run.claims_of_interest)
    run.summaries = result.summaries
    run.summary_trace = result.trace
    run.context = _stage("assemble")(assemble_context)(run.summaries, cfg.context.limit_tokens)
    notify("summarize", run)
    return run


# -- artifacts -------------------------------------------------------------------

def _sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def reproducible_config(cfg: PipelineConfig) -> dict:
    data = cfg.to_dict()
    for section, key in EXECUTION_ONLY_KEYS:
        data[section].pop(key, None)
    return data


def reproducible_config_hash(cfg: PipelineConfig) -> str:
    canon = json.dumps(reproducible_config(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def build_manifest(cfg: PipelineConfig, run_id: str, gateway: ModelGateway, question_path: str | Path | None,
                   index_paths: Sequence[str | Path] = (), mock_script: str | None = None) -> dict:
    script = mock_script or (cfg.gateway.mock_script_path if isinstance(gateway, MockGateway) else "")
    return {
        "run_id": run_id,
        "package_version": package_version(),
        "config_hash": reproducible_config_hash(cfg),
        "config": reproducible_config(cfg),
        "template_hashes": gateway.templates.hashes(),
        "mock_script_sha256": _sha256_file(script) if script else None,
        "question_sha256": _sha256_file(question_path) if question_path else None,
        "index_sha256": {Path(p).name: _sha256_file(p) for p in index_paths},
    }


def _dump(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False, sort_keys=False) + "\n", encoding="utf-8")


def write_run_artifacts(run: QuestionRun, out_dir: Path, stage: str) -> None:
    if stage == "graph" and run.graph is not None:
        _dump(out_dir / "graph.json", graph_to_dict(run.graph))
        if run.verdicts or run.variant == "layerwise":
            (out_dir / "denoise_log.jsonl").write_text("".join(v.to_json() + "\n" for v in run.verdicts),
                                                       encoding="utf-8")
    if stage in ("summarize", "answer"):
        (out_dir / "context.txt").write_text(run.context + ("\n" if run.context else ""), encoding="utf-8")
    if stage == "answer" and run.answer is not None:
        (out_dir / "answer.txt").write_text(run.answer.label + "\n", encoding="utf-8")
    _dump(out_dir / "trace.json", run.trace())


def load_corpora(index_paths: Sequence[str | Path]) -> list[Corpus]:
    missing = [str(p) for p in index_paths if not Path(p).exists()]
    if missing:
        raise FileNotFoundError(f"index file(s) not found: {', '.join(missing)}")
    return [load_index(p) for p in index_paths]


def default_run_id(cfg: PipelineConfig) -> str:
    import datetime as _dt
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    return f"{stamp}-{reproducible_config_hash(cfg)[:12]}"


def cmd_ask(question_path: str | Path, index_paths: Sequence[str | Path], cfg: PipelineConfig,
            gateway: ModelGateway, out_root: str | Path = "out", run_id: str | None = None,
            max_workers: int | None = None, mock_script: str | None = None) -> tuple[QuestionRun, Path]:
    """Run the configured pipeline for one question and write the run directory."""
    from .evaluation import load_question
    corpora = load_corpora(index_paths) if cfg.variant != "baseline" else []
    question = load_question(question_path)
    run_id = run_id or default_run_id(cfg)
    out_dir = Path(out_root) / run_id
    out_dir.mkdir(parents=True, exist_ok=True)
    _dump(out_dir / "manifest.json", build_manifest(cfg, run_id, gateway, question_path, index_paths, mock_script))
    workers = max_workers or cfg.gateway.max_concurrency
    run = run_question(question, corpora, cfg, gateway, max_workers=workers,
                       on_stage=lambda stage, r: write_run_artifacts(r, out_dir, stage))
    return run, out_dir


# -- benchmark ---------------------------------------------------------------------

@dataclass
class BenchmarkResult:
    variant: str
    accuracy: float
    records: list[dict]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in self.records)


def run_benchmark(dataset: Sequence[MCQuestion], corpora: Sequence[Corpus], cfg: PipelineConfig,
                  gateway: ModelGateway, variant: str | None = None, max_workers: int = 1) -> BenchmarkResult:
    from ._text import ordered_map
    variant = variant or cfg.variant
    runs = ordered_map(lambda q: run_question(q, corpora, cfg, gateway, variant, max_workers=1), dataset,
                       max_workers)
    records = []
    for run in sorted(runs, key=lambda r: r.question.question_id):
        q = run.question
        records.append({
            "question_id": q.question_id, "variant": variant, "context": run.context,
            "answer": run.answer.label, "gold": q.gold_label, "correct": run.answer.label == q.gold_label,
            "parse_failure": run.answer.parse_failure,
        })
    acc = accuracy([r["answer"] for r in records], [r["gold"] for r in records])
    return BenchmarkResult(variant, acc, records)


class LayerwiseQA(BaseEstimator):
    """Multiple-choice QA estimator.

    ``fit(corpora)`` takes loaded :class:`Corpus` objects or index paths;
    ``predict(questions)`` returns option labels; ``score`` is accuracy
    against the questions' gold labels (or ``y``).
    """

    def __init__(self, gateway: ModelGateway | None = None, config: PipelineConfig | None = None,
                 variant: str = "layerwise", max_workers: int = 1):
        self.gateway = gateway
        self.config = config
        self.variant = variant
        self.max_workers = max_workers

    def fit(self, corpora, y=None):
        corpora = list(corpora)
        self.corpora_ = [c if isinstance(c, Corpus) else load_index(c) for c in corpora]
        self.config_ = self.config or PipelineConfig()
        self.gateway_ = self.gateway or make_gateway(self.config_)
        return self

    def run(self, questions: Sequence[MCQuestion]) -> BenchmarkResult:
        check_is_fitted(self, "corpora_")
        return run_benchmark(questions, self.corpora_, self.config_, self.gateway_, self.variant, self.max_workers)

    def predict(self, questions: Sequence[MCQuestion]) -> list[str]:
        check_is_fitted(self, "corpora_")
        return [run_question(q, self.corpora_, self.config_, self.gateway_, self.variant).answer.label
                for q in questions]

    def score(self, questions: Sequence[MCQuestion], y: Sequence[str] | None = None) -> float:
        gold = list(y) if y is not None else [q.gold_label for q in questions]
        return accuracy(self.predict(questions), gold)


# -- component analysis ------------------------------------------------------------

EXTRACTION_COLUMNS = ("Approach", "Ref Score", "Sem. Sim.", "Claim Ret.")
SUMMARY_COLUMNS = ("Approach", "Faithfulness", "Relevancy", "Source Diversity")
COMMUNITY_COLUMNS = ("Approach", "Summary Score Wins")


@dataclass
class ComponentReport:
    extraction: list[dict]
    summarization: list[dict]
    communities: list[dict]

    def to_dict(self) -> dict:
        return {"extraction": self.extraction, "summarization": self.summarization,
                "communities": self.communities}

    @staticmethod
    def _table(columns, rows) -> str:
        def fmt(v):
            return "n/a" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))
        lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
        lines += ["| " + " | ".join(fmt(r[c]) for c in columns) + " |" for r in rows]
        return "\n".join(lines)

    def to_markdown(self) -> str:
        return "\n\n".join([
            "Relation extraction\n\n" + self._table(EXTRACTION_COLUMNS, self.extraction),
            "Graph creation\n\n" + self._table(COMMUNITY_COLUMNS, self.communities),
            "Graph summarization\n\n" + self._table(SUMMARY_COLUMNS, self.summarization),
        ]) + "\n"


def _pooled(reports: list[MetricReport]) -> float | None:
    vals = [s for r in reports for s in r.valid]
    return sum(vals) / len(vals) if vals else None


def cmd_component_analysis(dataset: Sequence[MCQuestion], corpora: Sequence[Corpus], cfg: PipelineConfig,
                           gateway: ModelGateway, max_workers: int = 1) -> ComponentReport:
    """Extraction metrics per strategy, summary metrics per summarizer, and
    graph-vs-semantic community wins, pooled over the dataset."""
    retrieved: dict[str, QuestionRun] = {}
    for q in dataset:
        run = QuestionRun(q, "layerwise")
        run.query = build_query(q.question, list(q.options.values()), gateway)
        run.retrieved = retrieve_scored(corpora, run.query, cfg.retrieval.k, gateway)
        retrieved[q.question_id] = run

    extraction_rows = []
    base_runs: dict[str, QuestionRun] = {}
    for strategy in ExtractionStrategy:
        scfg = cfg.replace(**{"extraction.strategy": strategy.value})
        refs, sims, rets = [], [], []
        for q in dataset:
            src = retrieved[q.question_id]
            run = QuestionRun(q, "layerwise", src.query, list(src.retrieved))
            layerwise_context(run, scfg, gateway, max_workers, summarizer="layerwise")
            if run.extraction.claims:
                refs.append(ref_score(run.extraction.claims))
            sims.append(semantic_preservation_report(run.retrieved_chunks, run.extraction.claims, gateway))
            rets.append(key_claim_retention(run.retrieved_chunks, run.summaries, gateway))
            if strategy.value == cfg.extraction.strategy:
                base_runs[q.question_id] = run
        extraction_rows.append({"Approach": strategy.value, "Ref Score": _pooled(refs),
                                "Sem. Sim.": _pooled(sims), "Claim Ret.": _pooled(rets)})

    summary_rows = []
    concatenated: dict[str, dict[str, str]] = {q.question_id: {} for q in dataset}
    for name in ("layerwise", "semantic", "subgraph"):
        faith, rel, div = [], [], []
        for q in dataset:
            run = base_runs[q.question_id]
            res = summarize_graph(run.graph, q.question, gateway, strategy=name,
                                  semantic_threshold=cfg.dedup.threshold, max_workers=max_workers,
                                  claims_of_interest=run.claims_of_interest)
            concatenated[q.question_id][name] = "\n\n".join(s.text for s in res.summaries)
            if not res.summaries:
                continue
            faith.append(faithfulness(res.summaries, run.retrieved_chunks, gateway))
            rel.append(answer_relevance(res.summaries, q.question, gateway))
            div.append(source_diversity(res.summaries, run.retrieved_chunks))
        summary_rows.append({"Approach": name.capitalize(), "Faithfulness": _pooled(faith),
                             "Relevancy": _pooled(rel),
                             "Source Diversity": sum(div) / len(div) if div else None})

    wins = {"subgraph": 0, "semantic": 0}
    compared = 0
    for q in dataset:
        texts = concatenated[q.question_id]
        if not texts.get("subgraph") or not texts.get("semantic"):
            continue
        s_graph, s_sem = (r.score for r in gateway.rerank(q.question, [texts["subgraph"], texts["semantic"]]))
        compared += 1
        if s_graph > s_sem:
            wins["subgraph"] += 1
        elif s_sem > s_graph:
            wins["semantic"] += 1
    community_rows = [
        {"Approach": "Graph Communities", "Summary Score Wins": wins["subgraph"] / compared if compared else None},
        {"Approach": "Semantic Communities", "Summary Score Wins": wins["semantic"] / compared if compared else None},
    ]
    return ComponentReport(extraction_rows, summary_rows, community_rows)


def is_gateway_failure(exc: BaseException) -> bool:
    cause = exc.cause if isinstance(exc, StageError) else exc
    return isinstance(cause, GatewayError)
