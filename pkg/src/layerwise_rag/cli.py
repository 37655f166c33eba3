"""Command-line interface.

Exit codes: 0 success, 2 configuration or startup error, 3 pipeline stage
error, 4 gateway or transport error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, PipelineConfig, dump_config, load_config
from .core import GraphError, load_graph, save_graph
from .evaluation import DatasetError, load_dataset, load_question
from .gateway import GatewayError
from .pipeline import (
    STAGES, QuestionRun, StageError, cmd_ask, cmd_component_analysis, layerwise_context, load_corpora,
    make_gateway, run_benchmark,
)
from .retrieval import IngestError, build_query, ingest_corpus, retrieve_scored, save_index
from .summarize import assemble_context, summarize_graph

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_GATEWAY = 0, 2, 3, 4

VARIANT_STAGES = {
    "baseline": ("answer",),
    "rewrite": ("query", "retrieve", "assemble", "answer"),
    "hyde": ("query", "retrieve", "assemble", "answer"),
    "layerwise": STAGES,
}


GLOBAL_DEFAULTS = {"config": None, "mock_script": None, "max_concurrency": None, "dry_run": False,
                   "run_id": None, "verbose": 0}


class StartupError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a subcommand's unset flag from clobbering one given before it
    hide = argparse.SUPPRESS
    common.add_argument("--config", default=hide, help="TOML configuration file")
    common.add_argument("--mock-script", default=hide, help="serve model calls from a recorded mock script")
    common.add_argument("--max-concurrency", type=int, default=hide, help="parallel model calls")
    common.add_argument("--dry-run", action="store_true", default=hide,
                        help="print the stage plan and config, call nothing")
    common.add_argument("--run-id", default=hide, help="fixed run id (deterministic output directory)")
    common.add_argument("-v", "--verbose", action="count", default=hide)

    p = argparse.ArgumentParser(prog="layerwise-rag", parents=[common],
                                description="Claim-graph retrieval-augmented multiple-choice QA.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="chunk and embed a JSONL corpus into an index")
    _input(s, "corpus", "JSONL file of {doc_id, text} records")
    s.add_argument("--out", required=True, help="index file to write")
    s.add_argument("--corpus-id", help="defaults to the corpus file stem")

    s = sub.add_parser("ask", parents=[common], help="answer one question")
    _input(s, "question", "question JSON file")
    s.add_argument("--index", action="append", default=[], help="index file (repeatable)")
    s.add_argument("--variant", choices=list(VARIANT_STAGES))
    s.add_argument("--out-dir", default="out", help="root of run directories")

    s = sub.add_parser("eval", parents=[common], help="benchmark accuracy over a dataset")
    _input(s, "dataset", "JSONL file of questions")
    s.add_argument("--index", action="append", default=[])
    s.add_argument("--variant", choices=list(VARIANT_STAGES))
    s.add_argument("--log", help="write per-question JSONL records here")

    s = sub.add_parser("component-analysis", parents=[common], help="per-component metric tables")
    _input(s, "dataset", "JSONL file of questions")
    s.add_argument("--index", action="append", default=[])
    s.add_argument("--out", help="also write the JSON report here")

    g = sub.add_parser("graph", help="graph utilities")
    gsub = g.add_subparsers(dest="graph_command", required=True)
    s = gsub.add_parser("build", parents=[common], help="build and denoise the claim graph for a question")
    _input(s, "question", "question JSON file")
    s.add_argument("--index", action="append", default=[])
    s.add_argument("--out", required=True, help="graph JSON to write")

    s = sub.add_parser("summarize", parents=[common], help="summarize a saved graph for a question")
    _input(s, "graph", "graph JSON file")
    _input(s, "question", "question JSON file")
    s.add_argument("--strategy", choices=["layerwise", "subgraph", "semantic"])
    s.add_argument("--out", help="write the assembled context here instead of stdout")
    s.add_argument("--trace", help="write the summarization trace JSON here")

    c = sub.add_parser("config", help="configuration utilities")
    csub = c.add_subparsers(dest="config_command", required=True)
    csub.add_parser("dump", parents=[common], help="print the effective configuration")
    return p


def _input(parser: argparse.ArgumentParser, name: str, help: str) -> None:
    """An input file given either positionally or as ``--name``."""
    parser.add_argument(name, nargs="?", help=help)
    parser.add_argument(f"--{name}", dest=f"{name}_opt", metavar=name.upper(), help=f"same as positional {name}")


def _resolve_inputs(args) -> None:
    for name in ("corpus", "question", "dataset", "graph"):
        if f"{name}_opt" in vars(args):
            value = getattr(args, name) or getattr(args, f"{name}_opt")
            if not value:
                raise StartupError(f"missing {name} file")
            setattr(args, name, value)


def _effective_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    overrides = {}
    if args.max_concurrency is not None:
        overrides["gateway.max_concurrency"] = args.max_concurrency
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if getattr(args, "strategy", None):
        overrides["summarize.strategy"] = args.strategy
    if args.mock_script:
        overrides["gateway.mode"] = "mock"
        overrides["gateway.mock_script_path"] = args.mock_script
    return cfg.replace(**overrides) if overrides else cfg


def _require(paths: Sequence[str], what: str) -> None:
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        raise StartupError(f"{what} not found: {', '.join(missing)}")


def _plan(args, cfg: PipelineConfig) -> list[str]:
    cmd = args.command
    if cmd == "ingest":
        return ["read", "chunk", "embed", "write-index"]
    if cmd in ("ask", "eval"):
        return list(VARIANT_STAGES[cfg.variant])
    if cmd == "component-analysis":
        return ["query", "retrieve", "extract x4 strategies", "build", "denoise", "select",
                "summarize x3 summarizers", "metrics"]
    if cmd == "graph":
        return ["query", "retrieve", "extract", "dedup", "build", "denoise", "write-graph"]
    if cmd == "summarize":
        return ["select", "summarize", "assemble"]
    return []


def _run(args, cfg: PipelineConfig, out) -> int:
    cmd = args.command
    workers = cfg.gateway.max_concurrency

    if cmd == "config":
        out.write(dump_config(cfg))
        return EXIT_OK

    inputs = {"ingest": [args.corpus] if cmd == "ingest" else [],
              "ask": [getattr(args, "question", "")] + list(getattr(args, "index", [])),
              "eval": [getattr(args, "dataset", "")] + list(getattr(args, "index", [])),
              "component-analysis": [getattr(args, "dataset", "")] + list(getattr(args, "index", [])),
              "graph": [getattr(args, "question", "")] + list(getattr(args, "index", [])),
              "summarize": [getattr(args, "graph", ""), getattr(args, "question", "")]}[cmd]
    _require(inputs, "input file(s)")
    if cmd in ("eval", "component-analysis", "graph") and not args.index:
        raise StartupError("at least one --index is required")
    if cmd == "ask" and cfg.variant != "baseline" and not args.index:
        raise StartupError("at least one --index is required unless --variant baseline")

    if args.dry_run:
        out.write("stage plan: " + " -> ".join(_plan(args, cfg)) + "\n\n")
        out.write(dump_config(cfg))
        return EXIT_OK

    gateway = make_gateway(cfg, args.mock_script)

    if cmd == "ingest":
        corpus = ingest_corpus(args.corpus, gateway, cfg.retrieval.chunk_size, cfg.retrieval.chunk_overlap,
                               corpus_id=args.corpus_id, max_workers=workers)
        save_index(corpus, args.out)
        out.write(f"indexed {len(corpus.chunks)} chunks into {args.out}\n")
        return EXIT_OK

    if cmd == "ask":
        run, out_dir = cmd_ask(args.question, args.index, cfg, gateway, args.out_dir, args.run_id,
                               max_workers=workers, mock_script=cfg.gateway.mock_script_path or None)
        out.write(f"answer: {run.answer.label}\nrun directory: {out_dir}\n")
        return EXIT_OK

    if cmd == "eval":
        result = run_benchmark(load_dataset(args.dataset), load_corpora(args.index), cfg, gateway,
                               max_workers=workers)
        if args.log:
            Path(args.log).write_text(result.to_jsonl(), encoding="utf-8")
        out.write(f"{result.variant}: accuracy {result.accuracy:.4f} over {len(result.records)} questions\n")
        return EXIT_OK

    if cmd == "component-analysis":
        report = cmd_component_analysis(load_dataset(args.dataset), load_corpora(args.index), cfg, gateway,
                                        max_workers=workers)
        if args.out:
            Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
        out.write(report.to_markdown())
        return EXIT_OK

    if cmd == "graph":
        question = load_question(args.question)
        run = QuestionRun(question, "layerwise")
        run.query = build_query(question.question, list(question.options.values()), gateway)
        run.retrieved = retrieve_scored(load_corpora(args.index), run.query, cfg.retrieval.k, gateway)
        # stop after the graph: summarization is not needed here
        try:
            layerwise_context(run, cfg, gateway, workers, notify=_stop_after_graph)
        except _GraphDone:
            pass
        save_graph(run.graph, args.out)
        out.write(f"wrote graph with {len(run.graph)} claims to {args.out}\n")
        return EXIT_OK

    if cmd == "summarize":
        graph = load_graph(args.graph)
        question = load_question(args.question)
        result = summarize_graph(graph, question.question, gateway, strategy=cfg.summarize.strategy,
                                 top_candidates=cfg.summarize.top_candidates,
                                 neighbor_cap=cfg.summarize.neighbor_cap,
                                 semantic_threshold=cfg.dedup.threshold, max_workers=workers)
        context = assemble_context(result.summaries, cfg.context.limit_tokens)
        if args.trace:
            Path(args.trace).write_text(json.dumps(result.trace, indent=2, ensure_ascii=False) + "\n",
                                        encoding="utf-8")
        if args.out:
            Path(args.out).write_text(context + "\n", encoding="utf-8")
            out.write(f"wrote {len(result.summaries)} summaries to {args.out}\n")
        else:
            out.write(context + "\n")
        return EXIT_OK
    raise StartupError(f"unknown command {cmd!r}")


class _GraphDone(Exception):
    pass


def _stop_after_graph(stage: str, run) -> None:
    if stage == "graph":
        raise _GraphDone


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    args = _parser().parse_args(argv)
    for name, default in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _resolve_inputs(args)
        cfg = _effective_config(args)
        return _run(args, cfg, out)
    except (ConfigError, StartupError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GATEWAY if isinstance(exc.cause, GatewayError) else EXIT_STAGE
    except GatewayError as exc:
        print(f"error: [gateway] {exc}", file=sys.stderr)
        return EXIT_GATEWAY
    except (GraphError, DatasetError, IngestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
