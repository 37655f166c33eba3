"""Retrieval-augmented multiple-choice QA over a claim knowledge graph."""
from .config import PipelineConfig, load_config
from .core import Claim, ClaimGraph, DocumentChunk, EntityNode, Summary, Triple, load_graph, save_graph
from .evaluation import MCQuestion, MetricReport, load_dataset
from .gateway import GenerationRequest, HttpGateway, MockGateway, ModelGateway
from .graphbuild import EntityCanonicalizer, UPGMAClustering, build_graph, dedup_entities, denoise
from .pipeline import LayerwiseQA, cmd_ask, cmd_component_analysis, run_benchmark
from .retrieval import Corpus, CosineIndex, ingest_corpus, retrieve
from .summarize import GraphSummarizer, assign_layers, layerwise_summarize, select_claims_of_interest

__version__ = "0.1.0"

__all__ = [
    "Claim", "ClaimGraph", "Corpus", "CosineIndex", "DocumentChunk", "EntityCanonicalizer", "EntityNode",
    "GenerationRequest", "GraphSummarizer", "HttpGateway", "LayerwiseQA", "MCQuestion", "MetricReport",
    "MockGateway", "ModelGateway", "PipelineConfig", "Summary", "Triple", "UPGMAClustering", "assign_layers",
    "build_graph", "cmd_ask", "cmd_component_analysis", "dedup_entities", "denoise", "ingest_corpus",
    "layerwise_summarize", "load_config", "load_dataset", "load_graph", "retrieve", "run_benchmark", "save_graph",
    "select_claims_of_interest",
]
