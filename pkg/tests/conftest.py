import shutil
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from layerwise_rag.core import Claim, ClaimGraph, Triple  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


def make_graph(edges, scores=None, chunks=None, texts=None):
    """edges: {claim_id: (a, b)}; claim text defaults to the claim id."""
    g = ClaimGraph()
    for cid, (a, b) in edges.items():
        score = (scores or {}).get(cid)
        chunk = (chunks or {}).get(cid, f"chunk-{cid}")
        text = (texts or {}).get(cid, cid)
        g.add_claim_edge(Triple(cid, a, "rel", b), Claim(cid, text, chunk, score))
    return g.freeze()


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    """Temporary directory holding copies of the bundled fixtures, used as cwd."""
    for name in ("corpus.jsonl", "question.json", "dataset.jsonl", "mock_script.jsonl", "graph.json"):
        shutil.copy(FIXTURES / name, tmp_path / name)
    monkeypatch.chdir(tmp_path)
    return tmp_path
