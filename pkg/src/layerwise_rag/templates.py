"""Prompt templates, loaded from the bundled ``templates/`` directory or an override."""
from __future__ import annotations

import hashlib
from functools import lru_cache
from pathlib import Path

TEMPLATE_NAMES = (
    "rewrite", "hyde", "claims", "atomic", "decontext", "triple", "direct_triples",
    "entities", "pairs", "denoise", "summarize", "judge", "keyclaims", "qa",
)

BUNDLED_DIR = Path(__file__).with_name("templates")


@lru_cache(maxsize=None)
def _read(directory: str, name: str) -> str:
    path = Path(directory) / f"{name}.txt"
    if not path.exists() and Path(directory) != BUNDLED_DIR:
        path = BUNDLED_DIR / f"{name}.txt"
    return path.read_text(encoding="utf-8").rstrip("\n")


class Templates:
    def __init__(self, directory: str | Path | None = None):
        self.directory = str(directory or BUNDLED_DIR)

    def get(self, name: str) -> str:
        if name not in TEMPLATE_NAMES:
            raise KeyError(f"unknown template {name!r}")
        return _read(self.directory, name)

    def render(self, name: str, **values) -> str:
        return self.get(name).format_map(values)

    def hashes(self) -> dict[str, str]:
        return {n: hashlib.sha256(self.get(n).encode("utf-8")).hexdigest() for n in TEMPLATE_NAMES}


DEFAULT_TEMPLATES = Templates()
