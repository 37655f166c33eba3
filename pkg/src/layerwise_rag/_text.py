from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
_NUMBERING = re.compile(r"^\s*(?:\(?\d+[.)]|[*•])\s*")
NO_CLAIMS = "(no claims)"


def tokens(text: str) -> list[str]:
    return text.split()


def token_count(text: str) -> int:
    return len(text.split())


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


def sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_END.split(text.strip()) if s.strip()]


def parse_list(output: str) -> list[str] | None:
    """Parse a ``- item`` list from model output.

    Leading numbering (``1.``, ``2)``) and ``*``/bullet markers are treated like
    ``- ``. Returns ``[]`` for the no-claims sentinel and ``None`` when nothing
    list-shaped is found.
    """
    text = output.strip()
    if not text:
        return None
    if text.lower().startswith(NO_CLAIMS):
        return []
    items = []
    for raw in text.splitlines():
        line = raw.strip()
        numbered = _NUMBERING.match(line)
        if numbered:
            line = line[numbered.end():].strip()
            if line.startswith("- "):
                line = line[2:]
        elif line.startswith("- "):
            line = line[2:]
        else:
            continue
        line = line.strip()
        if line:
            items.append(line)
    return items or None


def ordered_map(fn: Callable[[T], R], items: Sequence[T] | Iterable[T], max_workers: int = 1) -> list[R]:
    """Map with bounded parallelism; results come back in input order."""
    items = list(items)
    if max_workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, items))
