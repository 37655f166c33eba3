"""Pipeline configuration: TOML file, environment overrides, validation.

Precedence is environment > file > defaults. An environment variable
``LWRAG_<SECTION>__<KEY>`` overrides ``section.key`` (``LWRAG_VARIANT`` for the
top-level ``variant``), e.g. ``LWRAG_RETRIEVAL__K=8``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

ENV_PREFIX = "LWRAG_"
VARIANTS = ("baseline", "rewrite", "hyde", "layerwise")
STRATEGIES = ("single_stage", "two_stage", "direct_triples", "pairs_relations")


class ConfigError(ValueError):
    pass


@dataclass
class GatewayConfig:
    mode: str = "mock"
    generate_url: str = ""
    embed_url: str = ""
    rerank_url: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    model: str = "default"
    judge_model: str = ""
    embed_model: str = "default"
    rerank_model: str = "default"
    timeout_s: float = 60.0
    max_concurrency: int = 8
    max_retries: int = 3
    mock_script_path: str = ""
    mock_policy: str = "echo"


@dataclass
class ExtractionConfig:
    strategy: str = "single_stage"


@dataclass
class RetrievalConfig:
    k: int = 32
    chunk_size: int = 128
    chunk_overlap: int = 16


@dataclass
class DedupConfig:
    threshold: float = 0.8


@dataclass
class GraphConfig:
    allow_self_loops: bool = True
    denoise: bool = True


@dataclass
class SummarizeConfig:
    top_candidates: int = 10
    neighbor_cap: int = 12
    strategy: str = "layerwise"


@dataclass
class ContextConfig:
    limit_tokens: int = 3000


@dataclass
class TemplatesConfig:
    dir: str = ""


@dataclass
class PipelineConfig:
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    dedup: DedupConfig = field(default_factory=DedupConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    summarize: SummarizeConfig = field(default_factory=SummarizeConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    templates: TemplatesConfig = field(default_factory=TemplatesConfig)
    variant: str = "layerwise"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def replace(self, **dotted: Any) -> "PipelineConfig":
        """Copy with ``{"section.key": value}`` overrides applied and validated."""
        cfg = PipelineConfig(**{f.name: dataclasses.replace(getattr(self, f.name))
                                if dataclasses.is_dataclass(getattr(self, f.name)) else getattr(self, f.name)
                                for f in dataclasses.fields(self)})
        for key, value in dotted.items():
            _set(cfg, key, value, source="override")
        validate(cfg)
        return cfg


def _sections() -> dict[str, type]:
    return {f.name: f.type for f in dataclasses.fields(PipelineConfig) if f.name != "variant"}


def _coerce(value: Any, typ: str, key: str, from_env: bool) -> Any:
    if from_env and isinstance(value, str):
        try:
            if typ == "bool":
                low = value.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(value)
                return low in ("1", "true", "yes")
            if typ == "int":
                return int(value)
            if typ == "float":
                return float(value)
        except ValueError:
            raise ConfigError(f"{key}: expected {typ}, got {value!r}") from None
        return value
    ok = {
        "bool": isinstance(value, bool),
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "str": isinstance(value, str),
    }[typ]
    if not ok:
        raise ConfigError(f"{key}: expected {typ}, got {type(value).__name__} {value!r}")
    return float(value) if typ == "float" else value


def _set(cfg: PipelineConfig, key: str, value: Any, source: str, from_env: bool = False):
    if key == "variant":
        cfg.variant = _coerce(value, "str", key, from_env)
        return
    section, _, name = key.partition(".")
    if section not in _sections() or not name:
        raise ConfigError(f"{key}: unknown config key ({source})")
    obj = getattr(cfg, section)
    types = {f.name: f.type for f in dataclasses.fields(obj)}
    if name not in types:
        raise ConfigError(f"{key}: unknown config key ({source})")
    setattr(obj, name, _coerce(value, types[name], key, from_env))


def validate(cfg: PipelineConfig) -> PipelineConfig:
    def positive(key, v):
        if v <= 0:
            raise ConfigError(f"{key}: must be positive, got {v!r}")

    g = cfg.gateway
    if g.mode not in ("http", "mock"):
        raise ConfigError(f"gateway.mode: must be 'http' or 'mock', got {g.mode!r}")
    if g.mock_policy not in ("echo", "error"):
        raise ConfigError(f"gateway.mock_policy: must be 'echo' or 'error', got {g.mock_policy!r}")
    positive("gateway.timeout_s", g.timeout_s)
    positive("gateway.max_concurrency", g.max_concurrency)
    if g.max_retries < 0:
        raise ConfigError(f"gateway.max_retries: must be >= 0, got {g.max_retries!r}")
    if cfg.extraction.strategy not in STRATEGIES:
        raise ConfigError(f"extraction.strategy: must be one of {STRATEGIES}, got {cfg.extraction.strategy!r}")
    positive("retrieval.k", cfg.retrieval.k)
    positive("retrieval.chunk_size", cfg.retrieval.chunk_size)
    if not 0 <= cfg.retrieval.chunk_overlap < cfg.retrieval.chunk_size:
        raise ConfigError("retrieval.chunk_overlap: must be in [0, retrieval.chunk_size)")
    if not 0.0 <= cfg.dedup.threshold <= 1.0:
        raise ConfigError(f"dedup.threshold: must be in [0, 1], got {cfg.dedup.threshold!r}")
    positive("summarize.top_candidates", cfg.summarize.top_candidates)
    positive("summarize.neighbor_cap", cfg.summarize.neighbor_cap)
    if cfg.summarize.strategy not in ("layerwise", "subgraph", "semantic"):
        raise ConfigError(f"summarize.strategy: unknown strategy {cfg.summarize.strategy!r}")
    positive("context.limit_tokens", cfg.context.limit_tokens)
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant: must be one of {VARIANTS}, got {cfg.variant!r}")
    return cfg


def _flatten(data: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        out[rest.replace("__", ".", 1)] = value
    return out


def load_config(path: str | Path | None = None, environ: Mapping[str, str] | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML ({exc})") from None
        for key, value in _flatten(data).items():
            _set(cfg, key, value, source=str(path))
    for key, value in env_overrides(environ).items():
        _set(cfg, key, value, source="environment", from_env=True)
    return validate(cfg)


def dump_config(cfg: PipelineConfig) -> str:
    """Effective configuration as TOML."""
    lines = [f'variant = {json.dumps(cfg.variant)}', ""]
    for section in _sections():
        lines.append(f"[{section}]")
        for k, v in dataclasses.asdict(getattr(cfg, section)).items():
            lines.append(f"{k} = {json.dumps(v)}")
        lines.append("")
    return "\n".join(lines)
