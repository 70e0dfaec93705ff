"""Pipeline configuration: TOML sections mapped onto validated dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import tomli

from .curriculum import FilterPolicy, TrainConfig
from .llm import ENDPOINT_ENV
from .validation import check_positive_int


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSection:
    path: str = "corpus.jsonl"
    min_words: int = 50


@dataclass
class SparseSection:
    k1: float = 0.9
    b: float = 0.4


@dataclass
class DenseSection:
    dim: int = 64
    lr: float = 2e-5
    k_neg: int = 7
    pool: int = 1000
    epochs: int = 1
    max_len: int = 350
    full_rank_limit: int = 10_000


@dataclass
class CurriculumSection:
    n_seed: int = 1000
    T: int = 3
    k_keep: int = 3
    k_pass: int = 3
    k_bad: int = 100


@dataclass
class QgenSection:
    templates: str = "fact,solution"
    per_doc: int = 3
    max_tokens: int = 256
    temperature: float = 0.8
    concurrency: int = 4


@dataclass
class GenerationSection:
    k: int = 5
    max_rounds: int = 2
    irrelevance_marker: str = "irrelevant"
    concurrency: int = 4
    max_tokens: int = 512


@dataclass
class ClientSection:
    # "http" talks to a completion server; "synthetic" uses the offline mocks
    kind: str = "http"
    endpoint: str = "http://127.0.0.1:8000"
    timeout: float = 60.0
    synthetic_meta: str = ""


@dataclass
class EvalSection:
    queries: str = ""
    qrels: str = ""
    gold_answers: str = ""
    cutoff: int = 10
    retriever: str = "dense"


@dataclass
class ExportSection:
    annotated_pairs: str = ""
    qa_pairs: str = ""
    k: int = 5


@dataclass
class RunSection:
    root: str = "runs"
    seed: int = 0


SECTIONS = {
    "corpus": CorpusSection, "sparse": SparseSection, "dense": DenseSection, "curriculum": CurriculumSection,
    "qgen": QgenSection, "generation": GenerationSection, "client": ClientSection, "eval": EvalSection,
    "export": ExportSection, "run": RunSection,
}


@dataclass
class PipelineConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    sparse: SparseSection = field(default_factory=SparseSection)
    dense: DenseSection = field(default_factory=DenseSection)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    qgen: QgenSection = field(default_factory=QgenSection)
    generation: GenerationSection = field(default_factory=GenerationSection)
    client: ClientSection = field(default_factory=ClientSection)
    eval: EvalSection = field(default_factory=EvalSection)
    export: ExportSection = field(default_factory=ExportSection)
    run: RunSection = field(default_factory=RunSection)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            self.filter_policy()
            self.train_config()
            if not self.sparse.k1 > 0 or not 0 <= self.sparse.b <= 1:
                raise ValueError("sparse.k1 must be > 0 and sparse.b in [0, 1]")
            if self.corpus.min_words < 0:
                raise ValueError("corpus.min_words must be >= 0")
            for name in ("T", "n_seed"):
                check_positive_int(getattr(self.curriculum, name), f"curriculum.{name}")
            for name in ("dim", "k_neg", "pool", "epochs", "max_len", "full_rank_limit"):
                check_positive_int(getattr(self.dense, name), f"dense.{name}")
            if not self.dense.lr > 0:
                raise ValueError("dense.lr must be > 0")
            for name in ("k", "max_rounds", "concurrency", "max_tokens"):
                check_positive_int(getattr(self.generation, name), f"generation.{name}")
            for name in ("per_doc", "max_tokens", "concurrency"):
                check_positive_int(getattr(self.qgen, name), f"qgen.{name}")
            check_positive_int(self.eval.cutoff, "eval.cutoff")
            check_positive_int(self.export.k, "export.k")
            if not self.generation.irrelevance_marker.strip():
                raise ValueError("generation.irrelevance_marker must be non-empty")
            if self.client.kind not in ("http", "synthetic"):
                raise ValueError(f"client.kind must be 'http' or 'synthetic', got {self.client.kind!r}")
            if not self.client.timeout > 0:
                raise ValueError("client.timeout must be > 0")
            if self.eval.retriever not in ("dense", "sparse"):
                raise ValueError(f"eval.retriever must be 'dense' or 'sparse', got {self.eval.retriever!r}")
            from .qgen import get_template

            for name in self.template_names():
                get_template(name)
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None

    def template_names(self):
        return [t.strip() for t in self.qgen.templates.split(",") if t.strip()]

    def filter_policy(self) -> FilterPolicy:
        c = self.curriculum
        return FilterPolicy(c.k_keep, c.k_pass, c.k_bad)

    def train_config(self) -> TrainConfig:
        d = self.dense
        return TrainConfig(dim=d.dim, lr=d.lr, k_neg=d.k_neg, pool=d.pool, epochs=d.epochs, max_len=d.max_len,
                           n_seed=self.curriculum.n_seed, seed=self.run.seed, full_rank_limit=d.full_rank_limit)

    def resolve(self, path: str) -> Optional[Path]:
        """Config paths are relative to the config file; empty means unset."""
        if not path:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def endpoint(self) -> str:
        return os.environ.get(ENDPOINT_ENV) or self.client.endpoint

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def run_dir(self) -> Path:
        return self.resolve(self.run.root) / self.hash()[:12]


def _coerce(key: str, default, value):
    if isinstance(value, bool):
        raise ConfigError(f"{key} must be {type(default).__name__}, got {value!r}")
    if isinstance(default, float) and isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, type(default)):
        return value
    raise ConfigError(f"{key} must be {type(default).__name__}, got {value!r}")


def from_dict(data: Dict[str, Any], base_dir=".") -> PipelineConfig:
    sections = {}
    for name, value in data.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        if not isinstance(value, dict):
            raise ConfigError(f"[{name}] must be a table")
        cls = SECTIONS[name]
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key in value:
            if key not in known:
                raise ConfigError(f"unknown config key {name}.{key}")
        sections[name] = cls(**{k: _coerce(f"{name}.{k}", known[k].default, v) for k, v in value.items()})
    return PipelineConfig(**sections, base_dir=Path(base_dir))


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        with open(path, "rb") as f:
            data = tomli.load(f)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data, path.parent)


def describe_keys() -> str:
    """One line per config key with its default, for ``--help``."""
    lines = []
    for name, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            lines.append(f"  {name}.{f.name} = {json.dumps(f.default)}")
    return "\n".join(lines)
