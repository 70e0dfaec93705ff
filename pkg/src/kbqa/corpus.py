"""Document collection, tokenization and question-document pair records."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional

logger = logging.getLogger(__name__)

_WORD = re.compile(r"[^\W_]+")


class CorpusError(ValueError):
    """Raised for malformed corpus or pair files."""


def tokenize(text: str) -> List[str]:
    """Lowercase and split on whitespace and punctuation boundaries.

    >>> tokenize("Real-Time Strategy")
    ['real', 'time', 'strategy']
    """
    return _WORD.findall(text.lower())


Tokenizer = Callable[[str], List[str]]


class QType(str, Enum):
    FACT = "fact"
    SOLUTION_SHORT = "solution_short"
    SOLUTION_LONG = "solution_long"
    UNKNOWN = "unknown"


class Provenance(str, Enum):
    ANNOTATED = "annotated"
    GENERATED = "generated"
    SEED = "seed"


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    token_count: int
    meta: Dict[str, str] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"id": self.id, "text": self.text, "token_count": self.token_count, "meta": dict(sorted(self.meta.items()))}


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    qtype: QType = QType.UNKNOWN

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"query {self.id!r} has empty text")
        object.__setattr__(self, "qtype", QType(self.qtype))


@dataclass(frozen=True)
class QDPair:
    query: Query
    doc_id: str
    provenance: Provenance = Provenance.GENERATED

    def __post_init__(self):
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    @property
    def key(self):
        return (self.query.id, self.doc_id)

    def with_provenance(self, provenance) -> "QDPair":
        return QDPair(self.query, self.doc_id, Provenance(provenance))

    def to_record(self) -> dict:
        return {
            "query_id": self.query.id,
            "query_text": self.query.text,
            "qtype": self.query.qtype.value,
            "doc_id": self.doc_id,
            "provenance": self.provenance.value,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "QDPair":
        q = Query(str(rec["query_id"]), rec["query_text"], QType(rec.get("qtype", "unknown")))
        return cls(q, str(rec["doc_id"]), Provenance(rec.get("provenance", "generated")))


@dataclass
class IngestReport:
    kept: int = 0
    dropped: int = 0

    @property
    def total(self) -> int:
        return self.kept + self.dropped


class Corpus:
    """Ordered, id-unique document collection.

    A corpus is treated as immutable once built; ``add`` is only used while
    constructing it.
    """

    def __init__(self, documents: Iterable[Document] = (), tokenizer: Optional[Tokenizer] = None):
        self.tokenizer = tokenizer or tokenize
        self._docs: List[Document] = []
        self._by_id: Dict[str, Document] = {}
        self.report = IngestReport()
        for doc in documents:
            self.add(doc)

    @classmethod
    def from_texts(cls, items, tokenizer: Optional[Tokenizer] = None) -> "Corpus":
        """Build from ``(id, text)`` pairs or ``(id, text, meta)`` triples."""
        corpus = cls(tokenizer=tokenizer)
        for item in items:
            doc_id, text, *rest = item
            meta = rest[0] if rest else {}
            corpus.add(Document(str(doc_id), text, len(corpus.tokenizer(text)), dict(meta)))
        corpus.report.kept = len(corpus)
        return corpus

    def add(self, doc: Document) -> None:
        if doc.id in self._by_id:
            raise CorpusError(f"duplicate document id {doc.id!r}")
        self._docs.append(doc)
        self._by_id[doc.id] = doc

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs)

    def __contains__(self, doc_id) -> bool:
        return doc_id in self._by_id

    def __getitem__(self, doc_id: str) -> Document:
        return self._by_id[doc_id]

    @property
    def ids(self) -> List[str]:
        return [d.id for d in self._docs]

    def tokens(self, doc_id: str) -> List[str]:
        return self.tokenizer(self._by_id[doc_id].text)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for doc in self._docs:
                f.write(json.dumps(doc.to_record(), ensure_ascii=False) + "\n")


def _read_jsonl(path) -> Iterator[tuple]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: line {lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusError(f"{path}: line {lineno}: record is not an object")
            yield lineno, rec


def ingest(path, min_words: int = 50, tokenizer: Optional[Tokenizer] = None) -> Corpus:
    """Read a JSONL corpus, keeping documents with at least ``min_words`` tokens.

    Input order is preserved. ``corpus.report`` holds kept/dropped counts.
    """
    if min_words < 0:
        raise ValueError("min_words must be >= 0")
    corpus = Corpus(tokenizer=tokenizer)
    seen = set()
    for lineno, rec in _read_jsonl(path):
        try:
            doc_id, text = str(rec["id"]), rec["text"]
        except KeyError as exc:
            raise CorpusError(f"{path}: line {lineno}: missing field {exc.args[0]!r}") from None
        if not isinstance(text, str):
            raise CorpusError(f"{path}: line {lineno}: field 'text' must be a string")
        meta = rec.get("meta") or {}
        if not isinstance(meta, dict):
            raise CorpusError(f"{path}: line {lineno}: field 'meta' must be an object")
        if doc_id in seen:
            raise CorpusError(f"{path}: line {lineno}: duplicate document id {doc_id!r}")
        seen.add(doc_id)
        n = len(corpus.tokenizer(text))
        if n < min_words:
            corpus.report.dropped += 1
            continue
        corpus.add(Document(doc_id, text, n, {str(k): str(v) for k, v in meta.items()}))
        corpus.report.kept += 1
    logger.info("ingested %s: kept %d, dropped %d", path, corpus.report.kept, corpus.report.dropped)
    return corpus


def save_pairs(pairs: Iterable[QDPair], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in pairs:
            f.write(json.dumps(p.to_record(), ensure_ascii=False) + "\n")


def load_pairs(path, corpus: Optional[Corpus] = None) -> List[QDPair]:
    pairs = []
    for lineno, rec in _read_jsonl(path):
        try:
            pair = QDPair.from_record(rec)
        except (KeyError, ValueError) as exc:
            raise CorpusError(f"{path}: line {lineno}: bad pair record ({exc})") from None
        if corpus is not None and pair.doc_id not in corpus:
            raise CorpusError(f"{path}: line {lineno}: unknown doc_id {pair.doc_id!r}")
        pairs.append(pair)
    return pairs


def save_queries(queries: Iterable[Query], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for q in queries:
            f.write(json.dumps({"id": q.id, "text": q.text, "qtype": q.qtype.value}, ensure_ascii=False) + "\n")


def load_queries(path) -> List[Query]:
    """JSONL with ``id`` and ``text``; ``qtype`` defaults to unknown."""
    out, seen = [], set()
    for lineno, rec in _read_jsonl(path):
        try:
            q = Query(str(rec["id"]), rec["text"], QType(rec.get("qtype", QType.UNKNOWN.value)))
        except (KeyError, ValueError) as exc:
            raise CorpusError(f"{path}: line {lineno}: bad query record ({exc})") from None
        if q.id in seen:
            raise CorpusError(f"{path}: line {lineno}: duplicate query id {q.id!r}")
        seen.add(q.id)
        out.append(q)
    return out


def ensure_path(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p
