"""Okapi BM25 inverted index (Lucene-style non-negative idf)."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator

from .corpus import Corpus, Query, tokenize
from .validation import check_fitted, check_positive_int, query_text

RankedList = List[Tuple[str, float]]


@dataclass
class InvertedIndex:
    postings: Dict[str, List[Tuple[str, int]]]
    doc_lengths: Dict[str, int]
    avg_doc_length: float
    doc_count: int
    k1: float = 0.9
    b: float = 0.4
    tokenizer: object = field(default=tokenize, repr=False, compare=False)

    def __post_init__(self):
        # doc ids in ascending order give the tie-break order
        self._ids = sorted(self.doc_lengths)
        self._pos = {d: i for i, d in enumerate(self._ids)}
        self._weights: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))

    def _term_weights(self, term: str):
        cached = self._weights.get(term)
        if cached is None:
            plist = self.postings.get(term)
            if not plist:
                cached = (np.empty(0, dtype=np.intp), np.empty(0))
            else:
                idx = np.fromiter((self._pos[d] for d, _ in plist), dtype=np.intp, count=len(plist))
                tf = np.array([t for _, t in plist], dtype=float)
                dl = np.array([self.doc_lengths[d] for d, _ in plist], dtype=float)
                norm = self.k1 * (1.0 - self.b + self.b * dl / self.avg_doc_length)
                cached = (idx, self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm))
            self._weights[term] = cached
        return cached

    def score_all(self, terms: Sequence[str]):
        """Return (scores over sorted doc ids, matched mask)."""
        scores = np.zeros(len(self._ids))
        matched = np.zeros(len(self._ids), dtype=bool)
        for t in terms:
            idx, w = self._term_weights(t)
            scores[idx] += w
            matched[idx] = True
        return scores, matched

    def save(self, path) -> None:
        """JSON dump of the postings; the tokenizer is not stored."""
        rec = {"format": 1, "k1": self.k1, "b": self.b, "avg_doc_length": self.avg_doc_length,
               "doc_count": self.doc_count, "doc_lengths": self.doc_lengths,
               "postings": {t: [[d, tf] for d, tf in pl] for t, pl in self.postings.items()}}
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(rec, f, ensure_ascii=False, sort_keys=True)

    @classmethod
    def load(cls, path, tokenizer=tokenize) -> "InvertedIndex":
        with open(path, encoding="utf-8") as f:
            rec = json.load(f)
        if rec.get("format") != 1:
            raise ValueError(f"{path}: unsupported sparse index format {rec.get('format')!r}")
        postings = {t: [(d, int(tf)) for d, tf in pl] for t, pl in rec["postings"].items()}
        return cls(postings, {d: int(n) for d, n in rec["doc_lengths"].items()}, float(rec["avg_doc_length"]),
                   int(rec["doc_count"]), float(rec["k1"]), float(rec["b"]), tokenizer)


def build_sparse(corpus: Corpus, k1: float = 0.9, b: float = 0.4) -> InvertedIndex:
    if len(corpus) == 0:
        raise ValueError("cannot index an empty corpus")
    if not k1 > 0:
        raise ValueError("k1 must be > 0")
    if not 0 <= b <= 1:
        raise ValueError("b must be in [0, 1]")
    postings: Dict[str, List[Tuple[str, int]]] = {}
    lengths: Dict[str, int] = {}
    for doc in corpus:
        toks = corpus.tokenizer(doc.text)
        lengths[doc.id] = len(toks)
        for term, tf in Counter(toks).items():
            postings.setdefault(term, []).append((doc.id, tf))
    for plist in postings.values():
        plist.sort()
    avg = sum(lengths.values()) / len(lengths)
    if avg <= 0:
        raise ValueError("corpus has no tokens")
    return InvertedIndex(dict(sorted(postings.items())), lengths, avg, len(lengths), k1, b, corpus.tokenizer)


def _rank(ids: Sequence[str], scores: np.ndarray, cand: np.ndarray, k: int) -> RankedList:
    # candidates are positions into the sorted id list, so a stable sort
    # on -score keeps ascending doc_id among ties
    order = cand[np.argsort(-scores[cand], kind="stable")][:k]
    return [(ids[i], float(scores[i])) for i in order]


def bm25_topk(index: InvertedIndex, query, k: int = 10) -> RankedList:
    """Top-``k`` documents by BM25, score descending, ties by ascending doc_id.

    Repeated query terms contribute once per occurrence. Documents sharing no
    term with the query are never returned.
    """
    check_positive_int(k, "k")
    terms = index.tokenizer(query_text(query))
    if not terms:
        return []
    scores, matched = index.score_all(terms)
    return _rank(index._ids, scores, np.flatnonzero(matched), k)


def bm25_rank_of(index: InvertedIndex, query, doc_id: str) -> Optional[int]:
    """1-based rank of ``doc_id`` under bm25_topk ordering, None if unmatched."""
    terms = index.tokenizer(query_text(query))
    scores, matched = index.score_all(terms)
    pos = index._pos[doc_id]
    if not matched[pos]:
        return None
    s = scores[pos]
    ahead = np.count_nonzero(matched & (scores > s))
    ties = np.count_nonzero(matched[:pos] & (scores[:pos] == s))
    return int(ahead + ties + 1)


class BM25Retriever(BaseEstimator):
    """Estimator wrapper: ``fit(corpus)`` then ``search`` / ``predict``."""

    def __init__(self, k1: float = 0.9, b: float = 0.4):
        self.k1 = k1
        self.b = b

    def fit(self, corpus: Corpus, y=None):
        self.index_ = build_sparse(corpus, self.k1, self.b)
        return self

    def search(self, query, k: int = 10) -> RankedList:
        check_fitted(self, "index_")
        return bm25_topk(self.index_, query, k)

    def predict(self, queries: Sequence[Query], k: int = 10) -> List[RankedList]:
        return [self.search(q, k) for q in queries]

    def rank_of(self, query, doc_id: str) -> Optional[int]:
        check_fitted(self, "index_")
        return bm25_rank_of(self.index_, query, doc_id)
