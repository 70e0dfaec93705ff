"""Consistency filtering and the teacher-student retriever curriculum.

The loop: BM25-consistent seed pairs warm up the dense retriever; each later
round ranks the remaining generated pairs with the current retriever, adds
the ones it recalls poorly but not hopelessly (``k_pass < rank <= k_bad``)
to the training set and continues training from the previous weights.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from sklearn.base import BaseEstimator

from .corpus import Corpus, Provenance, QDPair, Query
from .dense import DenseIndex, build_dense, dense_topk
from .encoder import NegativeMiningError, TrainableEncoder, TrainBatch, sample_negatives, train_step
from .evalkit import retrieval_metrics
from .sparse import InvertedIndex, RankedList, bm25_rank_of, bm25_topk, build_sparse
from .validation import check_fitted, check_positive_int, query_text

logger = logging.getLogger(__name__)


class CurriculumError(RuntimeError):
    pass


@dataclass(frozen=True)
class FilterPolicy:
    k_keep: int = 3
    k_pass: int = 3
    k_bad: int = 100

    def __post_init__(self):
        if not 1 <= self.k_pass <= self.k_keep <= self.k_bad:
            raise ValueError(f"need 1 <= k_pass <= k_keep <= k_bad, got {self}")


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 64
    lr: float = 2e-5
    k_neg: int = 7
    pool: int = 1000
    epochs: int = 1
    max_len: int = 350
    n_seed: int = 1000
    seed: int = 0
    temperature: float = 1.0
    full_rank_limit: int = 10_000


@dataclass
class IterationStats:
    iteration: int
    pool_size: int
    added: int
    excluded: int
    trainset_size: int
    heldout_recall: Optional[float]
    loss_mean: float

    def row(self):
        recall = "" if self.heldout_recall is None else f"{self.heldout_recall:.6f}"
        return [self.iteration, self.pool_size, self.added, self.excluded, self.trainset_size, recall,
                f"{self.loss_mean:.6f}"]


HISTORY_HEADER = ["iteration", "pool_size", "added", "excluded", "trainset_size", "heldout_recall@10", "loss_mean"]


@dataclass
class CurriculumState:
    iteration: int = 0
    train_set: Dict[Tuple[str, str], QDPair] = field(default_factory=dict)
    encoder_checkpoint: Optional[TrainableEncoder] = None
    history: List[IterationStats] = field(default_factory=list)
    status: str = "running"
    trainset_sizes: List[int] = field(default_factory=list)

    def write_history(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(HISTORY_HEADER)
            for s in self.history:
                w.writerow(s.row())


@dataclass
class FilterResult:
    kept: List[QDPair]
    rejected: List[QDPair]
    reasons: Dict[Tuple[str, str], str] = field(default_factory=dict)


def consistency_filter(retriever: Callable[[Query, int], RankedList], pairs: Sequence[QDPair],
                       k_keep: int = 3) -> FilterResult:
    """Keep a pair iff its source document is in the retriever's top ``k_keep`` for its query."""
    check_positive_int(k_keep, "k_keep")
    out = FilterResult([], [])
    for p in pairs:
        try:
            top = [d for d, _ in retriever(p.query, k_keep)]
        except Exception as exc:  # noqa: BLE001 - any retriever failure rejects just this pair
            out.rejected.append(p)
            out.reasons[p.key] = f"retriever error: {exc}"
            continue
        if p.doc_id in top:
            out.kept.append(p)
        else:
            out.rejected.append(p)
            out.reasons[p.key] = f"source not in top-{k_keep}"
    return out


def select_seed(sparse: InvertedIndex, pairs: Sequence[QDPair], n_seed: int = 1000, k_keep: int = 3) -> List[QDPair]:
    """BM25-consistent pairs, best-ranked first (then doc_id, query id), at most ``n_seed``."""
    check_positive_int(n_seed, "n_seed")
    scored = []
    for p in pairs:
        r = bm25_rank_of(sparse, p.query, p.doc_id)
        if r is not None and r <= k_keep:
            scored.append((r, p.doc_id, p.query.id, p))
    if not scored:
        raise CurriculumError("no generated pair survives BM25 consistency filtering; cannot warm up")
    scored.sort(key=lambda t: t[:3])
    return [p.with_provenance(Provenance.SEED) for *_, p in scored[:n_seed]]


class DenseRetriever:
    """Encoder + dense index, with BM25 candidate pre-filtering for large corpora."""

    def __init__(self, encoder: TrainableEncoder, index: DenseIndex, sparse: Optional[InvertedIndex] = None,
                 full_rank_limit: int = 10_000, pool: int = 1000):
        self.encoder = encoder
        self.index = index
        self.sparse = sparse
        self.full_rank_limit = full_rank_limit
        self.pool = pool

    @classmethod
    def build(cls, encoder: TrainableEncoder, corpus: Corpus, sparse=None, **kw) -> "DenseRetriever":
        return cls(encoder, build_dense(encoder, corpus), sparse, **kw)

    def _candidates(self, q) -> Optional[Set[str]]:
        if self.sparse is None or len(self.index) <= self.full_rank_limit:
            return None
        return {d for d, _ in bm25_topk(self.sparse, q, self.pool)}

    def search(self, query, k: int = 10) -> RankedList:
        qv = self.encoder.encode(query_text(query))
        return dense_topk(self.index, qv, k, self._candidates(query))

    __call__ = search

    def rank_of(self, query, doc_id: str) -> int:
        qv = self.encoder.encode(query_text(query))
        cands = self._candidates(query)
        if cands is None:
            return self.index.rank_of(qv, doc_id)
        cands.add(doc_id)
        ranked = dense_topk(self.index, qv, len(cands), cands)
        return [d for d, _ in ranked].index(doc_id) + 1


@dataclass
class Selection:
    selected: List[QDPair]
    excluded: List[QDPair]
    learned: List[QDPair]
    skipped: List[QDPair]
    ranks: Dict[Tuple[str, str], int] = field(default_factory=dict)
    reasons: Dict[Tuple[str, str], str] = field(default_factory=dict)


def select_next(ranker, pairs: Sequence[QDPair], policy: FilterPolicy, already: Set[Tuple[str, str]] = frozenset()
                ) -> Selection:
    """Partition ``pairs`` by the source document's rank under ``ranker``.

    ``ranker`` is either an object with ``rank_of(query, doc_id)`` or such a
    callable. Pairs already in the training set land in ``skipped``.
    """
    rank_of = getattr(ranker, "rank_of", ranker)
    out = Selection([], [], [], [])
    for p in pairs:
        if p.key in already:
            out.skipped.append(p)
            continue
        r = int(rank_of(p.query, p.doc_id))
        out.ranks[p.key] = r
        if r <= policy.k_pass:
            out.learned.append(p)
        elif r <= policy.k_bad:
            out.selected.append(p)
        else:
            out.excluded.append(p)
            out.reasons[p.key] = f"rank {r} > k_bad={policy.k_bad}"
    return out


class _Trainer:
    """Runs epochs of per-pair Adam steps with cached BM25 negative pools."""

    def __init__(self, encoder: TrainableEncoder, corpus: Corpus, sparse: InvertedIndex, cfg: TrainConfig):
        self.encoder = encoder
        self.corpus = corpus
        self.sparse = sparse
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self._pools: Dict[str, List[str]] = {}

    def _pool(self, q: Query) -> List[str]:
        cands = self._pools.get(q.text)
        if cands is None:
            cands = [d for d, _ in bm25_topk(self.sparse, q, self.cfg.pool)]
            self._pools[q.text] = cands
        return cands

    def fit(self, pairs: Sequence[QDPair]) -> float:
        losses = []
        for _ in range(self.cfg.epochs):
            for i in self.rng.permutation(len(pairs)):
                p = pairs[i]
                try:
                    negs, short = sample_negatives(self._pool(p.query), p.doc_id, self.cfg.k_neg, self.rng)
                except NegativeMiningError as exc:
                    logger.debug("skipping %s: %s", p.key, exc)
                    continue
                train_step(self.encoder, TrainBatch(p.query, p.doc_id, negs, short), self.cfg.lr, self.corpus)
                losses.append(self.encoder.last_loss_)
        return float(np.mean(losses)) if losses else float("nan")


def heldout_recall(retriever, queries: Sequence[Query], qrels: Mapping[str, Set[str]], cutoff: int = 10) -> float:
    runs = {q.id: retriever.search(q, cutoff) for q in queries}
    return retrieval_metrics(runs, {q.id: qrels[q.id] for q in queries}, cutoff)["recall"]


def new_encoder(corpus: Corpus, pairs: Sequence[QDPair], cfg: TrainConfig, extra_texts=()) -> TrainableEncoder:
    """Untrained encoder whose vocabulary covers the corpus and every question."""
    texts = [d.text for d in corpus] + [p.query.text for p in pairs] + list(extra_texts)
    return TrainableEncoder(dim=cfg.dim, max_len=cfg.max_len, random_state=cfg.seed,
                            temperature=cfg.temperature).fit(texts)


def train_on_pairs(corpus: Corpus, sparse: InvertedIndex, pairs: Sequence[QDPair], cfg: TrainConfig,
                   encoder: Optional[TrainableEncoder] = None) -> TrainableEncoder:
    """Plain (non-curriculum) training on a fixed pair list."""
    encoder = encoder or new_encoder(corpus, pairs, cfg)
    _Trainer(encoder, corpus, sparse, cfg).fit(list(pairs))
    return encoder


def run_curriculum(corpus: Corpus, sparse: InvertedIndex, pairs: Sequence[QDPair], policy: FilterPolicy = FilterPolicy(),
                   T: int = 3, train_cfg: TrainConfig = TrainConfig(), heldout: Sequence[Query] = (),
                   heldout_qrels: Optional[Mapping[str, Set[str]]] = None,
                   encoder: Optional[TrainableEncoder] = None) -> CurriculumState:
    check_positive_int(T, "T")
    cfg = train_cfg
    t0 = time.perf_counter()
    state = CurriculumState()
    pool = list(pairs)

    def evaluate(enc) -> Optional[float]:
        if not heldout:
            return None
        return heldout_recall(DenseRetriever.build(enc, corpus, sparse, full_rank_limit=cfg.full_rank_limit,
                                                   pool=cfg.pool), heldout, heldout_qrels)

    seed = select_seed(sparse, pool, cfg.n_seed, policy.k_keep)
    for p in seed:
        state.train_set[p.key] = p
    enc = encoder or new_encoder(corpus, pool, cfg, [q.text for q in heldout])
    trainer = _Trainer(enc, corpus, sparse, cfg)
    loss = trainer.fit(list(state.train_set.values()))
    state.iteration = 1
    state.encoder_checkpoint = enc
    state.trainset_sizes.append(len(state.train_set))
    state.history.append(IterationStats(1, len(pool), len(seed), 0, len(state.train_set), evaluate(enc), loss))
    logger.info("iteration 1: %d seed pairs, loss %.4f (%.1fs)", len(seed), loss, time.perf_counter() - t0)

    for t in range(2, T + 1):
        ranker = DenseRetriever.build(enc, corpus, sparse, full_rank_limit=cfg.full_rank_limit, pool=cfg.pool)
        sel = select_next(ranker, pool, policy, set(state.train_set))
        if not sel.selected:
            state.status = f"stopped at iteration {t}: no pairs selected"
            logger.info(state.status)
            break
        for p in sel.selected:
            state.train_set[p.key] = p
        loss = trainer.fit(list(state.train_set.values()))
        state.iteration = t
        state.trainset_sizes.append(len(state.train_set))
        state.history.append(IterationStats(t, len(pool), len(sel.selected), len(sel.excluded),
                                            len(state.train_set), evaluate(enc), loss))
        logger.info("iteration %d: +%d pairs, %d excluded, loss %.4f (%.1fs)", t, len(sel.selected),
                    len(sel.excluded), loss, time.perf_counter() - t0)
    else:
        state.status = "completed"
    return state


class CurriculumRetriever(BaseEstimator):
    """Estimator front for the curriculum: ``fit(corpus, pairs)`` then ``search``/``predict``."""

    def __init__(self, T: int = 3, n_seed: int = 1000, k_keep: int = 3, k_pass: int = 3, k_bad: int = 100,
                 dim: int = 64, lr: float = 2e-5, k_neg: int = 7, pool: int = 1000, epochs: int = 1,
                 max_len: int = 350, k1: float = 0.9, b: float = 0.4, random_state: int = 0):
        self.T = T
        self.n_seed = n_seed
        self.k_keep = k_keep
        self.k_pass = k_pass
        self.k_bad = k_bad
        self.dim = dim
        self.lr = lr
        self.k_neg = k_neg
        self.pool = pool
        self.epochs = epochs
        self.max_len = max_len
        self.k1 = k1
        self.b = b
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig(dim=self.dim, lr=self.lr, k_neg=self.k_neg, pool=self.pool, epochs=self.epochs,
                           max_len=self.max_len, n_seed=self.n_seed, seed=self.random_state)

    def fit(self, corpus: Corpus, pairs: Sequence[QDPair], heldout: Sequence[Query] = (), heldout_qrels=None):
        self.sparse_ = build_sparse(corpus, self.k1, self.b)
        policy = FilterPolicy(self.k_keep, self.k_pass, self.k_bad)
        self.state_ = run_curriculum(corpus, self.sparse_, pairs, policy, self.T, self.train_config(),
                                     heldout, heldout_qrels)
        self.encoder_ = self.state_.encoder_checkpoint
        self.retriever_ = DenseRetriever.build(self.encoder_, corpus, self.sparse_, pool=self.pool)
        return self

    def search(self, query, k: int = 10) -> RankedList:
        check_fitted(self, "retriever_")
        return self.retriever_.search(query, k)

    def predict(self, queries: Sequence[Query], k: int = 10) -> List[RankedList]:
        return [self.search(q, k) for q in queries]
