"""Trainable token encoder, InfoNCE objective and BM25 negative mining.

The encoder is a lookup table followed by a square linear projection, so a
text's token matrix is ``table[ids] @ projection.T``. It is small enough to
train on a laptop CPU while keeping the cosine MaxSim score and the InfoNCE
objective exact; gradients are derived by hand.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .corpus import Corpus, QDPair, Query, tokenize
from .sparse import InvertedIndex, bm25_topk
from .validation import check_fitted, check_positive_int

logger = logging.getLogger(__name__)

UNK = "<unk>"
CKPT_MAGIC = b"KBQE"
CKPT_FORMAT = 1


class NonFiniteStepError(FloatingPointError):
    """An optimizer step produced NaN/Inf parameters and was rolled back."""


class NegativeMiningError(ValueError):
    pass


@dataclass
class TrainBatch:
    query: Query
    positive: str
    negatives: List[str]
    short: bool = False  # fewer than the requested number of negatives

    def __post_init__(self):
        if self.positive in self.negatives:
            raise ValueError("positive document listed among negatives")
        if len(set(self.negatives)) != len(self.negatives):
            raise ValueError("negatives must be distinct")


@dataclass
class ParameterGradients:
    table: np.ndarray
    projection: np.ndarray
    loss: float
    s_pos: float
    s_negs: List[float] = field(default_factory=list)


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + float(np.log(np.sum(np.exp(x - m))))


def infonce_loss(s_pos: float, s_negs: Sequence[float] = (), temperature: float = 1.0) -> float:
    """``-log softmax`` of the positive score against the negatives."""
    scores = np.concatenate([[s_pos], np.asarray(s_negs, dtype=float).ravel()]) / temperature
    if not np.all(np.isfinite(scores)):
        raise ValueError("InfoNCE scores must be finite")
    return _logsumexp(scores) - scores[0]


def _unit(m: np.ndarray):
    norms = np.linalg.norm(m, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return m / safe[:, None], norms


def _maxsim_backward(Q: np.ndarray, D: np.ndarray):
    """MaxSim score and d(score)/dQ, d(score)/dD.

    The max over document tokens picks the lowest index on exact ties.
    Zero-norm rows have cosine 0 and receive no gradient.
    """
    qn, qnorm = _unit(Q)
    dn, dnorm = _unit(D)
    S = qn @ dn.T
    arg = S.argmax(axis=1)
    rows = np.arange(Q.shape[0])
    cos = S[rows, arg]
    score = float(cos.sum())
    dsel = dn[arg]
    gQ = (dsel - cos[:, None] * qn) / np.where(qnorm > 0, qnorm, np.inf)[:, None]
    gD = np.zeros_like(D)
    contrib = (qn - cos[:, None] * dsel) / np.where(dnorm[arg] > 0, dnorm[arg], np.inf)[:, None]
    np.add.at(gD, arg, contrib)
    return score, gQ, gD


class TrainableEncoder(BaseEstimator, TransformerMixin):
    """Lookup + projection token encoder.

    ``fit(texts)`` builds the vocabulary and initializes parameters;
    ``transform(texts)`` returns one (n_tokens, dim) matrix per text.
    Row 0 of the table is the shared out-of-vocabulary row.
    """

    def __init__(self, dim: int = 64, max_len: int = 350, random_state: int = 0, temperature: float = 1.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, tokenizer=None):
        self.dim = dim
        self.max_len = max_len
        self.random_state = random_state
        self.temperature = temperature
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.tokenizer = tokenizer

    # -- construction -------------------------------------------------
    def fit(self, X: Iterable[str], y=None):
        check_positive_int(self.dim, "dim")
        tok = self.tokenizer or tokenize
        vocab: Dict[str, int] = {UNK: 0}
        for text in X:
            for t in tok(text):
                if t not in vocab:
                    vocab[t] = len(vocab)
        self._init_params(vocab)
        return self

    def _init_params(self, vocab: Dict[str, int]):
        rng = np.random.default_rng(self.random_state)
        self.vocab_ = vocab
        self.embedding_table_ = rng.uniform(-0.5, 0.5, size=(len(vocab), self.dim)) / np.sqrt(self.dim)
        self.projection_ = np.eye(self.dim) + rng.normal(0.0, 0.01, size=(self.dim, self.dim))
        self.version_ = 0
        self._reset_optimizer()

    def _reset_optimizer(self):
        self._m = [np.zeros_like(self.embedding_table_), np.zeros_like(self.projection_)]
        self._v = [np.zeros_like(self.embedding_table_), np.zeros_like(self.projection_)]
        self._t = 0

    @property
    def rng_seed(self) -> int:
        return self.random_state

    @property
    def version_tag(self) -> str:
        return f"lookup-proj/dim={self.dim}/step={self.version_}"

    # -- encoding -----------------------------------------------------
    def token_ids(self, text: str, max_len: Optional[int] = None) -> np.ndarray:
        check_fitted(self, "vocab_")
        toks = (self.tokenizer or tokenize)(text)
        limit = self.max_len if max_len is None else max_len
        if limit:
            toks = toks[:limit]
        if not toks:
            raise ValueError("cannot encode empty text: at least one token is required")
        return np.fromiter((self.vocab_.get(t, 0) for t in toks), dtype=np.intp, count=len(toks))

    def encode(self, text: str, max_len: Optional[int] = None) -> np.ndarray:
        ids = self.token_ids(text, max_len)
        return self.embedding_table_[ids] @ self.projection_.T

    def transform(self, X: Iterable[str]) -> List[np.ndarray]:
        return [self.encode(t) for t in X]

    # -- objective ----------------------------------------------------
    def _loss_and_grads(self, q_ids: np.ndarray, doc_ids: Sequence[np.ndarray], need_grad: bool = True):
        T, P = self.embedding_table_, self.projection_
        Xq = T[q_ids]
        Q = Xq @ P.T
        scores, parts = [], []
        for ids in doc_ids:
            Xd = T[ids]
            D = Xd @ P.T
            s, gQ, gD = _maxsim_backward(Q, D)
            scores.append(s)
            parts.append((ids, Xd, gQ, gD))
        loss = infonce_loss(scores[0], scores[1:], self.temperature)
        if not need_grad:
            return loss, scores, None, None
        z = np.asarray(scores) / self.temperature
        p = np.exp(z - z.max())
        p /= p.sum()
        coef = p.copy()
        coef[0] -= 1.0
        coef /= self.temperature
        gT = np.zeros_like(T)
        gP = np.zeros_like(P)
        gRq = np.zeros_like(Q)
        for c, (ids, Xd, gQ, gD) in zip(coef, parts):
            gRq += c * gQ
            gRd = c * gD
            np.add.at(gT, ids, gRd @ P)
            gP += gRd.T @ Xd
        np.add.at(gT, q_ids, gRq @ P)
        gP += gRq.T @ Xq
        return loss, scores, gT, gP

    def _batch_ids(self, batch: TrainBatch, corpus: Corpus):
        q_ids = self.token_ids(batch.query.text)
        doc_ids = [self.token_ids(corpus[d].text) for d in [batch.positive, *batch.negatives]]
        return q_ids, doc_ids

    def batch_loss(self, batch: TrainBatch, corpus: Corpus) -> float:
        q_ids, doc_ids = self._batch_ids(batch, corpus)
        return self._loss_and_grads(q_ids, doc_ids, need_grad=False)[0]

    # -- optimization -------------------------------------------------
    def apply_gradients(self, grads: ParameterGradients, lr: float) -> None:
        """One Adam step; rolls back and raises if any parameter turns non-finite."""
        if lr < 0:
            raise ValueError("lr must be >= 0")
        t = self._t + 1
        params = [self.embedding_table_, self.projection_]
        new_params, new_m, new_v = [], [], []
        for p, g, m, v in zip(params, [grads.table, grads.projection], self._m, self._v):
            m2 = self.beta1 * m + (1 - self.beta1) * g
            v2 = self.beta2 * v + (1 - self.beta2) * g * g
            mhat = m2 / (1 - self.beta1 ** t)
            vhat = v2 / (1 - self.beta2 ** t)
            new_params.append(p - lr * mhat / (np.sqrt(vhat) + self.eps))
            new_m.append(m2)
            new_v.append(v2)
        if not all(np.all(np.isfinite(a)) for a in new_params + new_m + new_v):
            raise NonFiniteStepError(f"step {self.version_ + 1} produced non-finite values; encoder left unchanged")
        self.embedding_table_, self.projection_ = new_params
        self._m, self._v, self._t = new_m, new_v, t
        self.version_ += 1

    # -- persistence --------------------------------------------------
    def save(self, path) -> None:
        check_fitted(self, "vocab_")
        words = sorted(self.vocab_, key=self.vocab_.get)
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<IQIIIi", CKPT_FORMAT, self.version_, self.dim, len(words), self.max_len or 0,
                                int(self.random_state)))
            f.write(np.ascontiguousarray(self.embedding_table_, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(self.projection_, dtype="<f4").tobytes())
            for w in words:
                raw = w.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)

    @classmethod
    def load(cls, path) -> "TrainableEncoder":
        with open(path, "rb") as f:
            data = f.read()
        if data[:4] != CKPT_MAGIC:
            raise ValueError(f"{path}: not an encoder checkpoint")
        fmt, version, dim, V, max_len, seed = struct.unpack_from("<IQIIIi", data, 4)
        if fmt != CKPT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {fmt}")
        off = 4 + struct.calcsize("<IQIIIi")
        table = np.frombuffer(data, "<f4", V * dim, off).reshape(V, dim).astype(float)
        off += V * dim * 4
        proj = np.frombuffer(data, "<f4", dim * dim, off).reshape(dim, dim).astype(float)
        off += dim * dim * 4
        vocab = {}
        for i in range(V):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            vocab[data[off:off + n].decode("utf-8")] = i
            off += n
        enc = cls(dim=dim, max_len=max_len or None, random_state=seed)
        enc.vocab_, enc.embedding_table_, enc.projection_ = vocab, table, proj
        enc.version_ = version
        enc._reset_optimizer()
        return enc


def encode(encoder: TrainableEncoder, text: str) -> np.ndarray:
    return encoder.encode(text)


def infonce_grad(encoder: TrainableEncoder, batch: TrainBatch, corpus: Corpus) -> ParameterGradients:
    """Analytic gradient of InfoNCE(MaxSim(encode(.))) for one batch."""
    q_ids, doc_ids = encoder._batch_ids(batch, corpus)
    loss, scores, gT, gP = encoder._loss_and_grads(q_ids, doc_ids)
    return ParameterGradients(gT, gP, loss, scores[0], scores[1:])


def train_step(encoder: TrainableEncoder, batch: TrainBatch, lr: float, corpus: Corpus) -> TrainableEncoder:
    """Adam update on one batch, in place. ``encoder.last_loss_`` holds the pre-step loss."""
    grads = infonce_grad(encoder, batch, corpus)
    encoder.apply_gradients(grads, lr)
    encoder.last_loss_ = grads.loss
    return encoder


def sample_negatives(candidates: Sequence[str], positive: str, k_neg: int, rng: np.random.Generator):
    pool = [d for d in candidates if d != positive]
    if not pool:
        raise NegativeMiningError(f"no negative candidates besides the positive {positive!r}")
    if len(pool) <= k_neg:
        return list(pool), len(pool) < k_neg
    picked = rng.choice(len(pool), size=k_neg, replace=False)
    return [pool[i] for i in picked], False


def mine_negatives(sparse: InvertedIndex, pair: QDPair, k_neg: int = 7, pool: int = 1000,
                   rng=0) -> TrainBatch:
    """Uniformly sample ``k_neg`` BM25 top-``pool`` documents other than the positive."""
    check_positive_int(k_neg, "k_neg")
    rng = np.random.default_rng(rng)
    cands = [d for d, _ in bm25_topk(sparse, pair.query, pool)]
    negs, short = sample_negatives(cands, pair.doc_id, k_neg, rng)
    if short:
        logger.debug("query %s: only %d negatives available", pair.query.id, len(negs))
    return TrainBatch(pair.query, pair.doc_id, negs, short)
