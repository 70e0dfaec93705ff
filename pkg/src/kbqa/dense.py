"""Token-level embeddings, cosine MaxSim scoring and exhaustive dense top-k.

Binary index layout (all integers little-endian unsigned 32-bit)::

    magic      4 bytes  b"KBQD"
    version    u32      currently 1
    dim        u32
    count      u32      number of entries
    enc_len    u32      length of the encoder_version string
    enc        bytes    UTF-8 encoder_version
    then per entry:
      id_len   u32
      id       bytes    UTF-8 doc id
      n_tok    u32
      vectors  n_tok*dim float32, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .validation import check_matrix, check_positive_int

RankedList = List[Tuple[str, float]]

MAGIC = b"KBQD"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TokenEmbeddings:
    owner_id: str
    vectors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vectors", check_matrix(self.vectors, f"embeddings of {self.owner_id!r}"))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    # zero rows stay zero, so their cosine with anything is 0
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def _as_matrix(x) -> np.ndarray:
    return x.vectors if isinstance(x, TokenEmbeddings) else check_matrix(x)


def maxsim_score(q, d) -> float:
    """Sum over query tokens of the best cosine against any document token."""
    qm, dm = _as_matrix(q), _as_matrix(d)
    if qm.shape[1] != dm.shape[1]:
        raise ValueError(f"dimension mismatch: query dim {qm.shape[1]} vs document dim {dm.shape[1]}")
    sims = _unit_rows(qm) @ _unit_rows(dm).T
    return float(sims.max(axis=1).sum())


class DenseIndex:
    """Immutable doc_id -> TokenEmbeddings store with exhaustive MaxSim search."""

    def __init__(self, entries: Iterable[TokenEmbeddings], dim: int, encoder_version: str = ""):
        self.dim = check_positive_int(dim, "dim")
        self.encoder_version = encoder_version
        self.entries: Dict[str, TokenEmbeddings] = {}
        for e in entries:
            if e.dim != self.dim:
                raise ValueError(f"entry {e.owner_id!r} has dim {e.dim}, index dim is {self.dim}")
            if e.owner_id in self.entries:
                raise ValueError(f"duplicate entry {e.owner_id!r}")
            self.entries[e.owner_id] = e
        self._ids = sorted(self.entries)
        self._pos = {d: i for i, d in enumerate(self._ids)}
        self._stack = None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, doc_id) -> bool:
        return doc_id in self.entries

    @property
    def ids(self) -> List[str]:
        return list(self._ids)

    def _stacked(self):
        # All unit-normalized rows are de-duplicated globally (U) and every doc
        # keeps the sorted set of its row ids into U, stored back to back.
        # Identical rows give identical cosines, so this is exact; it pays off
        # for context-free encoders where rows repeat across documents.
        if self._stack is None:
            if not self._ids:
                self._stack = (np.zeros((0, self.dim)), np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp))
                return self._stack
            blocks = [_unit_rows(self.entries[d].vectors) for d in self._ids]
            sizes = [b.shape[0] for b in blocks]
            uniq, inverse = np.unique(np.vstack(blocks), axis=0, return_inverse=True)
            inverse = inverse.ravel()
            cols, offsets, n, start = [], [], 0, 0
            for size in sizes:
                ids = np.unique(inverse[start:start + size])
                start += size
                cols.append(ids)
                offsets.append(n)
                n += ids.size
            self._stack = (np.ascontiguousarray(uniq), np.concatenate(cols), np.asarray(offsets, dtype=np.intp))
        return self._stack

    def score_all(self, q) -> np.ndarray:
        """MaxSim of ``q`` against every entry, aligned with ``self.ids``."""
        qm = _as_matrix(q)
        if qm.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: query dim {qm.shape[1]} vs index dim {self.dim}")
        if not self._ids:
            return np.zeros(0)
        uniq, cols, offsets = self._stacked()
        sims = (_unit_rows(qm) @ uniq.T)[:, cols]
        return np.maximum.reduceat(sims, offsets, axis=1).sum(axis=0)

    def rank_of(self, q, doc_id: str, scores: Optional[np.ndarray] = None) -> int:
        """1-based rank of ``doc_id`` under dense_topk ordering."""
        if scores is None:
            scores = self.score_all(q)
        pos = self._pos[doc_id]
        s = scores[pos]
        return int(np.count_nonzero(scores > s) + np.count_nonzero(scores[:pos] == s) + 1)

    def save(self, path) -> None:
        enc = self.encoder_version.encode("utf-8")
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<4I", FORMAT_VERSION, self.dim, len(self._ids), len(enc)))
            f.write(enc)
            for doc_id in self._ids:
                raw = doc_id.encode("utf-8")
                vec = self.entries[doc_id].vectors
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
                f.write(struct.pack("<I", vec.shape[0]))
                f.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "DenseIndex":
        with open(path, "rb") as f:
            data = f.read()
        if data[:4] != MAGIC:
            raise ValueError(f"{path}: not a dense index file")
        version, dim, count, enc_len = struct.unpack_from("<4I", data, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported index version {version}")
        off = 20
        enc = data[off:off + enc_len].decode("utf-8")
        off += enc_len
        entries = []
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            doc_id = data[off:off + n].decode("utf-8")
            off += n
            (rows,) = struct.unpack_from("<I", data, off)
            off += 4
            size = rows * dim * 4
            vec = np.frombuffer(data, dtype="<f4", count=rows * dim, offset=off).reshape(rows, dim)
            off += size
            entries.append(TokenEmbeddings(doc_id, vec.astype(float)))
        return cls(entries, dim, enc)


def dense_topk(index: DenseIndex, q, k: int = 10, candidates: Optional[Iterable[str]] = None) -> RankedList:
    """Exhaustive MaxSim ranking, score descending, ties by ascending doc_id."""
    check_positive_int(k, "k")
    if len(index) == 0:
        return []
    ids = index._ids
    if candidates is None:
        scores = index.score_all(q)
        cand = np.arange(len(ids))
    else:
        cand_ids = sorted(set(candidates))
        missing = [c for c in cand_ids if c not in index]
        if missing:
            raise KeyError(f"candidates not in index: {missing[:5]}")
        qm = _as_matrix(q)
        scores = np.zeros(len(ids))
        cand = np.array([index._pos[c] for c in cand_ids], dtype=np.intp)
        for c in cand_ids:
            scores[index._pos[c]] = maxsim_score(qm, index.entries[c])
    order = cand[np.argsort(-scores[cand], kind="stable")][:k]
    return [(ids[i], float(scores[i])) for i in order]


def build_dense(encoder, corpus, max_len: Optional[int] = None) -> DenseIndex:
    """Encode every document of ``corpus`` with ``encoder``."""
    entries = [TokenEmbeddings(doc.id, encoder.encode(doc.text, max_len=max_len)) for doc in corpus]
    return DenseIndex(entries, encoder.dim, encoder.version_tag)
