"""Bundled synthetic knowledge base with generated questions and planted answers.

Documents are sequences of pseudo-words: Zipf-distributed filler, a handful
of topic words and a unique hyphenated reference code. Questions mix topic
words of their source document with common filler words. Every matching
token counts the same under an untrained MaxSim encoder, so the common words
drown the topic words until the encoder learns to discount them; BM25 gets
that discount from idf.
"""

from __future__ import annotations

import json
from pathlib import Path
from dataclasses import dataclass, field
from typing import Dict, List, Set, Tuple

import numpy as np

from .corpus import Corpus, Provenance, QDPair, Query, QType, ingest, save_pairs, save_queries, tokenize
from .evalkit import write_qrels
from .mock import KeyedCotClient, RoutingClient, TopicQuestionClient
from .qgen import FACT_TEMPLATE, SOLUTION_TEMPLATE, generate_questions

_ONSETS = list("bdfgklmnprstvz") + ["ch", "sh", "th", "br", "tr", "pl", "kr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]


def _pseudo_words(rng: np.random.Generator, n: int, syllables: int, taken: Set[str]) -> List[str]:
    out = []
    while len(out) < n:
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(syllables))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass
class SyntheticKB:
    corpus: Corpus
    topics: Set[str]
    context_words: List[str]
    answer_keys: Dict[str, str]
    pool: List[QDPair]
    noise: Set[Tuple[str, str]]
    heldout: List[Query]
    heldout_qrels: Dict[str, Set[str]]
    heldout_keys: Dict[str, str] = field(default_factory=dict)
    dropped: int = 0
    context_weights: List[float] = field(default_factory=list)
    n_context: int = 5
    qgen_salt: str = ""

    def is_noise(self, pair: QDPair) -> bool:
        return pair.key in self.noise


def _document_text(rng, filler, filler_p, topic_words, code) -> str:
    n_filler = int(rng.integers(48, 62))
    words = list(rng.choice(filler, size=n_filler, p=filler_p))
    for w in topic_words:
        words.insert(int(rng.integers(0, len(words) + 1)), w)
    sentences, i = [], 0
    while i < len(words):
        step = int(rng.integers(7, 12))
        sentences.append(" ".join(words[i:i + step]).capitalize() + ".")
        i += step
    sentences.append(f"Reference code {code}.")
    return " ".join(sentences)


def zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def generate_documents(n_docs: int = 2000, seed: int = 0, n_topics: int = 1000, topics_per_doc: int = 8,
                       n_filler: int = 400, zipf: float = 1.0, n_short: int = 0):
    """Return (records, topics, filler, filler_weights, answer_keys).

    ``n_short`` extra records fall below the 50-token ingest threshold.
    """
    rng = np.random.default_rng(seed)
    taken: Set[str] = set()
    filler = _pseudo_words(rng, n_filler, 2, taken)
    topics = _pseudo_words(rng, n_topics, 3, taken)
    code_words = _pseudo_words(rng, 64, 2, taken)
    filler_p = zipf_weights(n_filler, zipf)
    combos = [(a, b) for a in code_words for b in code_words if a != b]
    order = rng.permutation(len(combos))[: n_docs + n_short]
    records, keys = [], {}
    for i in range(n_docs + n_short):
        doc_id = f"doc{i:05d}"
        a, b = combos[order[i]]
        code = f"{a}-{b}"
        words = list(rng.choice(topics, size=topics_per_doc, replace=False))
        if i < n_docs:
            text = _document_text(rng, filler, filler_p, words, code)
            keys[doc_id] = code
        else:
            text = " ".join(rng.choice(filler, size=int(rng.integers(10, 40)), p=filler_p)) + "."
        records.append({"id": doc_id, "text": text, "meta": {"source": "synthetic"}})
    return records, topics, filler, filler_p, keys


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")


def make_synthetic(workdir, n_docs: int = 2000, seed: int = 0, noise_rate: float = 0.2, n_heldout: int = 200,
                   n_context: int = 5, context_vocab: int = 100, context_offset: int = 10, n_short: int = 50,
                   fact_per_doc: int = 2,
                   solution_per_doc: int = 1, zipf: float = 1.0) -> SyntheticKB:
    """Build the synthetic KB on disk under ``workdir`` and load it back through ``ingest``.

    Context words are the ``context_vocab`` filler words following the
    ``context_offset`` most frequent ones, sampled in proportion to their
    corpus frequency.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    records, topics, filler, filler_p, keys = generate_documents(n_docs, seed, n_short=n_short, zipf=zipf)
    path = workdir / "synthetic_corpus.jsonl"
    write_jsonl(records, path)
    corpus = ingest(path, min_words=50)

    ctx_words = filler[context_offset:context_offset + context_vocab]
    ctx_p = filler_p[context_offset:context_offset + context_vocab]

    def client(salt, n_lines):
        return TopicQuestionClient(topics, ctx_words, ctx_p, n_lines=n_lines, n_context=n_context, salt=salt)

    salt = f"train{seed}"
    qgen = client(salt, max(fact_per_doc, solution_per_doc))
    pool = list(generate_questions(qgen, corpus, FACT_TEMPLATE, per_doc=fact_per_doc))
    if solution_per_doc:
        pool += generate_questions(qgen, corpus, SOLUTION_TEMPLATE, per_doc=solution_per_doc)
    pool.sort(key=lambda p: p.query.id)

    rng = np.random.default_rng(seed + 1)
    ids = corpus.ids
    noise = set()
    for i in rng.choice(len(pool), size=int(round(noise_rate * len(pool))), replace=False):
        p = pool[i]
        other = p.doc_id
        while other == p.doc_id:
            other = ids[int(rng.integers(len(ids)))]
        pool[i] = QDPair(p.query, other, Provenance.GENERATED)
        noise.add(pool[i].key)

    train_texts = {p.query.text for p in pool}
    held = client(f"heldout{seed}", 1)
    heldout, qrels, hkeys = [], {}, {}
    for doc_id in rng.permutation(ids):
        doc_id = str(doc_id)
        if len(heldout) == n_heldout:
            break
        lines = held.questions_for(corpus[doc_id].text, fact=True)
        if not lines or lines[0] in train_texts or lines[0] in hkeys:
            continue
        q = Query(f"heldout{len(heldout):04d}", lines[0], QType.FACT)
        heldout.append(q)
        qrels[q.id] = {doc_id}
        hkeys[q.text] = keys[doc_id]
    return SyntheticKB(corpus, set(topics), list(ctx_words), keys, pool, noise, heldout, qrels, hkeys,
                       corpus.report.dropped, [float(p) for p in ctx_p], n_context, salt)


def snippet_pairs(kb: SyntheticKB, n: int = 500, width: int = 10, noise_rate: float = 0.2, seed: int = 0):
    """Questions copied verbatim from document windows, plus mislabeled noise.

    Each clean query is the ``width``-token window of its source document
    holding the most topic words. Noise pairs take the window of one
    document and label it with another. Returns (pairs, noise_keys).
    """
    rng = np.random.default_rng(seed)
    ids = kb.corpus.ids
    chosen = [ids[i] for i in rng.choice(len(ids), size=min(n, len(ids)), replace=False)]
    pairs, noise = [], set()
    for j, doc_id in enumerate(chosen):
        toks = tokenize(kb.corpus[doc_id].text)
        hits = np.array([t in kb.topics for t in toks], dtype=int)
        window = np.convolve(hits, np.ones(width, dtype=int), mode="valid")
        start = int(np.argmax(window))
        q = Query(f"snip{j:05d}", " ".join(toks[start:start + width]), QType.FACT)
        target = doc_id
        if rng.random() < noise_rate:
            while target == doc_id:
                target = ids[int(rng.integers(len(ids)))]
        pair = QDPair(q, target, Provenance.GENERATED)
        if target != doc_id:
            noise.add(pair.key)
        pairs.append(pair)
    return pairs, noise


def gold_answer(key: str) -> str:
    return f"the reference code is {key}."


def write_bundle(kb: SyntheticKB, workdir, n_qa: int = 50, n_annotated: int = 200) -> Dict[str, Path]:
    """Write pool, held-out queries, qrels, QA pairs, annotated pairs and client metadata.

    The corpus itself is already at ``workdir/synthetic_corpus.jsonl``.
    """
    workdir = Path(workdir)
    paths = {name: workdir / fname for name, fname in [
        ("corpus", "synthetic_corpus.jsonl"), ("pool", "pool.jsonl"), ("queries", "heldout_queries.jsonl"),
        ("qrels", "heldout_qrels.txt"), ("qa_pairs", "qa_pairs.jsonl"), ("annotated", "annotated_pairs.jsonl"),
        ("meta", "synthetic_meta.json")]}
    save_pairs(kb.pool, paths["pool"])
    save_queries(kb.heldout, paths["queries"])
    write_qrels(kb.heldout_qrels, paths["qrels"])
    with open(paths["qa_pairs"], "w", encoding="utf-8", newline="\n") as f:
        for q in kb.heldout[:n_qa]:
            rec = {"id": q.id, "question": q.text, "answer": gold_answer(kb.heldout_keys[q.text])}
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
    clean = [p.with_provenance(Provenance.ANNOTATED) for p in kb.pool if p.key not in kb.noise]
    save_pairs(clean[:n_annotated], paths["annotated"])
    meta = {"topics": sorted(kb.topics), "context_words": kb.context_words, "context_weights": kb.context_weights,
            "n_context": kb.n_context, "salt": kb.qgen_salt, "answer_keys": kb.heldout_keys}
    with open(paths["meta"], "w", encoding="utf-8", newline="\n") as f:
        json.dump(meta, f, ensure_ascii=False, indent=1, sort_keys=True)
    return paths


def load_synthetic_client(meta_path, per_doc: int = 3, marker: str = "Irrelevant") -> RoutingClient:
    """Offline client for a bundle: topic questions for generation, keyed CoT for answering."""
    with open(meta_path, encoding="utf-8") as f:
        meta = json.load(f)
    qgen = TopicQuestionClient(meta["topics"], meta["context_words"], meta["context_weights"], n_lines=per_doc,
                               n_context=meta["n_context"], salt=meta["salt"])
    return RoutingClient(qgen, KeyedCotClient(meta["answer_keys"], marker))
