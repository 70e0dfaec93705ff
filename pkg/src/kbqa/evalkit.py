"""Retrieval (NDCG/MAP/Recall/MRR@k) and answer (EM/F1, BLEU/ROUGE-L) metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import string
from collections import Counter
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

logger = logging.getLogger(__name__)

RankedList = List[Tuple[str, float]]
Qrels = Dict[str, Set[str]]

METRICS = ("ndcg", "map", "recall", "mrr")


def per_query_metrics(ranked: Sequence[str], relevant: Set[str], cutoff: int = 10) -> Dict[str, float]:
    top = list(ranked)[:cutoff]
    gains = [1.0 if d in relevant else 0.0 for d in top]
    dcg = sum(g / math.log2(i + 2) for i, g in enumerate(gains))
    ideal = sum(1.0 / math.log2(i + 2) for i in range(min(len(relevant), cutoff)))
    hits, prec_sum, rr = 0, 0.0, 0.0
    for i, g in enumerate(gains):
        if g:
            hits += 1
            prec_sum += hits / (i + 1)
            if not rr:
                rr = 1.0 / (i + 1)
    return {
        "ndcg": dcg / ideal if ideal else 0.0,
        "map": prec_sum / min(len(relevant), cutoff),
        "recall": hits / len(relevant),
        "mrr": rr,
    }


def retrieval_metrics(runs: Mapping[str, RankedList], qrels: Mapping[str, Set[str]], cutoff: int = 10,
                      known_docs: Optional[Set[str]] = None, per_query: Optional[dict] = None) -> Dict[str, float]:
    """Macro-averaged binary-relevance metrics over the queries in ``qrels``.

    Queries without a run score 0. Queries are visited in sorted id order so
    the floating-point sum does not depend on mapping order.
    """
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    totals = dict.fromkeys(METRICS, 0.0)
    qids = sorted(qrels)
    for qid in qids:
        rel = set(qrels[qid])
        if not rel:
            raise ValueError(f"qrels for {qid!r} is empty")
        if known_docs is not None and not rel <= known_docs:
            logger.warning("qrels for %s reference unknown documents: %s", qid, sorted(rel - known_docs))
        ranked = [d for d, _ in runs.get(qid, [])]
        m = per_query_metrics(ranked, rel, cutoff)
        if per_query is not None:
            per_query[qid] = m
        for k in METRICS:
            totals[k] += m[k]
    n = len(qids)
    return {k: (totals[k] / n if n else 0.0) for k in METRICS}


_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def normalize_answer(text: str) -> List[str]:
    return _PUNCT.sub(" ", text.lower()).split()


def em_f1(pred: str, gold: str, normalize: Callable[[str], List[str]] = normalize_answer) -> Tuple[int, float]:
    p, g = normalize(pred), normalize(gold)
    if not p and not g:
        return 1, 1.0
    if not p or not g:
        return 0, 0.0
    em = int(p == g)
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return em, 0.0
    precision, recall = common / len(p), common / len(g)
    return em, 2 * precision * recall / (precision + recall)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def bleu_rouge(pred: str, gold: str, max_n: int = 4,
               normalize: Callable[[str], List[str]] = normalize_answer) -> Tuple[float, float]:
    """Sentence BLEU-4 (add-one smoothing on zero counts, brevity penalty) and ROUGE-L F1."""
    p, g = normalize(pred), normalize(gold)
    if not p:
        return 0.0, 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand = _ngrams(p, n)
        total = sum(cand.values())
        match = sum((cand & _ngrams(g, n)).values())
        if match == 0:
            match, total = match + 1, total + 1
        log_sum += math.log(match / total)
    bp = 1.0 if len(p) > len(g) else math.exp(1 - len(g) / len(p))
    bleu = bp * math.exp(log_sum / max_n)
    lcs = _lcs_length(p, g)
    rouge = 0.0 if lcs == 0 else 2 * lcs / (len(p) + len(g))
    return bleu, rouge


# -- TREC-style files ---------------------------------------------------

def write_run(runs: Mapping[str, RankedList], path, tag: str = "kbqa") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for qid in sorted(runs):
            for rank, (doc_id, score) in enumerate(runs[qid], 1):
                f.write(f"{qid} Q0 {doc_id} {rank} {score:.6f} {tag}\n")


def read_run(path) -> Dict[str, RankedList]:
    runs: Dict[str, List[Tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}: line {lineno}: expected 6 columns")
            qid, _, doc_id, rank, score, _ = parts
            runs.setdefault(qid, []).append((int(rank), doc_id, float(score)))
    return {q: [(d, s) for _, d, s in sorted(rows)] for q, rows in runs.items()}


def write_qrels(qrels: Mapping[str, Iterable[str]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for qid in sorted(qrels):
            for doc_id in sorted(qrels[qid]):
                f.write(f"{qid} 0 {doc_id} 1\n")


def read_qrels(path) -> Qrels:
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}: line {lineno}: expected 4 columns")
            qid, _, doc_id, rel = parts
            if int(rel) > 0:
                qrels.setdefault(qid, set()).add(doc_id)
    return qrels


def write_metrics(metrics: Mapping[str, float], per_query: Mapping[str, Mapping[str, float]], json_path,
                  csv_path=None) -> None:
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(dict(metrics), f, indent=2, sort_keys=True)
        f.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["query_id", *METRICS])
            for qid in sorted(per_query):
                w.writerow([qid, *(f"{per_query[qid][m]:.6f}" for m in METRICS)])
