"""Command-line pipeline: one subcommand per stage, outputs in a per-config run directory."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import sklearn

from . import __version__
from .config import ConfigError, PipelineConfig, describe_keys, load_config
from .corpus import CorpusError, Query, QType, ingest, load_pairs, load_queries, save_pairs
from .curriculum import CurriculumError, DenseRetriever, consistency_filter, run_curriculum
from .dense import DenseIndex
from .encoder import TrainableEncoder
from .evalkit import bleu_rouge, em_f1, read_qrels, read_run, retrieval_metrics, write_metrics, write_run
from .generation import answer_question, export_generation_finetune, write_trace
from .llm import HttpLlmClient, LlmError
from .qgen import export_qgen_finetune, get_template, generate_questions
from .sparse import InvertedIndex, bm25_topk, build_sparse

logger = logging.getLogger("kbqa")

# artifact name -> (file in the run directory, command that writes it)
ARTIFACTS = {
    "corpus": ("corpus.jsonl", "ingest"),
    "sparse": ("sparse_index.json", "index-sparse"),
    "questions": ("questions.jsonl", "gen-questions"),
    "filtered": ("filtered.jsonl", "filter"),
    "encoder": ("encoder.ckpt", "train-curriculum"),
    "dense": ("dense_index.bin", "index-dense"),
    "run": ("run.trec", "retrieve"),
    "answers": ("answers.jsonl", "answer"),
}


class MissingArtifact(Exception):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path}; run `{producer}` first")
        self.path = path
        self.producer = producer


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Artifact bookkeeping for one command invocation."""

    def __init__(self, cfg: PipelineConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.dir = cfg.run_dir()
        self.dir.mkdir(parents=True, exist_ok=True)
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}
        self.info: Dict[str, object] = {}

    def need(self, name: str) -> Path:
        fname, producer = ARTIFACTS[name]
        path = self.dir / fname
        if not path.exists():
            raise MissingArtifact(path, producer)
        self.inputs[fname] = sha256_file(path)
        return path

    def need_file(self, key: str, path: Optional[Path]) -> Path:
        if path is None:
            raise ConfigError(f"config key {key} is not set")
        if not path.exists():
            raise MissingArtifact(path, f"(file named by {key})")
        self.inputs[key] = sha256_file(path)
        return path

    def out(self, fname: str) -> Path:
        return self.dir / fname

    def finish(self, *fnames: str) -> Path:
        for fname in fnames:
            self.outputs[fname] = sha256_file(self.dir / fname)
        manifest = {
            "command": self.command,
            "config_hash": self.cfg.hash(),
            "config": self.cfg.to_dict(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "info": self.info,
            "versions": {"kbqa": __version__, "numpy": np.__version__, "scikit-learn": sklearn.__version__,
                         "python": platform.python_version()},
        }
        path = self.dir / f"manifest-{self.command}.json"
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        return path


def _corpus(run: Run):
    return ingest(run.need("corpus"), min_words=0)


def _sparse(run: Run) -> InvertedIndex:
    return InvertedIndex.load(run.need("sparse"))


def _client(cfg: PipelineConfig, per_doc: Optional[int] = None):
    if cfg.client.kind == "synthetic":
        from .synthetic import load_synthetic_client

        meta = cfg.resolve(cfg.client.synthetic_meta)
        if meta is None or not meta.exists():
            raise ConfigError("client.kind = 'synthetic' needs client.synthetic_meta pointing at synthetic_meta.json")
        return load_synthetic_client(meta, per_doc or cfg.qgen.per_doc)
    return HttpLlmClient(cfg.endpoint(), cfg.client.timeout)


def _retriever(run: Run, corpus, sparse: InvertedIndex, kind: str):
    if kind == "sparse":
        return lambda q, k: bm25_topk(sparse, q, k)
    encoder = TrainableEncoder.load(run.need("encoder"))
    index = DenseIndex.load(run.need("dense"))
    if index.encoder_version != encoder.version_tag:
        raise CurriculumError(f"dense index was built with encoder {index.encoder_version!r}, "
                              f"checkpoint is {encoder.version_tag!r}; rerun index-dense")
    return DenseRetriever(encoder, index, sparse, run.cfg.dense.full_rank_limit, run.cfg.dense.pool)


def _queries(run: Run, texts: Sequence[str]) -> List[Query]:
    if texts:
        return [Query(f"q{i:04d}", t) for i, t in enumerate(texts)]
    return load_queries(run.need_file("eval.queries", run.cfg.resolve(run.cfg.eval.queries)))


def cmd_ingest(run: Run, args) -> dict:
    src = run.need_file("corpus.path", run.cfg.resolve(run.cfg.corpus.path))
    corpus = ingest(src, run.cfg.corpus.min_words)
    corpus.save(run.out("corpus.jsonl"))
    run.info.update(kept=corpus.report.kept, dropped=corpus.report.dropped)
    run.finish("corpus.jsonl")
    return run.info


def cmd_index_sparse(run: Run, args) -> dict:
    sparse = build_sparse(_corpus(run), run.cfg.sparse.k1, run.cfg.sparse.b)
    sparse.save(run.out("sparse_index.json"))
    run.info.update(documents=sparse.doc_count, terms=len(sparse.postings))
    run.finish("sparse_index.json")
    return run.info


def cmd_gen_questions(run: Run, args) -> dict:
    corpus = _corpus(run)
    client = _client(run.cfg)
    q = run.cfg.qgen
    pairs, errors, zero = [], {}, []
    for name in run.cfg.template_names():
        got = generate_questions(client, corpus, get_template(name), q.per_doc, q.max_tokens, q.temperature,
                                 q.concurrency)
        pairs.extend(got)
        errors.update({f"{name}:{d}": e for d, e in got.errors.items()})
        zero.extend(f"{name}:{d}" for d in got.zero_yield)
    save_pairs(pairs, run.out("questions.jsonl"))
    run.info.update(pairs=len(pairs), failed=len(errors), zero_yield=len(zero))
    run.finish("questions.jsonl")
    return run.info


def cmd_filter(run: Run, args) -> dict:
    sparse = _sparse(run)
    corpus = _corpus(run)
    pairs = load_pairs(run.need("questions"), corpus)
    res = consistency_filter(lambda q, k: bm25_topk(sparse, q, k), pairs, run.cfg.curriculum.k_keep)
    save_pairs(res.kept, run.out("filtered.jsonl"))
    with open(run.out("rejected.jsonl"), "w", encoding="utf-8", newline="\n") as f:
        for p in res.rejected:
            f.write(json.dumps({**p.to_record(), "reason": res.reasons.get(p.key, "")}, ensure_ascii=False) + "\n")
    run.info.update(kept=len(res.kept), rejected=len(res.rejected))
    run.finish("filtered.jsonl", "rejected.jsonl")
    return run.info


def cmd_train_curriculum(run: Run, args) -> dict:
    cfg = run.cfg
    sparse = _sparse(run)
    corpus = _corpus(run)
    pairs = load_pairs(run.need("questions"), corpus)
    heldout, qrels = (), None
    if cfg.eval.queries and cfg.eval.qrels:
        heldout = load_queries(run.need_file("eval.queries", cfg.resolve(cfg.eval.queries)))
        qrels = read_qrels(run.need_file("eval.qrels", cfg.resolve(cfg.eval.qrels)))
        heldout = [q for q in heldout if q.id in qrels]
    state = run_curriculum(corpus, sparse, pairs, cfg.filter_policy(), cfg.curriculum.T, cfg.train_config(),
                           heldout, qrels)
    state.encoder_checkpoint.save(run.out("encoder.ckpt"))
    state.write_history(run.out("history.csv"))
    save_pairs(state.train_set.values(), run.out("trainset.jsonl"))
    run.info.update(status=state.status, iterations=state.iteration, trainset_sizes=state.trainset_sizes,
                    heldout_recall=[s.heldout_recall for s in state.history])
    run.finish("encoder.ckpt", "history.csv", "trainset.jsonl")
    return run.info


def cmd_index_dense(run: Run, args) -> dict:
    encoder = TrainableEncoder.load(run.need("encoder"))
    retriever = DenseRetriever.build(encoder, _corpus(run))
    retriever.index.save(run.out("dense_index.bin"))
    run.info.update(documents=len(retriever.index), encoder_version=encoder.version_tag)
    run.finish("dense_index.bin")
    return run.info


def cmd_retrieve(run: Run, args) -> dict:
    sparse = _sparse(run)
    corpus = _corpus(run)
    search = _retriever(run, corpus, sparse, run.cfg.eval.retriever)
    queries = _queries(run, args.query)
    runs = {q.id: search(q, args.k or run.cfg.eval.cutoff) for q in queries}
    write_run(runs, run.out("run.trec"), tag=run.cfg.eval.retriever)
    run.info.update(queries=len(queries), retriever=run.cfg.eval.retriever)
    run.finish("run.trec")
    if args.query:
        return {"results": {q.text: runs[q.id] for q in queries}}
    return run.info


def cmd_answer(run: Run, args) -> dict:
    cfg = run.cfg
    sparse = _sparse(run)
    corpus = _corpus(run)
    search = _retriever(run, corpus, sparse, cfg.eval.retriever)
    client = _client(cfg)
    g = cfg.generation
    results = [answer_question(q, search, client, corpus, g.k, g.max_rounds, g.irrelevance_marker, g.concurrency,
                               g.max_tokens) for q in _queries(run, args.question)]
    write_trace(results, run.out("answers.jsonl"))
    run.info.update(questions=len(results), answered=sum(r.final is not None for r in results))
    run.finish("answers.jsonl")
    if args.question:
        return {"answers": [r.to_json() for r in results]}
    return run.info


def _answer_metrics(answers_path: Path, gold_path: Path) -> Dict[str, float]:
    gold = {}
    with open(gold_path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                gold[str(rec["id"])] = rec["answer"]
    preds = {}
    with open(answers_path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                preds[rec["question_id"]] = rec["final_answer"] or ""
    totals = np.zeros(4)
    for qid in sorted(gold):
        pred = preds.get(qid, "")
        em, f1 = em_f1(pred, gold[qid])
        bleu, rouge = bleu_rouge(pred, gold[qid])
        totals += (em, f1, bleu, rouge)
    n = max(len(gold), 1)
    return dict(zip(("em", "f1", "bleu", "rouge_l"), (float(v / n) for v in totals)))


def cmd_eval(run: Run, args) -> dict:
    cfg = run.cfg
    runs = read_run(run.need("run"))
    qrels = read_qrels(run.need_file("eval.qrels", cfg.resolve(cfg.eval.qrels)))
    known = None
    corpus_path = run.dir / ARTIFACTS["corpus"][0]
    if corpus_path.exists():
        known = set(_corpus(run).ids)
    per_query: Dict[str, Dict[str, float]] = {}
    metrics = retrieval_metrics(runs, qrels, cfg.eval.cutoff, known, per_query)
    if cfg.eval.gold_answers:
        metrics.update(_answer_metrics(run.need("answers"),
                                       run.need_file("eval.gold_answers", cfg.resolve(cfg.eval.gold_answers))))
    write_metrics(metrics, per_query, run.out("metrics.json"), run.out("per_query.csv"))
    run.info.update(metrics)
    run.finish("metrics.json", "per_query.csv")
    return dict(metrics)


def cmd_export_qgen(run: Run, args) -> dict:
    corpus = _corpus(run)
    path = run.need_file("export.annotated_pairs", run.cfg.resolve(run.cfg.export.annotated_pairs))
    pairs = load_pairs(path, corpus)
    n = export_qgen_finetune(pairs, corpus, None, run.out("qgen_finetune.jsonl"))
    run.info.update(records=n)
    run.finish("qgen_finetune.jsonl")
    return run.info


def cmd_export_gen(run: Run, args) -> dict:
    cfg = run.cfg
    sparse = _sparse(run)
    corpus = _corpus(run)
    search = _retriever(run, corpus, sparse, cfg.eval.retriever)
    qa = []
    with open(run.need_file("export.qa_pairs", cfg.resolve(cfg.export.qa_pairs)), encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                qa.append((Query(str(rec["id"]), rec["question"], QType(rec.get("qtype", "unknown"))), rec["answer"]))
            except (KeyError, ValueError) as exc:
                raise CorpusError(f"export.qa_pairs line {lineno}: bad record ({exc})") from None
    n = export_generation_finetune(qa, search, corpus, cfg.export.k, run.out("gen_finetune.jsonl"))
    run.info.update(pairs=len(qa), records=n)
    run.finish("gen_finetune.jsonl")
    return run.info


def cmd_make_synthetic(args) -> dict:
    from .synthetic import make_synthetic, write_bundle

    kb = make_synthetic(args.out, n_docs=args.n_docs, seed=args.seed, n_heldout=args.n_heldout)
    paths = write_bundle(kb, args.out)
    return {"documents": len(kb.corpus), "pool": len(kb.pool), "noise": len(kb.noise),
            "heldout": len(kb.heldout), "files": {k: str(v) for k, v in paths.items()}}


COMMANDS = {
    "ingest": (cmd_ingest, "read corpus.path, drop short documents"),
    "index-sparse": (cmd_index_sparse, "build the BM25 inverted index"),
    "gen-questions": (cmd_gen_questions, "generate pseudo questions for every document"),
    "filter": (cmd_filter, "BM25 consistency-filter the generated questions"),
    "train-curriculum": (cmd_train_curriculum, "train the dense retriever with the curriculum"),
    "index-dense": (cmd_index_dense, "encode the corpus with the trained encoder"),
    "retrieve": (cmd_retrieve, "rank documents for eval.queries (or --query) into a TREC run"),
    "answer": (cmd_answer, "answer questions with per-document CoT prompting"),
    "eval": (cmd_eval, "retrieval metrics (and answer metrics if eval.gold_answers is set)"),
    "export-finetune-qgen": (cmd_export_qgen, "question-generation fine-tune dataset"),
    "export-finetune-gen": (cmd_export_gen, "answer-generation fine-tune dataset"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kbqa", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Knowledge-base retrieval and answer generation pipeline.",
        epilog="config keys (TOML sections.key) and defaults:\n" + describe_keys()
        + "\n\nThe client endpoint can be overridden with $KBQA_LLM_ENDPOINT.")
    parser.add_argument("--config", help="TOML config file (defaults apply when omitted)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        if name == "retrieve":
            p.add_argument("--query", action="append", default=[], help="ad-hoc query text (repeatable)")
            p.add_argument("--k", type=int, default=None, help="depth (default eval.cutoff)")
        if name == "answer":
            p.add_argument("--question", action="append", default=[], help="ad-hoc question text (repeatable)")
    p = sub.add_parser("make-synthetic", help="write the bundled synthetic corpus and its companion files")
    p.add_argument("--out", required=True)
    p.add_argument("--n-docs", type=int, default=2000)
    p.add_argument("--n-heldout", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _fail(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "make-synthetic":
            result = cmd_make_synthetic(args)
        else:
            cfg = load_config(args.config)
            run = Run(cfg, args.command)
            result = COMMANDS[args.command][0](run, args)
            result = {"run_dir": str(run.dir), **result}
    except MissingArtifact as exc:
        return _fail("missing_prerequisite", str(exc), 2, missing=str(exc.path), produced_by=exc.producer)
    except (ConfigError, CorpusError, CurriculumError, LlmError, ValueError, KeyError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
