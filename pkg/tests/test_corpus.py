import json

import pytest

from kbqa.corpus import (Corpus, CorpusError, Document, Provenance, QDPair, Query, QType, ingest, load_pairs,
                         load_queries, save_pairs, save_queries, tokenize)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def rec(doc_id, n_words, **extra):
    return json.dumps({"id": doc_id, "text": " ".join(["word"] * n_words), **extra})


def test_tokenize_lowercases_and_drops_punctuation():
    assert tokenize("Hello, World! it's 2021_v2") == ["hello", "world", "it", "s", "2021", "v2"]
    assert tokenize("") == []


def test_ingest_threshold_and_order(tmp_path):
    path = write_lines(tmp_path / "c.jsonl", [rec("b", 60), rec("a", 49), rec("c", 50), rec("d", 80)])
    corpus = ingest(path, min_words=50)
    assert corpus.ids == ["b", "c", "d"]
    assert (corpus.report.kept, corpus.report.dropped) == (3, 1)
    assert corpus["c"].token_count == 50


def test_ingest_keeps_meta_and_skips_blank_lines(tmp_path):
    path = write_lines(tmp_path / "c.jsonl", [rec("x", 3, meta={"source": "wiki", "n": 1}), ""])
    corpus = ingest(path, min_words=1)
    assert corpus["x"].meta == {"source": "wiki", "n": "1"}


@pytest.mark.parametrize("lines, needle", [
    (['{"id": "a", "text": "x"}', "{not json"], "line 2"),
    (['{"id": "a"}'], "missing field 'text'"),
    (['{"id": "a", "text": "x y"}', '{"id": "a", "text": "z"}'], "duplicate document id"),
    (['[1, 2]'], "not an object"),
])
def test_ingest_errors_name_the_line(tmp_path, lines, needle):
    path = write_lines(tmp_path / "bad.jsonl", lines)
    with pytest.raises(CorpusError, match=needle):
        ingest(path, min_words=0)


def test_corpus_rejects_duplicate_ids():
    corpus = Corpus.from_texts([("a", "one two")])
    with pytest.raises(CorpusError):
        corpus.add(Document("a", "three", 1))


def test_corpus_save_roundtrip(tmp_path):
    corpus = Corpus.from_texts([("a", "one two three"), ("b", "four five", {"k": "v"})])
    corpus.save(tmp_path / "out.jsonl")
    back = ingest(tmp_path / "out.jsonl", min_words=0)
    assert back.ids == corpus.ids
    assert back["b"].meta == {"k": "v"}
    assert back["a"].text == "one two three"


def test_query_rejects_empty_text():
    with pytest.raises(ValueError):
        Query("q", "   ")


def test_pairs_roundtrip_and_unknown_doc(tmp_path):
    corpus = Corpus.from_texts([("a", "alpha beta")])
    pairs = [QDPair(Query("q1", "alpha?", QType.FACT), "a", Provenance.ANNOTATED)]
    save_pairs(pairs, tmp_path / "p.jsonl")
    assert load_pairs(tmp_path / "p.jsonl", corpus) == pairs
    save_pairs([QDPair(Query("q2", "x"), "zzz", Provenance.GENERATED)], tmp_path / "bad.jsonl")
    with pytest.raises(CorpusError, match="unknown doc_id"):
        load_pairs(tmp_path / "bad.jsonl", corpus)


def test_queries_roundtrip(tmp_path):
    qs = [Query("a", "first question", QType.FACT), Query("b", "second", QType.SOLUTION_SHORT)]
    save_queries(qs, tmp_path / "q.jsonl")
    assert load_queries(tmp_path / "q.jsonl") == qs
    write_lines(tmp_path / "dup.jsonl", ['{"id": "a", "text": "x"}', '{"id": "a", "text": "y"}'])
    with pytest.raises(CorpusError, match="duplicate query id"):
        load_queries(tmp_path / "dup.jsonl")


def test_with_provenance_keeps_key():
    p = QDPair(Query("q", "text"), "d", Provenance.GENERATED)
    seed = p.with_provenance(Provenance.SEED)
    assert seed.key == p.key and seed.provenance is Provenance.SEED
