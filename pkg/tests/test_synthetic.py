import json

import pytest

from kbqa.corpus import Provenance, load_pairs
from kbqa.generation import build_cot_prompt
from kbqa.llm import LlmRequest
from kbqa.qgen import FACT_TEMPLATE
from kbqa.synthetic import load_synthetic_client, make_synthetic, snippet_pairs, write_bundle, zipf_weights


@pytest.fixture(scope="module")
def kb(tmp_path_factory):
    return make_synthetic(tmp_path_factory.mktemp("syn"), n_docs=120, n_heldout=30, n_short=7)


def test_structure(kb):
    assert len(kb.corpus) == 120 and kb.dropped == 7
    assert len(kb.pool) == 120 * 3
    assert len(kb.noise) == round(0.2 * len(kb.pool))
    by_key = {p.key: p for p in kb.pool}
    assert all(k in by_key for k in kb.noise)
    assert len(set(kb.answer_keys.values())) == len(kb.answer_keys)


def test_noise_points_away_from_source(kb):
    for p in kb.pool:
        source = p.query.id.split("::")[0]
        assert (p.doc_id != source) == (p.key in kb.noise)


def test_heldout_is_disjoint_and_keyed(kb):
    train = {p.query.text for p in kb.pool}
    assert len(kb.heldout) == 30
    for q in kb.heldout:
        assert q.text not in train
        (doc_id,) = kb.heldout_qrels[q.id]
        assert kb.heldout_keys[q.text] in kb.corpus[doc_id].text


def test_deterministic(tmp_path):
    a = make_synthetic(tmp_path / "a", n_docs=50, n_heldout=5, n_short=0)
    b = make_synthetic(tmp_path / "b", n_docs=50, n_heldout=5, n_short=0)
    assert a.pool == b.pool and a.heldout == b.heldout
    assert (tmp_path / "a/synthetic_corpus.jsonl").read_bytes() == (tmp_path / "b/synthetic_corpus.jsonl").read_bytes()


def test_zipf_weights():
    w = zipf_weights(4, 1.0)
    assert w.sum() == pytest.approx(1.0) and list(w) == sorted(w, reverse=True)


def test_snippet_pairs(kb):
    pairs, noise = snippet_pairs(kb, n=60, noise_rate=0.5, seed=3)
    assert len(pairs) == 60 and 0 < len(noise) < 60
    for p in pairs:
        assert len(p.query.text.split()) == 10


def test_bundle_and_client(kb, tmp_path):
    paths = write_bundle(kb, tmp_path, n_qa=10, n_annotated=20)
    annotated = load_pairs(paths["annotated"], kb.corpus)
    assert len(annotated) == 20 and all(p.provenance is Provenance.ANNOTATED for p in annotated)
    assert not any(p.key in kb.noise for p in annotated)
    qa = [json.loads(line) for line in paths["qa_pairs"].read_text().splitlines()]
    assert len(qa) == 10 and qa[0]["answer"].startswith("the reference code is")

    client = load_synthetic_client(paths["meta"], per_doc=2)
    doc = kb.corpus[kb.corpus.ids[0]]
    lines = client.generate(LlmRequest(FACT_TEMPLATE.render(doc.text))).text.splitlines()
    assert len(lines) == 2 and all(line.startswith("what is the") for line in lines)

    q = kb.heldout[0]
    (source,) = kb.heldout_qrels[q.id]
    other = next(d for d in kb.corpus.ids if d != source)
    hit = client.generate(LlmRequest(build_cot_prompt(kb.corpus[source], q).rendered, want_logprobs=True))
    miss = client.generate(LlmRequest(build_cot_prompt(kb.corpus[other], q).rendered, want_logprobs=True))
    assert kb.heldout_keys[q.text] in hit.text and "Irrelevant" in miss.text
