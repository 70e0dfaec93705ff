import json
import logging
from pathlib import Path

import numpy as np
import pytest

from kbqa.corpus import Corpus, Document, Query
from kbqa.generation import (COT_INSTRUCTION, CotAnswer, CotParseError, answer_question, build_cot_prompt,
                             export_generation_finetune, integrate_answers, parse_cot_response, write_trace)
from kbqa.llm import LlmError, LlmResponse
from kbqa.mock import KeyedCotClient, ScriptedClient, cot_segments, with_logprobs
from oracles import oracle_integrate

DATA = Path(__file__).parent / "data"


def random_answers(rng):
    out = []
    for i in range(int(rng.integers(0, 8))):
        relevant = rng.random() < 0.6
        # coarse grid so ties actually happen
        lp = -float(rng.integers(0, 4)) / 2
        out.append(CotAnswer(f"d{rng.integers(0, 5)}", "s", "relevant" if relevant else "irrelevant",
                             "ans" if relevant else "", lp, int(rng.integers(1, 4))))
    return out


def tokens(*pairs):
    return LlmResponse("".join(t for t, _ in pairs), list(pairs))


# -- prompt -----------------------------------------------------------------

def test_prompt_golden_file():
    doc = Document("kb-17", "The VPN client must be version 4.2 or later. Reset passwords from the "
                            "self-service portal.", 17)
    p = build_cot_prompt(doc, Query("q1", "How do I reset my VPN password?"))
    assert p.rendered == (DATA / "cot_prompt_golden.txt").read_text(encoding="utf-8")


def test_prompt_order_and_document_only_difference():
    q = Query("q", "Which port?")
    a = build_cot_prompt(Document("a", "first body", 2), q).rendered
    b = build_cot_prompt(Document("b", "second body", 2), q).rendered
    assert a.startswith(COT_INSTRUCTION)
    assert a.index(COT_INSTRUCTION) < a.index("first body") < a.index("Which port?")
    assert a.replace("first body", "second body") == b
    assert cot_segments(a) == ("first body", "Which port?")


# -- parsing ----------------------------------------------------------------

def test_parse_irrelevant_marker():
    resp = with_logprobs("Summary: about printers. Answer: Irrelevant.", lambda i, c: -0.2)
    ans = parse_cot_response(resp, "d1", 2)
    assert ans.verdict == "irrelevant" and ans.answer_text == "" and not ans.relevant
    assert ans.summary == "Summary: about printers."


def test_parse_mean_logprob_over_answer_span_only():
    resp = tokens(("Summary:", -3.0), (" x.", -2.0), (" Answer:", -4.0), (" yes", -0.5), (" no", -1.5))
    ans = parse_cot_response(resp, "d1")
    assert ans.answer_text == "yes no" and ans.verdict == "relevant"
    assert ans.mean_logprob == -1.0
    assert ans.probability == pytest.approx(np.exp(-1.0))


def test_parse_token_straddling_the_delimiter_counts():
    resp = tokens(("Answer", -1.0), (": 42", -0.25))
    assert parse_cot_response(resp).mean_logprob == -0.25


def test_parse_marker_is_prefix_and_case_insensitive():
    resp = with_logprobs("Answer: IRRELEVANT - the document covers printers", lambda i, c: -0.1)
    assert parse_cot_response(resp).verdict == "irrelevant"
    resp = with_logprobs("Answer: not applicable", lambda i, c: -0.1)
    assert parse_cot_response(resp, marker="Not applicable").verdict == "irrelevant"
    assert parse_cot_response(resp).verdict == "relevant"


@pytest.mark.parametrize("resp, needle", [
    (LlmResponse("Answer: x"), "no token logprobs"),
    (tokens(("no delimiter", -1.0)), "delimiter"),
    (tokens(("Answer:", -1.0), (" x", 0.5)), "> 0"),
])
def test_parse_errors(resp, needle):
    with pytest.raises(CotParseError, match=needle):
        parse_cot_response(resp)


def test_cot_answer_invariants():
    with pytest.raises(ValueError):
        CotAnswer("d", "", "irrelevant", "text", -1.0)
    with pytest.raises(ValueError):
        CotAnswer("d", "", "relevant", "", -1.0)
    with pytest.raises(ValueError):
        CotAnswer("d", "", "relevant", "x", 0.1)
    with pytest.raises(ValueError):
        CotAnswer("d", "", "maybe", "x", -1.0)


# -- integration ------------------------------------------------------------

def test_integrate_basic_cases():
    irr = CotAnswer("a", "", "irrelevant", "", -0.01, 1)
    assert integrate_answers([]) is None
    assert integrate_answers([irr, irr]) is None
    only = CotAnswer("b", "", "relevant", "x", -9.0, 3)
    assert integrate_answers([irr, only]) is only


def test_integrate_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        answers = random_answers(rng)
        assert integrate_answers(answers) == oracle_integrate(answers)


# -- answering loop ---------------------------------------------------------

@pytest.fixture
def kb():
    texts = [(f"d{i}", f"document {i} filler text" + (" code ZX-9" if i == 7 else "")) for i in range(12)]
    return Corpus.from_texts(texts)


def fixed_ranking(ids):
    return lambda q, k: [(d, 1.0 - i / 100) for i, d in enumerate(ids)][:k]


def test_all_irrelevant_counts_candidates(kb):
    client = ScriptedClient([], default=with_logprobs("s. Answer: Irrelevant.", lambda i, c: -0.3))
    res = answer_question(Query("q", "what code?"), fixed_ranking(kb.ids), client, kb, k=5, max_rounds=2)
    assert res.final is None and res.retrieval_rounds_used == 2 and res.candidates_examined == 10
    assert len(client.prompts) == 10


def test_first_round_hit_stops(kb):
    client = KeyedCotClient({"what code?": "ZX-9"})
    ranking = fixed_ranking(["d3", "d7"] + [d for d in kb.ids if d not in ("d3", "d7")])
    res = answer_question(Query("q", "what code?"), ranking, client, kb, k=5, max_rounds=3)
    assert res.retrieval_rounds_used == 1 and res.final.doc_id == "d7" and res.final.rank == 2
    assert client.calls == 5


def test_second_round_pages_deeper(kb):
    client = KeyedCotClient({"what code?": "ZX-9"})
    ids = [d for d in kb.ids if d != "d7"]
    ranking = fixed_ranking(ids[:6] + ["d7"] + ids[6:])
    res = answer_question(Query("q", "what code?"), ranking, client, kb, k=3, max_rounds=3)
    assert res.retrieval_rounds_used == 3 and res.final.doc_id == "d7" and res.final.rank == 7
    assert [a.rank for a in res.answers] == list(range(1, 10))


def test_retriever_exhaustion(kb):
    client = KeyedCotClient({})
    res = answer_question(Query("q", "x?"), fixed_ranking(["d0", "d1", "d2"]), client, kb, k=2, max_rounds=4)
    assert res.final is None and res.retrieval_rounds_used == 2 and res.candidates_examined == 3


def test_each_prompt_holds_one_document(kb):
    client = ScriptedClient([], default=with_logprobs("Answer: irrelevant", lambda i, c: -1.0))
    answer_question(Query("q", "x?"), fixed_ranking(kb.ids), client, kb, k=4, max_rounds=3)
    for prompt in client.prompts:
        assert prompt.count("Document:\n") == 1
        doc, _ = cot_segments(prompt)
        assert sum(d.text == doc for d in kb) == 1


def test_monotone_budget(kb):
    client = KeyedCotClient({"what code?": "ZX-9"})
    ranking = fixed_ranking([d for d in kb.ids if d != "d7"][:8] + ["d7"])
    found = [answer_question(Query("q", "what code?"), ranking, client, kb, k=3, max_rounds=r).final
             for r in range(1, 5)]
    first = next(i for i, f in enumerate(found) if f is not None)
    assert all(f == found[first] for f in found[first:])


class BrokenClient:
    def generate(self, request):
        if "document 1 " in request.prompt:
            raise LlmError("timeout")
        return LlmResponse("no delimiter here", [("no delimiter here", -1.0)])


def test_failures_become_irrelevant_with_warning(kb, caplog):
    with caplog.at_level(logging.WARNING, logger="kbqa.generation"):
        res = answer_question(Query("q", "x?"), fixed_ranking(kb.ids), BrokenClient(), kb, k=3, max_rounds=1)
    assert res.final is None and all(a.verdict == "irrelevant" for a in res.answers)
    assert "treated as irrelevant" in caplog.text


def test_concurrency_does_not_change_result(kb):
    client = KeyedCotClient({"what code?": "ZX-9"})
    runs = [answer_question(Query("q", "what code?"), fixed_ranking(kb.ids), client, kb, k=12, max_rounds=1,
                            concurrency=c) for c in (1, 8)]
    assert runs[0].answers == runs[1].answers


def test_bad_budget_raises(kb):
    with pytest.raises(ValueError):
        answer_question(Query("q", "x?"), fixed_ranking(kb.ids), KeyedCotClient({}), kb, k=0)


def test_trace_export(tmp_path, kb):
    client = KeyedCotClient({"what code?": "ZX-9"})
    res = answer_question(Query("q9", "what code?"), fixed_ranking(kb.ids), client, kb, k=12, max_rounds=1)
    write_trace([res], tmp_path / "t.jsonl")
    rec = json.loads((tmp_path / "t.jsonl").read_text())
    assert rec["question_id"] == "q9" and rec["chosen_doc_id"] == "d7"
    assert len(rec["answers"]) == 12
    assert {a["verdict"] for a in rec["answers"]} == {"relevant", "irrelevant"}


# -- fine-tune export -------------------------------------------------------

def test_export_generation_finetune(tmp_path, kb):
    qa = [(Query(f"q{i}", f"question {i}?"), f"answer {i}") for i in range(3)]
    n = export_generation_finetune(qa, fixed_ranking(kb.ids), kb, 1, tmp_path / "g.jsonl")
    recs = [json.loads(line) for line in (tmp_path / "g.jsonl").read_text().splitlines()]
    assert n == 3 and len(recs) == 3
    assert recs[0]["instruction"] == COT_INSTRUCTION and recs[0]["output"] == "answer 0"
    assert recs[0]["input"].index("document 0") < recs[0]["input"].index("question 0?")


def test_export_skips_failed_retrieval(tmp_path, kb, caplog):
    def flaky(q, k):
        if q.id == "q1":
            raise RuntimeError("index offline")
        return fixed_ranking(kb.ids)(q, k)

    qa = [(Query(f"q{i}", f"question {i}?"), "a") for i in range(3)]
    with caplog.at_level(logging.WARNING):
        n = export_generation_finetune(qa, flaky, kb, 2, tmp_path / "g.jsonl")
    assert n == 4 and "q1" in caplog.text
