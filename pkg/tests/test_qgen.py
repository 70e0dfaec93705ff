import pytest

from kbqa.corpus import Corpus, Provenance, QDPair, Query, QType
from kbqa.llm import LlmError, LlmResponse
from kbqa.mock import EchoQuestionClient, ScriptedClient, TopicQuestionClient
from kbqa.qgen import (DOC_MARKER, FACT_INSTRUCTION, FACT_TEMPLATE, SOLUTION_INSTRUCTION, SOLUTION_TEMPLATE,
                       export_qgen_finetune, generate_questions, get_template, parse_questions, read_finetune)


@pytest.fixture
def corpus():
    return Corpus.from_texts([("a", "Reset the VPN password from the portal."),
                              ("b", "Printer toner replacement steps for floor two.")])


def test_render_contains_instruction_then_document():
    text = FACT_TEMPLATE.render("DOC BODY")
    assert text.startswith(FACT_INSTRUCTION)
    assert text.index(DOC_MARKER) < text.index("DOC BODY")
    assert SOLUTION_TEMPLATE.render("x").startswith(SOLUTION_INSTRUCTION)
    assert SOLUTION_TEMPLATE.qtype is QType.SOLUTION_SHORT


def test_get_template():
    assert get_template("fact") is FACT_TEMPLATE
    with pytest.raises(ValueError):
        get_template("nope")


def test_parse_questions_strips_list_markers():
    text = "1. What is X?\n- How to Y?\n\nQ3: Why Z?\n* extra"
    assert parse_questions(text, 3) == ["What is X?", "How to Y?", "Why Z?"]
    assert parse_questions("\n  \n", 3) == []


def test_generate_questions_ids_and_order(corpus):
    client = EchoQuestionClient()
    pairs = generate_questions(client, corpus, FACT_TEMPLATE, per_doc=2, concurrency=3)
    assert [p.query.id for p in pairs] == ["a::fact::0", "b::fact::0"]
    # the "Q:" marker is stripped like any list prefix
    assert pairs[0].query.text == "reset the vpn password from?"
    assert all(p.provenance is Provenance.GENERATED and p.query.qtype is QType.FACT for p in pairs)
    assert client.calls == 2


class FlakyClient:
    def generate(self, request):
        if "Printer" in request.prompt:
            raise LlmError("down")
        return LlmResponse("")


def test_failures_and_zero_yield_are_recorded(corpus):
    pairs = generate_questions(FlakyClient(), corpus, FACT_TEMPLATE)
    assert list(pairs) == []
    assert list(pairs.errors) == ["b"] and pairs.zero_yield == ["a"]


def test_per_doc_limit(corpus):
    client = ScriptedClient([], default=LlmResponse("q1?\nq2?\nq3?\nq4?"))
    assert len(generate_questions(client, corpus, SOLUTION_TEMPLATE, per_doc=3)) == 6
    with pytest.raises(ValueError):
        generate_questions(client, corpus, SOLUTION_TEMPLATE, per_doc=0)


def test_topic_client_is_deterministic_and_template_aware():
    topics = ["zorblat", "quintex", "varnish", "moltar"]
    client = TopicQuestionClient(topics, ["the", "of", "a"], n_context=1)
    doc = "zorblat quintex and varnish moltar."
    fact = client.questions_for(doc, True)
    assert fact == client.questions_for(doc, True)
    assert all(q.startswith("what is the") for q in fact)
    assert all(q.startswith("how can we improve") for q in client.questions_for(doc, False))
    assert client.questions_for("no topics here", True) == []


def test_export_qgen_finetune(tmp_path, corpus):
    pairs = [QDPair(Query("q2", "How to fix toner?", QType.SOLUTION_SHORT), "b", Provenance.ANNOTATED),
             QDPair(Query("q1", "Where is the portal?", QType.FACT), "a", Provenance.ANNOTATED)]
    n = export_qgen_finetune(pairs, corpus, None, tmp_path / "ft.jsonl")
    recs = read_finetune(tmp_path / "ft.jsonl")
    assert n == 2 and [r["output"] for r in recs] == ["Where is the portal?", "How to fix toner?"]
    assert recs[0]["instruction"] == FACT_INSTRUCTION and recs[1]["instruction"] == SOLUTION_INSTRUCTION
    assert recs[1]["input"] == corpus["b"].text
    first = (tmp_path / "ft.jsonl").read_bytes()
    export_qgen_finetune(list(reversed(pairs)), corpus, None, tmp_path / "ft.jsonl")
    assert (tmp_path / "ft.jsonl").read_bytes() == first


def test_export_rejects_generated_pairs(tmp_path, corpus):
    with pytest.raises(ValueError, match="not annotated"):
        export_qgen_finetune([QDPair(Query("q", "x"), "a", Provenance.GENERATED)], corpus, None, tmp_path / "x")
