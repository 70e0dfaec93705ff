"""Per-document chain-of-thought answering and log-probability answer integration."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

from .corpus import Corpus, Document, Query
from .llm import LlmClient, LlmError, LlmRequest, LlmResponse
from .validation import check_positive_int, query_text

logger = logging.getLogger(__name__)

COT_INSTRUCTION = (
    "Please follow the steps below to ensure an accurate response:\n"
    "1. Thoroughly read the provided document and provide a brief yet comprehensive summary of its main points.\n"
    "2. Assess and elucidate how the given document can be applied to address the given question.\n"
    '3. If the document is deemed irrelevant, indicate this by outputting the term "irrelevant". '
    "Otherwise, provide the answer along with the corresponding supporting information."
)
DOC_OPEN = "Document:\n"
QUESTION_OPEN = "Question:\n"
ANSWER_DELIMITER = "Answer:"
IRRELEVANT = "irrelevant"


class CotParseError(ValueError):
    pass


@dataclass(frozen=True)
class CotPrompt:
    doc_text: str
    question: str
    rendered: str


def document_question_input(doc_text: str, question: str) -> str:
    return f"{DOC_OPEN}{doc_text}\n\n{QUESTION_OPEN}{question}\n"


def build_cot_prompt(doc, q) -> CotPrompt:
    doc_text = doc.text if isinstance(doc, Document) else doc
    question = query_text(q)
    return CotPrompt(doc_text, question, f"{COT_INSTRUCTION}\n\n{document_question_input(doc_text, question)}")


@dataclass(frozen=True)
class CotAnswer:
    doc_id: str
    summary: str
    verdict: str  # "relevant" | "irrelevant"
    answer_text: str
    mean_logprob: float
    rank: int = 0

    def __post_init__(self):
        if self.verdict not in ("relevant", "irrelevant"):
            raise ValueError(f"bad verdict {self.verdict!r}")
        if (self.verdict == "irrelevant") != (self.answer_text == ""):
            raise ValueError("answer_text must be empty exactly when the verdict is irrelevant")
        if not math.isfinite(self.mean_logprob) or self.mean_logprob > 0:
            raise ValueError(f"mean_logprob must be finite and <= 0, got {self.mean_logprob}")

    @property
    def relevant(self) -> bool:
        return self.verdict == "relevant"

    @property
    def probability(self) -> float:
        return math.exp(self.mean_logprob)

    def to_json(self) -> dict:
        return {"doc_id": self.doc_id, "rank": self.rank, "verdict": self.verdict, "summary": self.summary,
                "answer": self.answer_text, "mean_logprob": self.mean_logprob, "probability": self.probability}


def irrelevant_answer(doc_id: str, rank: int = 0, summary: str = "") -> CotAnswer:
    return CotAnswer(doc_id, summary, "irrelevant", "", 0.0, rank)


def parse_cot_response(resp: LlmResponse, doc_id: str = "", rank: int = 0, marker: str = IRRELEVANT,
                       delimiter: str = ANSWER_DELIMITER) -> CotAnswer:
    """Split a CoT response into summary and answer and score the answer span.

    The answer span starts after the last ``delimiter`` (case-insensitive).
    ``mean_logprob`` averages the logprobs of the tokens overlapping that span.
    """
    if resp.token_logprobs is None:
        raise CotParseError("response carries no token logprobs")
    for tok, lp in resp.token_logprobs:
        if not lp <= 0:
            raise CotParseError(f"token {tok!r} has logprob {lp} > 0")
    text = resp.text
    cut = text.lower().rfind(delimiter.lower())
    if cut < 0:
        raise CotParseError(f"no {delimiter!r} delimiter in response")
    summary = text[:cut].strip()
    start = cut + len(delimiter)
    while start < len(text) and text[start].isspace():
        start += 1
    answer = text[start:].strip()

    span, pos = [], 0
    for tok, lp in resp.token_logprobs:
        end = pos + len(tok)
        if end > start and tok.strip():
            span.append(lp)
        pos = end
    mean_lp = sum(span) / len(span) if span else 0.0

    if not answer or answer.casefold().startswith(marker.casefold()):
        return CotAnswer(doc_id, summary, "irrelevant", "", mean_lp, rank)
    return CotAnswer(doc_id, summary, "relevant", answer, mean_lp, rank)


def integrate_answers(answers: Sequence[CotAnswer]) -> Optional[CotAnswer]:
    """Relevant answer with the highest mean logprob; ties go to the better rank, then doc_id."""
    relevant = [a for a in answers if a.relevant]
    if not relevant:
        return None
    return min(relevant, key=lambda a: (-a.mean_logprob, a.rank, a.doc_id))


@dataclass
class IntegrationResult:
    final: Optional[CotAnswer]
    retrieval_rounds_used: int
    candidates_examined: int
    answers: List[CotAnswer] = field(default_factory=list)
    question_id: str = ""
    question: str = ""

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "question": self.question,
            "rounds": self.retrieval_rounds_used,
            "candidates_examined": self.candidates_examined,
            "chosen_doc_id": self.final.doc_id if self.final else None,
            "final_answer": self.final.answer_text if self.final else None,
            "answers": [a.to_json() for a in self.answers],
        }


Retriever = Callable[[Query, int], List[Tuple[str, float]]]


def _ask(client: LlmClient, doc: Document, q: Query, rank: int, marker: str, max_tokens: int) -> CotAnswer:
    prompt = build_cot_prompt(doc, q)
    try:
        resp = client.generate(LlmRequest(prompt.rendered, max_tokens, 0.0, want_logprobs=True))
        return parse_cot_response(resp, doc.id, rank, marker)
    except CotParseError as exc:
        logger.warning("unparseable answer for %s / %s, treated as irrelevant: %s", q.id, doc.id, exc)
    except LlmError as exc:
        logger.warning("generation failed for %s / %s, treated as irrelevant: %s", q.id, doc.id, exc)
    return irrelevant_answer(doc.id, rank)


def answer_question(q: Query, retriever: Retriever, client: LlmClient, corpus: Corpus, k: int = 5,
                    max_rounds: int = 2, marker: str = IRRELEVANT, concurrency: int = 4,
                    max_tokens: int = 512) -> IntegrationResult:
    """Prompt each retrieved document separately, paging ``k`` deeper per round.

    Stops at the first round whose answers integrate to a relevant answer, at
    ``max_rounds``, or when the ranking runs out.
    """
    check_positive_int(k, "k")
    check_positive_int(max_rounds, "max_rounds")
    ranked = retriever(q, k * max_rounds)
    result = IntegrationResult(None, 0, 0, question_id=q.id, question=q.text)
    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        for r in range(max_rounds):
            page = ranked[r * k:(r + 1) * k]
            if not page:
                break
            ranks = range(r * k + 1, r * k + len(page) + 1)
            answers = list(pool.map(lambda item: _ask(client, corpus[item[0][0]], q, item[1], marker, max_tokens),
                                    zip(page, ranks)))
            result.retrieval_rounds_used += 1
            result.candidates_examined += len(page)
            result.answers.extend(answers)
            result.final = integrate_answers(answers)
            if result.final is not None:
                break
    return result


def write_trace(results: Sequence[IntegrationResult], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for res in results:
            f.write(json.dumps(res.to_json(), ensure_ascii=False) + "\n")


def export_generation_finetune(qa_pairs: Sequence[Tuple[Query, str]], retriever: Retriever, corpus: Corpus,
                               k: int, path) -> int:
    """One ``{instruction, input, output}`` record per (question, retrieved document)."""
    check_positive_int(k, "k")
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for q, gold in qa_pairs:
            try:
                ranked = retriever(q, k)
            except Exception as exc:  # noqa: BLE001 - skip the pair, keep exporting
                logger.warning("retrieval failed for %s, pair skipped: %s", q.id, exc)
                continue
            for doc_id, _ in ranked[:k]:
                rec = {"instruction": COT_INSTRUCTION,
                       "input": document_question_input(corpus[doc_id].text, q.text),
                       "output": gold}
                f.write(json.dumps(rec, ensure_ascii=False) + "\n")
                count += 1
    return count
