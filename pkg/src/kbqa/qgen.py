"""Pseudo question generation and the question-generation fine-tune export."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

from .corpus import Corpus, Document, Provenance, QDPair, Query, QType
from .llm import LlmClient, LlmError, LlmRequest

logger = logging.getLogger(__name__)

TEMPLATE_VERSION = "1"

FACT_INSTRUCTION = (
    "Please carefully review the provided document and formulate specific questions that directly "
    "relate to its content. It is important that the answers to these questions can be located within "
    "the document itself."
)
SOLUTION_INSTRUCTION = (
    "Please conduct a thorough analysis of the project or technical background outlined in the document. "
    "Begin by summarizing the current situation, the specific task at hand, the proposed solution, and the "
    "eventual outcome. Additionally, formulate specific questions that effectively integrate the given "
    "scenarios and tasks."
)

DOC_MARKER = "Document:"
OUT_MARKER = "Questions:"

_LIST_PREFIX = re.compile(r"^\s*(?:[-*•]|\d+[.)]|q\d*[:.])\s*", re.IGNORECASE)


@dataclass(frozen=True)
class InstructionTemplate:
    name: str
    system_text: str
    qtype: QType

    def render(self, doc_text: str) -> str:
        return f"{self.system_text}\n\n{DOC_MARKER}\n{doc_text}\n\n{OUT_MARKER}\n"


FACT_TEMPLATE = InstructionTemplate("fact", FACT_INSTRUCTION, QType.FACT)
# answer length is unknown at generation time, so "solution" maps to the short subtype
SOLUTION_TEMPLATE = InstructionTemplate("solution", SOLUTION_INSTRUCTION, QType.SOLUTION_SHORT)
TEMPLATES = {"fact": FACT_TEMPLATE, "solution": SOLUTION_TEMPLATE}

_QTYPE_TEMPLATE = {
    QType.FACT: FACT_TEMPLATE,
    QType.SOLUTION_SHORT: SOLUTION_TEMPLATE,
    QType.SOLUTION_LONG: SOLUTION_TEMPLATE,
}


def get_template(name: str) -> InstructionTemplate:
    try:
        return TEMPLATES[name]
    except KeyError:
        raise ValueError(f"unknown template {name!r}; choose from {sorted(TEMPLATES)}") from None


def parse_questions(text: str, limit: int) -> List[str]:
    """One question per non-empty line, list markers stripped, first ``limit`` kept."""
    out = []
    for line in text.splitlines():
        q = _LIST_PREFIX.sub("", line).strip()
        if q:
            out.append(q)
            if len(out) == limit:
                break
    return out


class GeneratedPairs(list):
    """List of QDPair plus per-document failure bookkeeping."""

    def __init__(self, items=()):
        super().__init__(items)
        self.errors: Dict[str, str] = {}
        self.zero_yield: List[str] = []


def generate_questions(client: LlmClient, corpus: Corpus, template: InstructionTemplate, per_doc: int = 3,
                       max_tokens: int = 256, temperature: float = 0.8, concurrency: int = 4) -> GeneratedPairs:
    if per_doc < 1:
        raise ValueError("per_doc must be >= 1")
    docs = list(corpus)

    def call(doc: Document):
        try:
            return client.generate(LlmRequest(template.render(doc.text), max_tokens, temperature)), None
        except (LlmError, OSError) as exc:
            return None, str(exc)

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        responses = list(pool.map(call, docs))  # map keeps input order

    out = GeneratedPairs()
    for doc, (resp, err) in zip(docs, responses):
        if err is not None:
            out.errors[doc.id] = err
            logger.warning("question generation failed for %s: %s", doc.id, err)
            continue
        questions = parse_questions(resp.text, per_doc)
        if not questions:
            out.zero_yield.append(doc.id)
            continue
        for i, text in enumerate(questions):
            q = Query(f"{doc.id}::{template.name}::{i}", text, template.qtype)
            out.append(QDPair(q, doc.id, Provenance.GENERATED))
    return out


def export_qgen_finetune(pairs: Sequence[QDPair], corpus: Corpus, template: Optional[InstructionTemplate],
                         path) -> int:
    """Write ``{instruction, input, output}`` JSONL, ordered by (doc_id, query_id).

    With ``template=None`` each pair uses the template matching its qtype.
    """
    records = []
    for p in pairs:
        if p.provenance is not Provenance.ANNOTATED:
            raise ValueError(f"pair {p.key} is not annotated (provenance={p.provenance.value})")
        if p.doc_id not in corpus:
            raise KeyError(f"pair {p.key} references unknown document {p.doc_id!r}")
        tpl = template or _QTYPE_TEMPLATE.get(p.query.qtype, FACT_TEMPLATE)
        records.append(((p.doc_id, p.query.id), {
            "instruction": tpl.system_text,
            "input": corpus[p.doc_id].text,
            "output": p.query.text,
        }))
    records.sort(key=lambda r: r[0])
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for _, rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return len(records)


def read_finetune(path) -> List[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
