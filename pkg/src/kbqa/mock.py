"""Deterministic offline LLM clients used by tests and the synthetic pipeline."""

from __future__ import annotations

import hashlib
import re
from typing import Callable, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .corpus import tokenize
from .llm import LlmRequest, LlmResponse
from .qgen import DOC_MARKER, FACT_INSTRUCTION, OUT_MARKER

_CHUNK = re.compile(r"\s*\S+")


def stable_seed(*parts) -> int:
    h = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def with_logprobs(text: str, logprob_for: Callable[[int, str], float]) -> LlmResponse:
    """Split ``text`` into whitespace-led chunks and attach a logprob to each."""
    chunks = _CHUNK.findall(text)
    tail = text[len("".join(chunks)):]
    if tail:
        chunks.append(tail)
    return LlmResponse(text, [(c, logprob_for(i, c)) for i, c in enumerate(chunks)])


def qgen_document(prompt: str) -> str:
    start = prompt.index(DOC_MARKER) + len(DOC_MARKER) + 1
    end = prompt.rindex("\n\n" + OUT_MARKER)
    return prompt[start:end]


class EchoQuestionClient:
    """Answers every generation prompt with ``Q: <first 5 doc tokens>?``."""

    def __init__(self):
        self.calls = 0

    def generate(self, request: LlmRequest) -> LlmResponse:
        self.calls += 1
        toks = tokenize(qgen_document(request.prompt))[:5]
        return LlmResponse(f"Q: {' '.join(toks)}?")


class TopicQuestionClient:
    """Template-aware question writer for documents built from a known vocabulary.

    Each question combines ``topics_per_question`` topic words found in the
    document with ``n_context`` common words drawn from ``context_words``
    (weighted by ``context_weights``), the way real questions mix specific
    terms with generic ones. Output depends only on the document text, the
    instruction and ``salt``.
    """

    def __init__(self, topics: Iterable[str], context_words: Sequence[str], context_weights=None,
                 n_lines: int = 3, topics_per_question: int = 3, n_context: int = 3, salt: str = ""):
        self.topics = frozenset(topics)
        self.context_words = list(context_words)
        w = np.ones(len(self.context_words)) if context_weights is None else np.asarray(context_weights, float)
        self.context_p = w / w.sum()
        self.n_lines = n_lines
        self.topics_per_question = topics_per_question
        self.n_context = n_context
        self.salt = salt

    def questions_for(self, doc_text: str, fact: bool) -> List[str]:
        keys = list(dict.fromkeys(t for t in tokenize(doc_text) if t in self.topics))
        if len(keys) < self.topics_per_question:
            return []
        rng = np.random.default_rng(stable_seed(self.salt, fact, doc_text))
        lead = "what is the" if fact else "how can we improve the"
        lines = []
        for _ in range(self.n_lines):
            picked = [keys[i] for i in rng.choice(len(keys), size=self.topics_per_question, replace=False)]
            ctx = [self.context_words[i] for i in
                   rng.choice(len(self.context_words), size=self.n_context, replace=False, p=self.context_p)]
            words = picked + ctx
            order = rng.permutation(len(words))
            lines.append(f"{lead} {' '.join(words[i] for i in order)}?")
        return lines

    def generate(self, request: LlmRequest) -> LlmResponse:
        fact = request.prompt.startswith(FACT_INSTRUCTION)
        return LlmResponse("\n".join(self.questions_for(qgen_document(request.prompt), fact)))


def cot_segments(prompt: str) -> Tuple[str, str]:
    """Recover (document, question) from a rendered CoT prompt."""
    from .generation import DOC_OPEN, QUESTION_OPEN

    d0 = prompt.index(DOC_OPEN) + len(DOC_OPEN)
    q0 = prompt.rindex(QUESTION_OPEN)
    return prompt[d0:q0].strip(), prompt[q0 + len(QUESTION_OPEN):].strip()


class KeyedCotClient:
    """CoT answerer that is 'relevant' iff the document contains the question's key.

    ``keys`` maps question text to an answer key phrase. Answer-token
    logprobs are deterministic in (question, document), in [-1, 0).
    """

    def __init__(self, keys: Mapping[str, str], marker: str = "Irrelevant"):
        self.keys = dict(keys)
        self.marker = marker
        self.calls = 0

    def generate(self, request: LlmRequest) -> LlmResponse:
        self.calls += 1
        doc, question = cot_segments(request.prompt)
        key = self.keys.get(question)
        summary = " ".join(doc.split()[:8])
        if key is not None and re.search(rf"(?<!\w){re.escape(key)}(?!\w)", doc):
            text = f"Summary: {summary}. The document covers the question. Answer: the reference code is {key}."
        else:
            text = f"Summary: {summary}. The document does not address the question. Answer: {self.marker}."
        rng = np.random.default_rng(stable_seed(question, doc))
        lps = -rng.uniform(0.0, 1.0, size=len(_CHUNK.findall(text)) + 1)
        return with_logprobs(text, lambda i, _c: float(lps[i]))


class ScriptedClient:
    """Returns canned responses chosen by the first matching prompt substring."""

    def __init__(self, script: Iterable[Tuple[str, LlmResponse]], default: Optional[LlmResponse] = None):
        self.script = list(script)
        self.default = default
        self.prompts: List[str] = []

    def generate(self, request: LlmRequest) -> LlmResponse:
        self.prompts.append(request.prompt)
        for needle, resp in self.script:
            if needle in request.prompt:
                return resp
        if self.default is None:
            raise KeyError("no scripted response matches the prompt")
        return self.default


class RoutingClient:
    """Sends CoT answering prompts to ``cot`` and everything else to ``qgen``."""

    def __init__(self, qgen, cot):
        self.qgen = qgen
        self.cot = cot

    def generate(self, request: LlmRequest) -> LlmResponse:
        from .generation import COT_INSTRUCTION

        target = self.cot if request.prompt.startswith(COT_INSTRUCTION) else self.qgen
        return target.generate(request)
