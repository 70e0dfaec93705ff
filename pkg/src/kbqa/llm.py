"""LLM client boundary: request/response records and an HTTP client.

Wire protocol: ``POST {endpoint}/v1/generate`` with JSON body
``{prompt, max_tokens, temperature, want_logprobs}``; the response body is
``{text, token_logprobs: [[token, logprob], ...] | null}``.
"""

from __future__ import annotations

import json
import os
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass
from typing import List, Optional, Protocol, Tuple

ENDPOINT_ENV = "KBQA_LLM_ENDPOINT"


class LlmError(RuntimeError):
    """Transport or protocol failure talking to an LLM backend."""


@dataclass(frozen=True)
class LlmRequest:
    prompt: str
    max_tokens: int = 256
    temperature: float = 0.8
    want_logprobs: bool = False

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LlmResponse:
    text: str
    token_logprobs: Optional[List[Tuple[str, float]]] = None

    def __post_init__(self):
        if self.token_logprobs is not None:
            toks = [(str(t), float(lp)) for t, lp in self.token_logprobs]
            object.__setattr__(self, "token_logprobs", toks)
            if "".join(t for t, _ in toks) != self.text:
                raise LlmError("token_logprobs do not reconstruct the response text")

    @classmethod
    def from_json(cls, body: dict, want_logprobs: bool = False) -> "LlmResponse":
        if not isinstance(body, dict) or not isinstance(body.get("text"), str):
            raise LlmError("response body must be an object with a string 'text'")
        lps = body.get("token_logprobs")
        if want_logprobs and lps is None:
            raise LlmError("logprobs requested but missing from response")
        return cls(body["text"], lps)

    def to_json(self) -> dict:
        lps = None if self.token_logprobs is None else [[t, lp] for t, lp in self.token_logprobs]
        return {"text": self.text, "token_logprobs": lps}


class LlmClient(Protocol):
    def generate(self, request: LlmRequest) -> LlmResponse: ...


class HttpLlmClient:
    def __init__(self, endpoint: Optional[str] = None, timeout: float = 60.0):
        endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise LlmError(f"no LLM endpoint configured (set client.endpoint or ${ENDPOINT_ENV})")
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout

    def generate(self, request: LlmRequest) -> LlmResponse:
        req = urllib.request.Request(
            self.endpoint + "/v1/generate",
            data=json.dumps(request.to_json()).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise LlmError(f"LLM request failed: {exc}") from exc
        return LlmResponse.from_json(body, request.want_logprobs)
