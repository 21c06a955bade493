"""LM backends: deterministic mocks for offline verification, plus HTTP.

Every mock sets ``instant = True`` so the scheduler dispatches serially and
derives nothing from completion interleaving.
"""
from __future__ import annotations

import json
import math
import os
import re
import threading

import httpx

from .errors import BackendError
from .runtime import KeyedOracleConfig, LmRequest, LmResult, keyed_compare

# Matches the first numeric key embedded in benchmark document text,
# e.g. "reports an accuracy of 93.20%".
DEFAULT_KEY_PATTERN = re.compile(r"(\d+(?:\.\d+)?)\s*%")


def _certain_logprobs(label_set, chosen: str) -> dict[str, float]:
    return {lab: (0.0 if lab == chosen else -math.inf) for lab in label_set}


class ConstantBackend:
    """Always answers the same text; free and usable as an always-True mock."""

    instant = True

    def __init__(self, text: str = "True", backend_id: str = "constant"):
        self.constant_text = text
        self.backend_id = backend_id

    def complete(self, request: LmRequest) -> LmResult:
        logprobs = None
        if request.label_set and self.constant_text in request.label_set:
            logprobs = _certain_logprobs(request.label_set, self.constant_text)
        return LmResult(text=self.constant_text, label_logprobs=logprobs, backend_id=self.backend_id)


class EchoBackend:
    """Returns the user prompt verbatim; handy for sem_map plumbing tests."""

    instant = True
    backend_id = "echo"

    def complete(self, request: LmRequest) -> LmResult:
        return LmResult(text=request.user_prompt, backend_id=self.backend_id)


class ScriptedBackend:
    """Plays back a fixed list of answers in submission order."""

    instant = True

    def __init__(self, answers, backend_id: str = "scripted"):
        self._answers = list(answers)
        self._pos = 0
        self._lock = threading.Lock()
        self.backend_id = backend_id

    def complete(self, request: LmRequest) -> LmResult:
        with self._lock:
            if self._pos >= len(self._answers):
                raise BackendError("scripted backend exhausted after %d answers" % self._pos)
            answer = self._answers[self._pos]
            self._pos += 1
        logprobs = None
        if request.label_set and answer in request.label_set:
            logprobs = _certain_logprobs(request.label_set, answer)
        return LmResult(text=answer, label_logprobs=logprobs, backend_id=self.backend_id)


class FnBackend:
    """Wraps a request -> LmResult function; stays deterministic per item."""

    instant = True

    def __init__(self, fn, backend_id: str = "fn"):
        self._fn = fn
        self.backend_id = backend_id

    def complete(self, request: LmRequest) -> LmResult:
        return self._fn(request)


def _extract_key(text: str, pattern: re.Pattern) -> float:
    m = pattern.search(text)
    if m is None:
        raise BackendError("no hidden key matching %r in %r" % (pattern.pattern, text[:120]))
    return float(m.group(1))


class KeyedCompareBackend:
    """Answers pairwise-comparison prompts from hidden keys in the documents.

    The prompt must carry "Document 1:" / "Document 2:" sections; the key is
    the first pattern match inside each. Noise follows the keyed oracle.
    """

    instant = True

    def __init__(self, cfg: KeyedOracleConfig, key_pattern=DEFAULT_KEY_PATTERN, backend_id: str = "keyed-compare"):
        self.cfg = cfg
        self.key_pattern = key_pattern
        self.backend_id = backend_id

    def complete(self, request: LmRequest) -> LmResult:
        prompt = request.user_prompt
        try:
            _, rest = prompt.split("Document 1:", 1)
            doc1, doc2 = rest.split("Document 2:", 1)
        except ValueError:
            raise BackendError("comparison prompt lacks Document 1/2 sections")
        key_i = _extract_key(doc1, self.key_pattern)
        key_j = _extract_key(doc2, self.key_pattern)
        result = keyed_compare(self.cfg, key_i, key_j)
        return LmResult(result.text, result.label_logprobs, backend_id=self.backend_id)


class KeyedFilterBackend:
    """Answers True/False from a hidden key against a threshold.

    temperature > 0 softens confidence Bradley-Terry style (the sampled
    answer stays the argmax); temperature 0 is exact with certainty 1.
    """

    instant = True

    def __init__(self, threshold: float = 50.0, temperature: float = 0.0,
                 key_pattern=DEFAULT_KEY_PATTERN, backend_id: str = "keyed-filter"):
        self.threshold = threshold
        self.temperature = temperature
        self.key_pattern = key_pattern
        self.backend_id = backend_id

    def complete(self, request: LmRequest) -> LmResult:
        key = _extract_key(request.user_prompt, self.key_pattern)
        if self.temperature <= 0:
            p_true = 1.0 if key > self.threshold else 0.0
        else:
            p_true = 1.0 / (1.0 + math.exp(-(key - self.threshold) / self.temperature))
        answer = "True" if p_true >= 0.5 else "False"
        lp = lambda p: math.log(p) if p > 0 else -math.inf
        logprobs = {"True": lp(p_true), "False": lp(1.0 - p_true)}
        return LmResult(text=answer, label_logprobs=logprobs, backend_id=self.backend_id)


class EqualityFilterBackend:
    """True iff the first two quoted strings in the prompt are equal."""

    instant = True
    backend_id = "equality-filter"

    def __init__(self, capture=re.compile(r'"([^"]*)"')):
        self.capture = capture

    def complete(self, request: LmRequest) -> LmResult:
        found = self.capture.findall(request.user_prompt)
        if len(found) < 2:
            raise BackendError("equality mock needs two quoted operands in the prompt")
        answer = "True" if found[0] == found[1] else "False"
        labels = request.label_set or ("True", "False")
        return LmResult(text=answer, label_logprobs=_certain_logprobs(labels, answer),
                        backend_id=self.backend_id)


class HttpChatBackend:
    """Chat-completion HTTP backend with per-token log-probabilities.

    Label log-probs are read from the first emitted token whose text is a
    prefix of exactly one label (answers spanning several tokens anchor on
    the first token).
    """

    instant = False

    def __init__(self, base_url: str, model: str, api_key_env: str = "SEMQUERY_API_KEY",
                 timeout: float = 60.0, client: httpx.Client | None = None,
                 backend_id: str | None = None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.backend_id = backend_id or ("http:" + model)
        self._client = client or httpx.Client(timeout=timeout)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = "Bearer " + key
        return headers

    def _messages(self, request: LmRequest) -> list[dict]:
        messages = [{"role": "system", "content": request.system_instruction}]
        for demo_in, demo_out in request.demonstrations or ():
            messages.append({"role": "user", "content": demo_in})
            messages.append({"role": "assistant", "content": demo_out})
        messages.append({"role": "user", "content": request.user_prompt})
        return messages

    def complete(self, request: LmRequest) -> LmResult:
        body = {
            "model": self.model,
            "messages": self._messages(request),
            "max_tokens": max(1, request.max_output_chars // 4),
        }
        if request.label_set:
            body["logprobs"] = True
            body["top_logprobs"] = 20
        resp = self._client.post(self.base_url + "/chat/completions",
                                 headers=self._headers(), content=json.dumps(body))
        resp.raise_for_status()
        payload = resp.json()
        choice = payload["choices"][0]
        text = choice["message"]["content"]
        logprobs = None
        if request.label_set:
            logprobs = self._label_logprobs(choice, request.label_set)
        return LmResult(text=text, label_logprobs=logprobs, backend_id=self.backend_id)

    def _label_logprobs(self, choice: dict, label_set) -> dict[str, float] | None:
        content = (choice.get("logprobs") or {}).get("content") or []
        if not content:
            return None
        first = content[0]
        out = {}
        for alt in [first] + list(first.get("top_logprobs", [])):
            token = alt["token"].strip()
            if not token:
                continue
            matches = [lab for lab in label_set if lab.startswith(token) or token.startswith(lab)]
            if len(matches) == 1 and matches[0] not in out:
                out[matches[0]] = float(alt["logprob"])
        if not out:
            return None
        floor = min(out.values()) - 20.0  # unseen labels get negligible mass
        return {lab: out.get(lab, floor) for lab in label_set}
