"""Model-completion backends: an HTTP chat client and a deterministic mock.

The mock backend is the analytic core of the offline test suite. It treats a
skill as the set of ``T<digits>`` tokens in its text and answers the toy
questions ``MOCK:T<k>:<a>+<b>`` correctly exactly when the skill holds the
question's token. The reflect/velocity/skill-update behaviors are pure
functions of the rendered prompt, so whole optimization runs are exactly
reproducible and verifiable against closed-form expectations.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass

import requests

from .core import BackendSpec, DEFAULT_MAX_PARALLEL_CALLS, enforce_length

logger = logging.getLogger(__name__)

TOKEN_RE = re.compile(r"\bT\d+\b")
_MOCK_QUESTION_RE = re.compile(r"MOCK:(T\d+):(-?\d+)\+(-?\d+)")
_MAX_WORDS_RE = re.compile(r"at most (\d+) words")
_AGENT_ID_RE = re.compile(r'"agent_id": (\d+)')


class BackendError(RuntimeError):
    """Transport failure, bad credential, bad status, or empty completion."""


class MockWorldError(ValueError):
    """A mock request that does not follow the token-world grammar."""


@dataclass(frozen=True)
class ModelRequest:
    system_text: str
    user_text: str
    purpose: str  # solve | reflect | velocity | skill_update
    max_output_words: int
    agent_id: int
    iteration: int


@dataclass(frozen=True)
class ModelResponse:
    text: str
    latency_ms: float
    attempt_count: int


# =============================================================================
# Mock token world
# =============================================================================

def skill_tokens(text: str) -> set[str]:
    """The set of T<digits> tokens appearing in *text*."""
    return set(TOKEN_RE.findall(text))


def mock_world_answer(skill_text: str, question: str) -> tuple[str, str]:
    """Deterministic (reasoning, answer) for one token-world question.

    The reasoning lists the skill's tokens; the answer is correct iff the
    question's category token is among them, else "0".
    """
    match = _MOCK_QUESTION_RE.fullmatch(question.strip())
    if match is None:
        raise MockWorldError(f"malformed mock question: {question!r}")
    token, a, b = match.group(1), int(match.group(2)), int(match.group(3))
    total = a + b
    if total == 0:
        raise MockWorldError(f"mock question sums to zero: {question!r}")
    tokens = sorted(skill_tokens(skill_text))
    reasoning = "USED" + ("" if not tokens else " " + " ".join(tokens))
    answer = str(total) if token in skill_tokens(skill_text) else "0"
    return reasoning, answer


def _section(text: str, start: str, end: str | None = None) -> str:
    i = text.find(start)
    if i < 0:
        raise MockWorldError(f"prompt is missing expected section {start!r}")
    i += len(start)
    if end is None:
        return text[i:]
    j = text.find(end, i)
    if j < 0:
        raise MockWorldError(f"prompt is missing expected section end {end!r}")
    return text[i:j]


def _correct_reasoning_tokens(records_json: str) -> set[str]:
    records = json.loads(records_json)
    tokens: set[str] = set()
    for record in records:
        if record.get("correct"):
            tokens |= skill_tokens(str(record.get("reasoning", "")))
    return tokens


def _add_line(tokens: set[str]) -> str:
    return "ADD" + ("" if not tokens else " " + " ".join(sorted(tokens)))


def _mock_solve(prompt: str, fallback_agent_id: int) -> str:
    skill = _section(prompt, "Current skill file:\n", "\n\nSolve this problem")
    question_text = _section(prompt, "\nProblem:\n", "\n\nReturn exactly one JSON object")
    match = _MOCK_QUESTION_RE.search(question_text)
    if match is None:
        raise MockWorldError(f"no mock question in prompt problem section: {question_text!r}")
    reasoning, answer = mock_world_answer(skill, match.group(0))
    id_match = _AGENT_ID_RE.search(prompt)
    agent_id = int(id_match.group(1)) if id_match else fallback_agent_id
    return json.dumps({"agent_id": agent_id, "reasoning": reasoning, "answer": answer})


def _mock_reflect(prompt: str) -> str:
    skill = _section(prompt, "Current agent skill:\n", "\n\nAgent's own reasoning")
    own = _section(
        prompt, "Agent's own reasoning traces and answers:\n", "\n\nOther agents' reasoning"
    )
    peers = _section(prompt, "including correctness:\n", "\n\nInstruction:")
    learned = _correct_reasoning_tokens(own) | _correct_reasoning_tokens(peers)
    return _add_line(learned - skill_tokens(skill))


def _mock_velocity(prompt: str) -> str:
    previous = _section(prompt, "Previous velocity v_i:\n", "\n\nSelf-reflective direction")
    direction = _section(prompt, "Self-reflective direction d_i:\n", "\n\nCurrent skill s_i:")
    current = _section(prompt, "Current skill s_i:\n", "\n\nPersonal best skill p_i:")
    personal = _section(prompt, "Personal best skill p_i:\n", "\n\nGlobal best skill g:")
    global_best = _section(prompt, "Global best skill g:\n", "\n\nInstruction:")
    sources = (
        skill_tokens(previous)
        | skill_tokens(direction)
        | skill_tokens(personal)
        | skill_tokens(global_best)
    )
    return _add_line(sources - skill_tokens(current))


def _mock_skill_update(prompt: str) -> str:
    current = _section(prompt, "Current skill s_i:\n", "\n\nVelocity v_i:")
    velocity = _section(prompt, "Velocity v_i:\n", "\n\nInstruction:")
    present = skill_tokens(current)
    additions = []
    for token in TOKEN_RE.findall(velocity):
        if token not in present:
            present.add(token)
            additions.append(token)
    updated = current if not additions else current + " " + " ".join(additions)
    budget = _MAX_WORDS_RE.search(prompt)
    if budget:
        updated = enforce_length(updated, int(budget.group(1)))
    return updated


def mock_complete(request: ModelRequest) -> str:
    """Pure function of (purpose, rendered prompt text)."""
    prompt = request.user_text
    if request.purpose == "solve":
        return _mock_solve(prompt, request.agent_id)
    if request.purpose == "reflect":
        return _mock_reflect(prompt)
    if request.purpose == "velocity":
        return _mock_velocity(prompt)
    if request.purpose == "skill_update":
        return _mock_skill_update(prompt)
    raise MockWorldError(f"unknown request purpose: {request.purpose!r}")


# =============================================================================
# HTTP chat client
# =============================================================================

def _http_complete(spec: BackendSpec, request: ModelRequest) -> tuple[str, int]:
    credential = os.environ.get(spec.credential_env_var, "")
    if not credential:
        raise BackendError(
            f"missing credential: environment variable {spec.credential_env_var} is not set"
        )
    body = {
        "model": spec.model_name,
        "messages": [
            {"role": "system", "content": request.system_text},
            {"role": "user", "content": request.user_text},
        ],
    }
    if spec.temperature is not None:
        body["temperature"] = spec.temperature
    headers = {"Authorization": f"Bearer {credential}"}
    timeout = spec.timeout_ms / 1000.0
    attempts = 0
    last_error: Exception | None = None
    while attempts <= spec.max_retries:
        if attempts > 0:
            time.sleep(spec.retry_backoff_ms / 1000.0 * (2 ** (attempts - 1)))
        attempts += 1
        try:
            response = requests.post(spec.endpoint_url, json=body, headers=headers, timeout=timeout)
        except requests.RequestException as exc:
            last_error = exc
            logger.warning("backend transport failure (attempt %d): %s", attempts, exc)
            continue
        if 500 <= response.status_code < 600:
            last_error = BackendError(
                f"server error {response.status_code}: {response.text[:200]}"
            )
            logger.warning("backend 5xx (attempt %d): %s", attempts, response.status_code)
            continue
        if not response.ok:
            raise BackendError(
                f"backend returned status {response.status_code}: {response.text[:200]}"
            )
        try:
            payload = response.json()
            text = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {exc}") from exc
        if not isinstance(text, str):
            raise BackendError(f"completion content is not text: {type(text).__name__}")
        return text, attempts
    raise BackendError(f"transport error after {attempts} attempts: {last_error}")


# =============================================================================
# Uniform entry point
# =============================================================================

class Backend:
    """One configured backend with an in-process concurrency cap.

    Safe to call from many threads; responses are independent values.
    """

    def __init__(self, spec: BackendSpec, max_parallel_calls: int = DEFAULT_MAX_PARALLEL_CALLS):
        self.spec = spec.validate()
        self._limiter = threading.BoundedSemaphore(max_parallel_calls)

    def complete(self, request: ModelRequest) -> ModelResponse:
        started = time.monotonic()
        with self._limiter:
            if self.spec.kind == "mock":
                text, attempts = mock_complete(request), 1
            else:
                text, attempts = _http_complete(self.spec, request)
        if not text:
            raise BackendError("backend returned empty completion text")
        latency_ms = (time.monotonic() - started) * 1000.0
        return ModelResponse(text=text, latency_ms=latency_ms, attempt_count=attempts)


_CACHE: dict[tuple[BackendSpec, int], Backend] = {}
_CACHE_LOCK = threading.Lock()


def get_backend(
    spec: BackendSpec, max_parallel_calls: int = DEFAULT_MAX_PARALLEL_CALLS
) -> Backend:
    key = (spec, max_parallel_calls)
    with _CACHE_LOCK:
        if key not in _CACHE:
            _CACHE[key] = Backend(spec, max_parallel_calls)
        return _CACHE[key]


def complete(spec: BackendSpec, request: ModelRequest) -> ModelResponse:
    """One-shot completion against *spec* (shares the per-spec call cap)."""
    return get_backend(spec).complete(request)
