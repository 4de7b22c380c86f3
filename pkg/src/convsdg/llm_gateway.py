"""Text-generation backends and the prompt/parse contract for session data.

Two prompt templates are rendered here: a dialogue-level one that asks for a
whole multi-turn session in a single completion, formatted as ``Q<i>:`` /
``A<i>:`` lines, and a query-level one that asks for a single rewrite.
``parse_session`` is the inverse of the dialogue template.

Backends:

* ``mock`` — a pure function of (prompt, seed). It synthesizes sessions from
  the topic description's own tokens and uses pronouns in later turns, so
  coreference-sensitive code paths run offline.
* ``http_chat`` — an OpenAI-compatible chat-completion endpoint with retry,
  exponential backoff, and a shared rolling-minute rate limiter. The
  credential is read from the ``CONVSDG_API_KEY`` environment variable.
"""

from __future__ import annotations

import json
import os
import random
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import requests

from .datamodel import (
    ConversationSession,
    QueryTurn,
    TopicDescription,
    default_turn_id,
    tokenize,
)
from .seeds import derive_seed

API_KEY_ENV = "CONVSDG_API_KEY"


class GatewayError(Exception):
    """Base class for generation-backend failures."""


class TransportError(GatewayError):
    """HTTP transport gave up; carries the last status and attempt count."""

    def __init__(self, message: str, last_status: int | None, attempts: int):
        super().__init__(message)
        self.last_status = last_status
        self.attempts = attempts


class ParseError(GatewayError):
    """A completion does not match the dialogue transcript contract."""


@dataclass
class GenerationParams:
    temperature: float = 1.0
    max_output_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be > 0")


class RateLimiter:
    """Blocks callers so at most ``limit`` acquisitions happen per rolling minute."""

    def __init__(self, limit: int, clock=time.monotonic, sleep=time.sleep):
        self.limit = limit
        self._clock = clock
        self._sleep = sleep
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= 60.0:
                    self._stamps.popleft()
                if len(self._stamps) < self.limit:
                    self._stamps.append(now)
                    return
                wait = 60.0 - (now - self._stamps[0])
            self._sleep(max(wait, 0.0))


@dataclass
class BackendDescriptor:
    """Which backend to call and how hard to push it.

    ``max_retries`` is the total number of request attempts made before a
    transient failure is surfaced.
    """

    kind: str = "mock"
    model_name: str = "mock-chat"
    endpoint: str = ""
    rate_limit: int = 60
    max_retries: int = 3
    timeout: float = 30.0
    backoff_base: float = 0.5
    max_in_flight: int = 4
    _limiter: RateLimiter | None = field(default=None, repr=False, compare=False)
    _gate: threading.Semaphore | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("http_chat", "mock"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http_chat" and not self.endpoint:
            raise ValueError("http_chat backend requires an endpoint")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")

    def limiter(self) -> RateLimiter:
        if self._limiter is None:
            self._limiter = RateLimiter(self.rate_limit)
        return self._limiter

    def gate(self) -> threading.Semaphore:
        if self._gate is None:
            self._gate = threading.Semaphore(self.max_in_flight)
        return self._gate


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------


def render_dialogue_prompt(topic: TopicDescription, n_turns: int) -> str:
    """Instruction + topic prompt asking for a whole session in one completion."""
    if n_turns < 1:
        raise ValueError("n_turns must be >= 1")
    turn_word = "turn" if n_turns == 1 else "turns"
    skeleton = "\n".join(
        f"Q{i}: <question {i}>\nA{i}: <answer {i}>" for i in range(1, n_turns + 1)
    )
    return (
        "You are helping to build a conversational search dataset.\n"
        f"Write one coherent information-seeking conversation with exactly "
        f"{n_turns} {turn_word} about the topic described below. A turn is one "
        "user question followed by one short factual answer. After the first "
        "turn, refer back to earlier turns the way real users do: use pronouns "
        'such as "it" or "they", or omit the topic noun, instead of restating '
        "it in full.\n"
        "Answer with the transcript only, in exactly this line format:\n"
        f"{skeleton}\n"
        f"Topic: {topic.description}"
    )


def render_rewrite_prompt(query: str) -> str:
    """Instruction + input-query prompt asking for one same-meaning rewrite."""
    if not query.strip():
        raise ValueError("query must be non-empty")
    return (
        "Rewrite the search query below as one alternative natural language "
        "phrasing with the same meaning. Reply with the rewritten query only, "
        "on a single line.\n"
        f"Query: {query}"
    )


# ---------------------------------------------------------------------------
# Transcript parsing
# ---------------------------------------------------------------------------

_MARKER_RE = re.compile(r"(?im)^[ \t>*•-]*([qa])\s*(\d+)\s*:")


def parse_session(
    raw: str,
    topic: TopicDescription,
    expected_turns: int,
    session_id: str | None = None,
) -> ConversationSession:
    """Extract Q/A pairs from a dialogue completion.

    Markers are matched case-insensitively and tolerate leading whitespace or
    markdown bullets. Raises :class:`ParseError` when any of the first
    ``expected_turns`` questions or answers is missing or empty; extra turns
    beyond ``expected_turns`` are dropped.
    """
    if session_id is None:
        session_id = f"{topic.topic_id}-g1"
    matches = list(_MARKER_RE.finditer(raw))
    if not matches:
        raise ParseError(f"no Q<i>:/A<i>: markers found for topic {topic.topic_id!r}")
    segments: dict[tuple[str, int], str] = {}
    for m, nxt in zip(matches, matches[1:] + [None]):
        kind = m.group(1).lower()
        idx = int(m.group(2))
        end = nxt.start() if nxt is not None else len(raw)
        text = " ".join(raw[m.end():end].split())
        segments.setdefault((kind, idx), text)

    turns = []
    for i in range(1, expected_turns + 1):
        query = segments.get(("q", i), "")
        answer = segments.get(("a", i), "")
        if ("q", i) not in segments or ("a", i) not in segments:
            raise ParseError(
                f"topic {topic.topic_id!r}: transcript is missing turn {i} "
                f"(found {len(matches)} markers, expected {expected_turns} turns)"
            )
        if not query:
            raise ParseError(f"topic {topic.topic_id!r}: turn {i} has an empty question")
        if not answer:
            raise ParseError(f"topic {topic.topic_id!r}: turn {i} has an empty answer")
        turns.append(
            QueryTurn(
                turn_id=default_turn_id(session_id, i),
                ordinal=i,
                query=query,
                answer=answer,
            )
        )
    session = ConversationSession(
        session_id=session_id,
        topic=topic,
        turns=turns,
        provenance="dialogue_generated",
    )
    session.validate()
    return session


# ---------------------------------------------------------------------------
# Mock backend
# ---------------------------------------------------------------------------

_FIRST_Q = [
    "What is {0} and how does it relate to {1}?",
    "What should I know about {0} and {1}?",
    "How does {0} usually involve {1}?",
    "Why is {0} connected with {1}?",
]
_LATER_Q = [
    "How does it affect {0}?",
    "What about their {0}?",
    "Why is its {0} important?",
    "Can it change {0} over time?",
    "Where do they encounter {0} most?",
    "Does it depend on {0}?",
]
_ANSWERS = [
    "It mainly involves {0} together with {1}.",
    "Mostly through {0}, and sometimes {1} as well.",
    "They relate via {0}, which influences {1}.",
    "Yes, {0} plays a role alongside {1}.",
    "In most cases {0} matters more than {1}.",
]
_REWRITES = [
    "could you explain {0}",
    "tell me more about {0}",
    "{0}, in other words",
    "what do people mean by {0}",
    "i would like to know about {0}",
]

_TOPIC_LINE_RE = re.compile(r"(?m)^Topic:\s*(.*)$", re.DOTALL)
_QUERY_LINE_RE = re.compile(r"(?m)^Query:\s*(.*)$", re.DOTALL)
_SKELETON_RE = re.compile(r"(?m)^Q(\d+): <question \d+>$")


def _mock_dialogue(prompt: str, rng: random.Random) -> str:
    n_turns = max(int(m.group(1)) for m in _SKELETON_RE.finditer(prompt))
    description = _TOPIC_LINE_RE.search(prompt).group(1).strip()
    pool = tokenize(description) or ["topic"]
    pick = lambda: rng.choice(pool)
    lines = []
    for i in range(1, n_turns + 1):
        if i == 1:
            q = rng.choice(_FIRST_Q).format(pick(), pick())
        else:
            q = rng.choice(_LATER_Q).format(pick())
        a = rng.choice(_ANSWERS).format(pick(), pick())
        lines.append(f"Q{i}: {q}")
        lines.append(f"A{i}: {a}")
    return "\n".join(lines)


def _mock_rewrite(prompt: str, rng: random.Random) -> str:
    query = _QUERY_LINE_RE.search(prompt).group(1).strip()
    core = query.rstrip("?. ")
    return rng.choice(_REWRITES).format(core)


def mock_complete(prompt: str, seed: int | None) -> str:
    """Deterministic completion for either template; pure in (prompt, seed)."""
    rng = random.Random(derive_seed("mock", prompt, seed))
    if _SKELETON_RE.search(prompt) and _TOPIC_LINE_RE.search(prompt):
        return _mock_dialogue(prompt, rng)
    if _QUERY_LINE_RE.search(prompt):
        return _mock_rewrite(prompt, rng)
    return "OK: " + " ".join(tokenize(prompt)[:8])


# ---------------------------------------------------------------------------
# generate()
# ---------------------------------------------------------------------------

_RETRIABLE_STATUSES = {429, 500, 502, 503, 504}


def _http_chat(prompt: str, params: GenerationParams, backend: BackendDescriptor) -> str:
    api_key = os.environ.get(API_KEY_ENV, "")
    if not api_key:
        raise GatewayError(
            f"http_chat backend needs a credential in ${API_KEY_ENV}"
        )
    payload = {
        "model": backend.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": params.temperature,
        "max_tokens": params.max_output_tokens,
    }
    headers = {
        "Authorization": f"Bearer {api_key}",
        "Content-Type": "application/json",
    }
    last_status: int | None = None
    last_err = "no attempt made"
    for attempt in range(1, backend.max_retries + 1):
        backend.limiter().acquire()
        try:
            resp = requests.post(
                backend.endpoint, json=payload, headers=headers, timeout=backend.timeout
            )
        except requests.RequestException as exc:
            last_status = None
            last_err = str(exc)
        else:
            last_status = resp.status_code
            if resp.status_code == 200:
                try:
                    content = resp.json()["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError) as exc:
                    raise GatewayError(f"malformed completion response: {exc}") from exc
                return content
            if resp.status_code not in _RETRIABLE_STATUSES:
                raise TransportError(
                    f"chat endpoint returned {resp.status_code}",
                    last_status=resp.status_code,
                    attempts=attempt,
                )
            last_err = f"HTTP {resp.status_code}"
        if attempt < backend.max_retries:
            time.sleep(backend.backoff_base * (2 ** (attempt - 1)))
    raise TransportError(
        f"gave up after {backend.max_retries} attempts: {last_err}",
        last_status=last_status,
        attempts=backend.max_retries,
    )


def generate(prompt: str, params: GenerationParams, backend: BackendDescriptor) -> str:
    """Run one completion; retries transient HTTP failures, mock is pure."""
    if not prompt.strip():
        raise ValueError("prompt must be non-empty")
    if backend.kind == "mock":
        text = mock_complete(prompt, params.seed)
    else:
        with backend.gate():
            text = _http_chat(prompt, params, backend)
    if not text.strip():
        raise GatewayError("backend returned an empty completion")
    return text
