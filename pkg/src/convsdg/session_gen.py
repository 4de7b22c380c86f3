"""Dialogue-level session generation: topic descriptions in, whole sessions out.

Each session comes from a single completion. Generating turn by turn tends to
drift, so the prompt asks for the full transcript at once and the parser
enforces the exact turn count. A completion that fails to parse is regenerated
up to a fixed budget, then the topic is skipped and reported.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .datamodel import ConversationSession, TopicDescription
from .llm_gateway import (
    BackendDescriptor,
    GenerationParams,
    ParseError,
    generate,
    parse_session,
    render_dialogue_prompt,
)
from .seeds import derive_seed

log = logging.getLogger(__name__)

# Regenerations allowed per topic after the first failed parse.
PARSE_RETRY_BUDGET = 3

DEFAULT_TURNS = 8


class GenerationFailed(Exception):
    def __init__(self, topic_id: str, attempts: int):
        super().__init__(
            f"could not generate a parseable session for topic {topic_id!r} "
            f"in {attempts} attempts"
        )
        self.topic_id = topic_id
        self.attempts = attempts


@dataclass
class CorpusReport:
    requested: int = 0
    produced: int = 0
    failed: int = 0
    failed_topics: list[str] = field(default_factory=list)


def generate_dialogue_session(
    topic: TopicDescription,
    n_turns: int,
    backend: BackendDescriptor,
    params: GenerationParams,
    session_id: str | None = None,
) -> ConversationSession:
    """Generate one session of exactly ``n_turns`` turns for ``topic``."""
    if n_turns < 1:
        raise ValueError("n_turns must be >= 1")
    topic.validate()
    prompt = render_dialogue_prompt(topic, n_turns)
    attempts = 1 + PARSE_RETRY_BUDGET
    for attempt in range(1, attempts + 1):
        raw = generate(prompt, params, backend)
        try:
            return parse_session(raw, topic, n_turns, session_id=session_id)
        except ParseError as exc:
            log.warning(
                "parse failure for topic %s (attempt %d/%d): %s",
                topic.topic_id, attempt, attempts, exc,
            )
    raise GenerationFailed(topic.topic_id, attempts)


def generate_session_corpus(
    topics: list[TopicDescription],
    sessions_per_topic: int,
    n_turns: int,
    backend: BackendDescriptor,
    params: GenerationParams,
) -> tuple[list[ConversationSession], CorpusReport]:
    """Generate up to ``len(topics) * sessions_per_topic`` sessions.

    Session ids are ``<topic_id>-g<k>``. Each (topic, k) pair gets its own
    derived seed so results do not depend on iteration order and repeated
    sessions for one topic differ. Topics whose generations all fail to parse
    are skipped and counted in the report.
    """
    if not topics:
        raise ValueError("topics must be non-empty")
    if sessions_per_topic < 1:
        raise ValueError("sessions_per_topic must be >= 1")
    report = CorpusReport(requested=len(topics) * sessions_per_topic)
    sessions: list[ConversationSession] = []
    for topic in topics:
        for k in range(1, sessions_per_topic + 1):
            per_call = replace(
                params, seed=derive_seed(params.seed, topic.topic_id, k)
            )
            try:
                session = generate_dialogue_session(
                    topic,
                    n_turns,
                    backend,
                    per_call,
                    session_id=f"{topic.topic_id}-g{k}",
                )
            except GenerationFailed:
                report.failed += 1
                report.failed_topics.append(topic.topic_id)
                continue
            sessions.append(session)
            report.produced += 1
    return sessions, report
