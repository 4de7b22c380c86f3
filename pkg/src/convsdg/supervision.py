"""Pseudo-relevance supervision for generated sessions.

For each turn, a context-aware query string is built in one of four forms,
an off-the-shelf retriever fetches the top passages, and a few of them are
sampled uniformly as pseudo-positives (grade 1). Sampling uses a per-turn
RNG stream derived from (seed, turn_id), so the output is independent of
turn processing order and stable across reruns.
"""

from __future__ import annotations

import enum
import logging
import random
from dataclasses import dataclass

from .datamodel import ConversationSession, PassageCollection, Qrels
from .seeds import derive_seed

log = logging.getLogger(__name__)


class QueryForm(enum.Enum):
    """The four context-aware input forms for PRF retrieval."""

    Q_PLUS_A = "qa"
    Q_PLUS_A_PLUS_TOPIC = "qat"
    CONVQ_PLUS_TOPIC = "cqt"
    CONVQ_CONVA_PLUS_TOPIC = "cqat"

    @classmethod
    def from_code(cls, code: str) -> "QueryForm":
        for form in cls:
            if form.value == code:
                return form
        raise ValueError(f"unknown query form {code!r}; expected one of "
                         f"{[f.value for f in cls]}")


@dataclass
class PrfConfig:
    top_k: int = 5
    m: int = 3
    seed: int = 0
    form: QueryForm = QueryForm.Q_PLUS_A_PLUS_TOPIC

    def __post_init__(self):
        if not (1 <= self.m <= self.top_k):
            raise ValueError(f"need 1 <= m ({self.m}) <= top_k ({self.top_k})")


@dataclass
class PrfReport:
    labeled_turns: int = 0
    skipped_turns: int = 0


def _answer(session: ConversationSession, index: int) -> str:
    turn = session.turns[index]
    if not (turn.answer or "").strip():
        raise ValueError(
            f"turn {turn.turn_id} has no answer; form needs one"
        )
    return turn.answer.strip()


def build_query_form(
    session: ConversationSession, turn_index: int, form: QueryForm
) -> str:
    """Space-joined query string for the turn at 1-based ``turn_index``."""
    if not (1 <= turn_index <= len(session.turns)):
        raise ValueError(
            f"turn_index {turn_index} out of range 1..{len(session.turns)}"
        )
    i = turn_index - 1
    topic = session.topic.description
    turns = session.turns
    if form is QueryForm.Q_PLUS_A:
        parts = [turns[i].query, _answer(session, i)]
    elif form is QueryForm.Q_PLUS_A_PLUS_TOPIC:
        parts = [turns[i].query, _answer(session, i), topic]
    elif form is QueryForm.CONVQ_PLUS_TOPIC:
        parts = [t.query for t in turns[: i + 1]] + [topic]
    elif form is QueryForm.CONVQ_CONVA_PLUS_TOPIC:
        parts = []
        for j in range(i + 1):
            parts.append(turns[j].query)
            parts.append(_answer(session, j))
        parts.append(topic)
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unhandled form {form}")
    return " ".join(parts)


def assign_pseudo_labels(
    sessions: list[ConversationSession],
    retriever,
    collection: PassageCollection,
    cfg: PrfConfig,
) -> tuple[Qrels, PrfReport]:
    """Sample ``cfg.m`` of the top-``cfg.top_k`` passages per turn as positives.

    ``retriever`` must expose ``search(query, k) -> list[ScoredPassage]`` over
    ``collection``. Turns whose form cannot be built or that retrieve nothing
    are skipped with a warning; when fewer than ``m`` passages come back, all
    of them are labeled.
    """
    qrels = Qrels(source="pseudo")
    report = PrfReport()
    for session in sessions:
        for turn in session.turns:
            try:
                query = build_query_form(session, turn.ordinal, cfg.form)
                results = retriever.search(query, cfg.top_k)
            except ValueError as exc:
                log.warning("skipping turn %s: %s", turn.turn_id, exc)
                report.skipped_turns += 1
                continue
            if not results:
                log.warning("no retrieval results for turn %s; skipping", turn.turn_id)
                report.skipped_turns += 1
                continue
            pids = [r.pid for r in results]
            unknown = [pid for pid in pids if pid not in collection]
            if unknown:
                raise ValueError(
                    f"retriever returned pids not in the collection: {unknown}"
                )
            if len(pids) <= cfg.m:
                chosen = pids
            else:
                rng = random.Random(derive_seed(cfg.seed, turn.turn_id))
                chosen = rng.sample(pids, cfg.m)
            for pid in chosen:
                qrels.add(turn.turn_id, pid, 1)
            report.labeled_turns += 1
    return qrels, report
