"""Query-level augmentation: rewrite annotated turns and propagate their labels.

Every annotated turn is rewritten ``t`` times. Each rewrite becomes its own
session sample: a copy of the full conversation in which only that one turn's
query text is replaced, so the propagated label stays valid for the rewritten
turn and the surrounding context is untouched. The rewritten turn keeps a
predictable id — ``<original_turn_id>#a<i>`` — which is also the qrels key the
original grades are copied to.

Turn counts in reports follow the convention of the datasets this mirrors:
a "turn" is an annotated query turn, i.e. one training sample.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .datamodel import (
    ConversationSession,
    DataFormatError,
    Qrels,
    QueryTurn,
    default_turn_id,
)
from .llm_gateway import BackendDescriptor, GenerationParams, generate, render_rewrite_prompt
from .seeds import derive_seed

log = logging.getLogger(__name__)

# Regenerations allowed when a rewrite comes back empty/whitespace.
EMPTY_RETRY_BUDGET = 3


@dataclass
class AugmentationConfig:
    t: int = 2
    params: GenerationParams = field(default_factory=GenerationParams)

    def __post_init__(self):
        if self.t < 1:
            raise ValueError("t must be >= 1")


@dataclass
class AugmentationReport:
    turns_augmented: int = 0
    turns_skipped: int = 0
    rewrites: int = 0
    degenerate: int = 0
    substituted: int = 0


def rewrite_turn(
    query: str,
    t: int,
    backend: BackendDescriptor,
    params: GenerationParams,
    report: AugmentationReport | None = None,
) -> list[str]:
    """Produce exactly ``t`` non-empty rewrites of ``query``.

    Empty completions are retried up to a budget, after which the original
    query is substituted (and counted in ``report``). A rewrite identical to
    the input is kept but counted as degenerate.
    """
    if not query.strip():
        raise ValueError("query must be non-empty")
    if t < 1:
        raise ValueError("t must be >= 1")
    prompt = render_rewrite_prompt(query)
    rewrites = []
    for i in range(1, t + 1):
        text = ""
        for attempt in range(1 + EMPTY_RETRY_BUDGET):
            per_call = replace(params, seed=derive_seed(params.seed, "rewrite", i, attempt))
            text = generate(prompt, per_call, backend).strip().replace("\n", " ")
            if text:
                break
        if not text:
            log.warning("empty rewrite for %r; substituting the original query", query)
            text = query
            if report:
                report.substituted += 1
        if report:
            report.rewrites += 1
            if text.strip() == query.strip():
                report.degenerate += 1
        rewrites.append(text)
    return rewrites


def _augmented_session(
    session: ConversationSession, turn_index: int, rewrite_i: int, rewrite: str
) -> ConversationSession:
    """Copy of ``session`` with turn ``turn_index`` (1-based) rewritten."""
    new_sid = f"{session.session_id}#a{rewrite_i}t{turn_index}"
    turns = []
    for turn in session.turns:
        if turn.ordinal == turn_index:
            turns.append(
                QueryTurn(
                    turn_id=f"{turn.turn_id}#a{rewrite_i}",
                    ordinal=turn.ordinal,
                    query=rewrite,
                    answer=turn.answer,
                    rewrites=[],
                )
            )
        else:
            turns.append(
                QueryTurn(
                    turn_id=default_turn_id(new_sid, turn.ordinal),
                    ordinal=turn.ordinal,
                    query=turn.query,
                    answer=turn.answer,
                    rewrites=[],
                )
            )
    out = ConversationSession(
        session_id=new_sid,
        topic=session.topic,
        turns=turns,
        provenance="query_augmented",
    )
    out.validate()
    return out


def augment_dataset(
    sessions: list[ConversationSession],
    qrels: Qrels,
    cfg: AugmentationConfig,
    backend: BackendDescriptor,
) -> tuple[list[ConversationSession], Qrels, AugmentationReport]:
    """Rewrite each annotated turn ``cfg.t`` times and propagate its grades.

    Returns new sessions (one per (turn, rewrite) sample), a qrels set keyed
    by the ``#a<i>`` turn ids, and a report. Turns with no qrels entry are
    skipped with a warning.
    """
    if qrels.source != "manual":
        raise ValueError("query-level augmentation requires manually judged qrels")
    grouped = qrels.grouped()
    report = AugmentationReport()
    out_sessions: list[ConversationSession] = []
    out_qrels = Qrels(source="manual")
    for session in sessions:
        for turn in session.turns:
            grades = grouped.get(turn.turn_id)
            if not grades:
                report.turns_skipped += 1
                log.warning(
                    "turn %s has no relevance judgments; skipping augmentation",
                    turn.turn_id,
                )
                continue
            params = replace(
                cfg.params, seed=derive_seed(cfg.params.seed, turn.turn_id)
            )
            rewrites = rewrite_turn(turn.query, cfg.t, backend, params, report)
            report.turns_augmented += 1
            for i, rewrite in enumerate(rewrites, start=1):
                out_sessions.append(
                    _augmented_session(session, turn.ordinal, i, rewrite)
                )
                aug_qid = f"{turn.turn_id}#a{i}"
                for pid, grade in grades.items():
                    out_qrels.add(aug_qid, pid, grade)
    return out_sessions, out_qrels, report


def merge_datasets(
    original: tuple[list[ConversationSession], Qrels],
    augmented: tuple[list[ConversationSession], Qrels],
) -> tuple[list[ConversationSession], Qrels]:
    """Concatenate originals first, then augmented; any id collision is an error."""
    orig_sessions, orig_qrels = original
    aug_sessions, aug_qrels = augmented
    if orig_qrels.source != aug_qrels.source:
        raise DataFormatError(
            f"cannot merge qrels with sources {orig_qrels.source!r} and {aug_qrels.source!r}"
        )
    seen = set()
    merged_sessions = []
    for session in list(orig_sessions) + list(aug_sessions):
        if session.session_id in seen:
            raise DataFormatError(f"session id collision: {session.session_id!r}")
        seen.add(session.session_id)
        merged_sessions.append(session)
    merged_qrels = Qrels(source=orig_qrels.source)
    merged_qrels.entries.update(orig_qrels.entries)
    for key, grade in aug_qrels.entries.items():
        if key in merged_qrels.entries:
            raise DataFormatError(f"qrels key collision: {key!r}")
        merged_qrels.entries[key] = grade
    return merged_sessions, merged_qrels


def annotated_turn_ids(sessions: list[ConversationSession], qrels: Qrels) -> list[str]:
    """Turn ids present in both the sessions and the qrels, in session order."""
    qids = {qid for qid, _ in qrels.entries}
    return [
        turn.turn_id
        for session in sessions
        for turn in session.turns
        if turn.turn_id in qids
    ]
