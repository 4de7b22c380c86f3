"""Core data types and file formats for conversational search experiments.

File formats handled here:

* collection: TSV, one passage per line, ``pid<TAB>text``.
* qrels: TREC qrels, ``query_id 0 pid grade`` (whitespace separated).
* run: TREC run, ``query_id Q0 pid rank score tag``.
* sessions: JSON lines, one session per line::

    {"session_id": ..., "provenance": ..., "topic": {"topic_id", "title",
     "description"}, "turns": [{"ordinal", "query", "answer", "rewrites"}]}

  A turn may carry an explicit ``"turn_id"`` key when its id deviates from
  the default ``<session_id>_<ordinal>`` convention (query-augmented turns
  do); readers fall back to the convention otherwise.

All readers validate invariants and raise :class:`DataFormatError` instead
of silently repairing input.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field

PROVENANCES = ("manual", "dialogue_generated", "query_augmented")
QREL_SOURCES = ("manual", "pseudo")

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class DataFormatError(ValueError):
    """A file or object violates the documented format or an invariant."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs (corpus statistics tokenizer)."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Passage:
    pid: str
    text: str
    degenerate: bool = False  # empty text is only legal when set


@dataclass
class TopicDescription:
    topic_id: str
    title: str
    description: str

    def validate(self) -> None:
        if not self.topic_id:
            raise DataFormatError("topic_id must be non-empty")
        if not self.description.strip():
            raise DataFormatError(
                f"topic {self.topic_id!r}: description must be non-empty"
            )


@dataclass
class QueryTurn:
    turn_id: str
    ordinal: int
    query: str
    answer: str | None = None
    rewrites: list[str] = field(default_factory=list)


@dataclass
class ConversationSession:
    session_id: str
    topic: TopicDescription
    turns: list[QueryTurn]
    provenance: str = "manual"

    def validate(self) -> None:
        if self.provenance not in PROVENANCES:
            raise DataFormatError(
                f"session {self.session_id!r}: unknown provenance {self.provenance!r}"
            )
        self.topic.validate()
        if not self.turns:
            raise DataFormatError(f"session {self.session_id!r} has no turns")
        for i, turn in enumerate(self.turns, start=1):
            if turn.ordinal != i:
                raise DataFormatError(
                    f"session {self.session_id!r}: turn ordinals must be contiguous "
                    f"from 1, got {turn.ordinal} at position {i}"
                )
            if not turn.query.strip():
                raise DataFormatError(
                    f"session {self.session_id!r}: turn {turn.ordinal} has an empty query"
                )


def default_turn_id(session_id: str, ordinal: int) -> str:
    return f"{session_id}_{ordinal}"


def make_session(
    session_id: str,
    topic: TopicDescription,
    queries_answers: list[tuple[str, str | None]],
    provenance: str = "manual",
) -> ConversationSession:
    """Build a session from (query, answer) pairs with conventional turn ids."""
    turns = [
        QueryTurn(
            turn_id=default_turn_id(session_id, i),
            ordinal=i,
            query=q,
            answer=a,
        )
        for i, (q, a) in enumerate(queries_answers, start=1)
    ]
    session = ConversationSession(session_id, topic, turns, provenance)
    session.validate()
    return session


class PassageCollection:
    """An ordered pid -> passage store with corpus statistics.

    Statistics (``doc_count``, ``avg_doc_len``, ``df``) are computed over
    :func:`tokenize` output. Per-document term frequencies and lengths are
    cached for the scorers in :mod:`convsdg.retrieval`.
    """

    def __init__(self, passages: list[Passage] | None = None):
        self.passages: dict[str, Passage] = {}
        self._tf: dict[str, Counter] = {}
        self._dl: dict[str, int] = {}
        self._postings: dict[str, list[str]] = {}
        self.df: Counter = Counter()
        self._total_len = 0
        for p in passages or []:
            self.add(p)

    def add(self, passage: Passage) -> None:
        if passage.pid in self.passages:
            raise DataFormatError(f"duplicate pid {passage.pid!r}")
        if not passage.pid:
            raise DataFormatError("pid must be non-empty")
        tokens = tokenize(passage.text)
        self.passages[passage.pid] = passage
        tf = Counter(tokens)
        self._tf[passage.pid] = tf
        self._dl[passage.pid] = len(tokens)
        self._total_len += len(tokens)
        for term in tf:
            self.df[term] += 1
            self._postings.setdefault(term, []).append(passage.pid)

    @property
    def doc_count(self) -> int:
        return len(self.passages)

    @property
    def avg_doc_len(self) -> float:
        if not self.passages:
            return 0.0
        return self._total_len / len(self.passages)

    def term_freqs(self, pid: str) -> Counter:
        try:
            return self._tf[pid]
        except KeyError:
            raise KeyError(f"unknown pid {pid!r}") from None

    def doc_len(self, pid: str) -> int:
        try:
            return self._dl[pid]
        except KeyError:
            raise KeyError(f"unknown pid {pid!r}") from None

    def postings(self, term: str) -> list[str]:
        return self._postings.get(term, [])

    def pids(self) -> list[str]:
        return list(self.passages)

    def __len__(self) -> int:
        return len(self.passages)

    def __contains__(self, pid: str) -> bool:
        return pid in self.passages


@dataclass
class Qrels:
    """Graded relevance judgments keyed by (query_id, pid)."""

    entries: dict[tuple[str, str], int] = field(default_factory=dict)
    source: str = "manual"

    def __post_init__(self):
        if self.source not in QREL_SOURCES:
            raise DataFormatError(f"unknown qrels source {self.source!r}")

    def add(self, query_id: str, pid: str, grade: int) -> None:
        if grade < 0:
            raise DataFormatError(
                f"negative grade {grade} for ({query_id!r}, {pid!r})"
            )
        key = (query_id, pid)
        if key in self.entries:
            raise DataFormatError(f"duplicate qrels key ({query_id!r}, {pid!r})")
        self.entries[key] = grade

    def for_query(self, query_id: str) -> dict[str, int]:
        return {pid: g for (qid, pid), g in self.entries.items() if qid == query_id}

    def grouped(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for (qid, pid), g in self.entries.items():
            out.setdefault(qid, {})[pid] = g
        return out

    def query_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for qid, _ in self.entries:
            seen.setdefault(qid)
        return list(seen)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class TrainingExample:
    """One contrastive training sample: a reformulated query and its passages."""

    query_id: str
    reformulated_query: str
    positive_pids: list[str]
    negative_pids: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if not self.positive_pids:
            raise DataFormatError(f"example {self.query_id!r} has no positives")
        overlap = set(self.positive_pids) & set(self.negative_pids)
        if overlap:
            raise DataFormatError(
                f"example {self.query_id!r}: positives and negatives overlap: {sorted(overlap)}"
            )


@dataclass
class RankedRun:
    """Per-query ranked result lists in TREC run semantics."""

    per_query: dict[str, list[tuple[str, int, float]]] = field(default_factory=dict)
    tag: str = "convsdg"

    @classmethod
    def from_scores(
        cls, scored: dict[str, list[tuple[str, float]]], tag: str = "convsdg"
    ) -> "RankedRun":
        """Rank (pid, score) lists per query: descending score, then ascending pid."""
        run = cls(tag=tag)
        for qid, pairs in scored.items():
            ordered = sorted(pairs, key=lambda ps: (-ps[1], ps[0]))
            run.per_query[qid] = [
                (pid, rank, score) for rank, (pid, score) in enumerate(ordered, start=1)
            ]
        return run

    def ranked_pids(self, query_id: str) -> list[str]:
        return [pid for pid, _, _ in self.per_query.get(query_id, [])]

    def validate(self) -> None:
        for qid, rows in self.per_query.items():
            seen_pids = set()
            prev_score = None
            for i, (pid, rank, score) in enumerate(rows, start=1):
                if rank != i:
                    raise DataFormatError(
                        f"run {qid!r}: ranks not contiguous from 1 (rank {rank} at position {i})"
                    )
                if pid in seen_pids:
                    raise DataFormatError(f"run {qid!r}: duplicate pid {pid!r}")
                seen_pids.add(pid)
                if prev_score is not None and score > prev_score:
                    raise DataFormatError(
                        f"run {qid!r}: scores increase at rank {rank} "
                        f"({score} after {prev_score})"
                    )
                prev_score = score


# ---------------------------------------------------------------------------
# Readers / writers
# ---------------------------------------------------------------------------


def load_collection(path, format: str = "tsv") -> PassageCollection:
    """Load a pid<TAB>text collection and compute corpus statistics."""
    if format != "tsv":
        raise DataFormatError(f"unsupported collection format {format!r}")
    collection = PassageCollection()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 1)
            if len(parts) != 2 or not parts[0]:
                raise DataFormatError(f"{path}:{lineno}: expected 'pid<TAB>text'")
            pid, text = parts
            if pid in collection:
                raise DataFormatError(f"{path}:{lineno}: duplicate pid {pid!r}")
            collection.add(Passage(pid, text))
    return collection


def write_collection(collection: PassageCollection, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pid, passage in collection.passages.items():
            if "\t" in passage.text or "\n" in passage.text:
                raise DataFormatError(
                    f"passage {pid!r} contains tab/newline; not representable in TSV"
                )
            fh.write(f"{pid}\t{passage.text}\n")


def read_qrels(path, source: str = "manual") -> Qrels:
    qrels = Qrels(source=source)
    first_line: dict[tuple[str, str], int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 4:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 'query_id 0 pid grade', got {len(fields)} fields"
                )
            qid, _, pid, grade_s = fields
            try:
                grade = int(grade_s)
            except ValueError:
                raise DataFormatError(
                    f"{path}:{lineno}: non-integer grade {grade_s!r}"
                ) from None
            if grade < 0:
                raise DataFormatError(f"{path}:{lineno}: negative grade {grade}")
            key = (qid, pid)
            if key in qrels.entries:
                conflict = "conflicting" if qrels.entries[key] != grade else "repeated"
                raise DataFormatError(
                    f"{path}:{lineno}: {conflict} grade for ({qid}, {pid}); "
                    f"first seen at line {first_line[key]}"
                )
            qrels.entries[key] = grade
            first_line[key] = lineno
    return qrels


def write_qrels(qrels: Qrels, path) -> None:
    """Write TREC qrels sorted by (query_id, pid)."""
    with open(path, "w", encoding="utf-8") as fh:
        for (qid, pid), grade in sorted(qrels.entries.items()):
            fh.write(f"{qid} 0 {pid} {grade}\n")


def _session_to_dict(session: ConversationSession) -> dict:
    turns = []
    for turn in session.turns:
        d: dict = {"ordinal": turn.ordinal, "query": turn.query}
        if turn.turn_id != default_turn_id(session.session_id, turn.ordinal):
            d["turn_id"] = turn.turn_id
        d["answer"] = turn.answer
        d["rewrites"] = turn.rewrites
        turns.append(d)
    return {
        "session_id": session.session_id,
        "provenance": session.provenance,
        "topic": {
            "topic_id": session.topic.topic_id,
            "title": session.topic.title,
            "description": session.topic.description,
        },
        "turns": turns,
    }


def _session_from_dict(obj: dict, where: str) -> ConversationSession:
    try:
        topic_obj = obj["topic"]
        topic = TopicDescription(
            topic_id=topic_obj["topic_id"],
            title=topic_obj.get("title", ""),
            description=topic_obj["description"],
        )
        session_id = obj["session_id"]
        turns = []
        for t in obj["turns"]:
            if "query" not in t:
                raise DataFormatError(f"{where}: turn missing 'query'")
            ordinal = t["ordinal"]
            turns.append(
                QueryTurn(
                    turn_id=t.get("turn_id", default_turn_id(session_id, ordinal)),
                    ordinal=ordinal,
                    query=t["query"],
                    answer=t.get("answer"),
                    rewrites=list(t.get("rewrites", [])),
                )
            )
    except KeyError as exc:
        raise DataFormatError(f"{where}: missing key {exc}") from None
    session = ConversationSession(
        session_id=session_id,
        topic=topic,
        turns=turns,
        provenance=obj.get("provenance", "manual"),
    )
    session.validate()
    return session


def read_sessions(path) -> list[ConversationSession]:
    sessions = []
    seen_ids = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            session = _session_from_dict(obj, f"{path}:{lineno}")
            if session.session_id in seen_ids:
                raise DataFormatError(
                    f"{path}:{lineno}: duplicate session_id {session.session_id!r}"
                )
            seen_ids.add(session.session_id)
            sessions.append(session)
    return sessions


def write_sessions(sessions: list[ConversationSession], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for session in sessions:
            session.validate()
            fh.write(json.dumps(_session_to_dict(session)) + "\n")


def read_topics(path) -> list[TopicDescription]:
    """Read topic descriptions from JSON lines {"topic_id","title","description"}."""
    topics = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                topic = TopicDescription(
                    topic_id=obj["topic_id"],
                    title=obj.get("title", ""),
                    description=obj["description"],
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataFormatError(f"{path}:{lineno}: bad topic line: {exc}") from None
            topic.validate()
            if topic.topic_id in seen:
                raise DataFormatError(
                    f"{path}:{lineno}: duplicate topic_id {topic.topic_id!r}"
                )
            seen.add(topic.topic_id)
            topics.append(topic)
    return topics


def write_topics(topics: list[TopicDescription], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for topic in topics:
            topic.validate()
            fh.write(
                json.dumps(
                    {
                        "topic_id": topic.topic_id,
                        "title": topic.title,
                        "description": topic.description,
                    }
                )
                + "\n"
            )


def write_run(run: RankedRun, path) -> None:
    """Write a TREC run file; scores keep 6 significant digits."""
    run.validate()
    with open(path, "w", encoding="utf-8") as fh:
        for qid, rows in run.per_query.items():
            for pid, rank, score in rows:
                fh.write(f"{qid} Q0 {pid} {rank} {score:.6g} {run.tag}\n")


def read_run(path) -> RankedRun:
    per_query: dict[str, list[tuple[str, int, float]]] = {}
    tag = "convsdg"
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 6:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 'query_id Q0 pid rank score tag'"
                )
            qid, _, pid, rank_s, score_s, tag = fields
            try:
                rank = int(rank_s)
                score = float(score_s)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad rank/score") from None
            per_query.setdefault(qid, []).append((pid, rank, score))
    for rows in per_query.values():
        rows.sort(key=lambda r: r[1])
    run = RankedRun(per_query=per_query, tag=tag)
    run.validate()
    return run
