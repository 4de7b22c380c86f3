"""Deterministic synthetic corpus for desk-scale end-to-end runs.

The generator fabricates a topical passage collection in which passages of one
topic share vocabulary: every topic owns core words and per-aspect words, every
pair of adjacent topics shares "confuser" words, and all passages draw from a
common filler pool. Queries built from a topic's description therefore retrieve
on-topic passages lexically, while the confuser and filler words leave enough
ambiguity for an untrained encoder to get wrong and a fine-tuned one to fix.

Alongside the collection it writes topic descriptions (the dialogue-generation
input) and held-out evaluation sessions with manual qrels, plus a small
annotated training split for the semi-supervised scenario.
"""

from __future__ import annotations

import random
from pathlib import Path

from .datamodel import (
    ConversationSession,
    Passage,
    PassageCollection,
    Qrels,
    TopicDescription,
    make_session,
    write_collection,
    write_qrels,
    write_sessions,
    write_topics,
)
from .seeds import derive_seed

N_CORES = 6
N_ASPECTS = 8
N_CONFUSERS = 4
N_FILLERS = 40

_EVAL_TEMPLATES = [
    "what about {0}",
    "how does it change {0}",
    "why do they involve {0}",
    "where is its {0} found",
]


def _vocab(topic: int) -> dict:
    pair = topic // 2
    return {
        "cores": [f"t{topic:02d}core{c}" for c in range(N_CORES)],
        "aspects": [
            [f"t{topic:02d}asp{a}w{w}" for w in range(2)] for a in range(N_ASPECTS)
        ],
        "confusers": [f"pair{pair:02d}conf{c}" for c in range(N_CONFUSERS)],
    }


def _fillers() -> list[str]:
    return [f"common{j:02d}" for j in range(N_FILLERS)]


def make_topic(topic: int) -> TopicDescription:
    v = _vocab(topic)
    words = list(v["cores"])
    for pair in v["aspects"]:
        words.extend(pair)
    words.extend(v["confusers"])
    return TopicDescription(
        topic_id=f"topic{topic:02d}",
        title=f"Synthetic topic {topic:02d}",
        description=" ".join(words),
    )


def make_collection(
    n_topics: int = 20, passages_per_topic: int = 50, seed: int = 13
) -> tuple[PassageCollection, dict[str, str]]:
    """Build the passage collection; also returns pid -> topic_id."""
    fillers = _fillers()
    collection = PassageCollection()
    pid_topic = {}
    for topic in range(n_topics):
        v = _vocab(topic)
        for p in range(passages_per_topic):
            rng = random.Random(derive_seed(seed, "passage", topic, p))
            aspect = p % N_ASPECTS
            words = (
                rng.sample(v["cores"], 3)
                + list(v["aspects"][aspect])
                + rng.sample(v["confusers"], 2)
                + [rng.choice(fillers) for _ in range(10)]
            )
            rng.shuffle(words)
            pid = f"t{topic:02d}p{p:03d}"
            collection.add(Passage(pid, " ".join(words)))
            pid_topic[pid] = f"topic{topic:02d}"
    return collection, pid_topic


def _topic_session(
    session_id: str, topic: int, rng: random.Random
) -> ConversationSession:
    """A 4-turn session; only turn 1 names a core word, later turns lean on context."""
    v = _vocab(topic)
    fillers = _fillers()
    queries = []
    for i, template in enumerate(_EVAL_TEMPLATES):
        aspect = v["aspects"][(2 * i) % N_ASPECTS]
        focus = [rng.choice(aspect), rng.choice(v["confusers"]), rng.choice(fillers)]
        if i == 0:
            focus.insert(0, rng.choice(v["cores"]))
        queries.append(template.format(" ".join(focus)))
    return make_session(
        session_id, make_topic(topic), [(q, None) for q in queries], provenance="manual"
    )


def make_eval_split(
    n_topics: int, passages_per_topic: int, seed: int, label: str
) -> tuple[list[ConversationSession], Qrels]:
    """Sessions plus qrels marking every passage of the turn's topic relevant."""
    sessions = []
    qrels = Qrels(source="manual")
    for topic in range(n_topics):
        rng = random.Random(derive_seed(seed, label, topic))
        session = _topic_session(f"{label}-topic{topic:02d}", topic, rng)
        sessions.append(session)
        for turn in session.turns:
            for p in range(passages_per_topic):
                qrels.add(turn.turn_id, f"t{topic:02d}p{p:03d}", 1)
    return sessions, qrels


def build_fixture(
    out_dir, n_topics: int = 20, passages_per_topic: int = 50, seed: int = 13
) -> dict[str, str]:
    """Write the full fixture into ``out_dir`` and return the file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    collection, _ = make_collection(n_topics, passages_per_topic, seed)
    topics = [make_topic(t) for t in range(n_topics)]
    eval_sessions, eval_qrels = make_eval_split(
        n_topics, passages_per_topic, seed, "eval"
    )
    train_sessions, train_qrels = make_eval_split(
        n_topics, passages_per_topic, seed, "train"
    )
    paths = {
        "collection": str(out / "collection.tsv"),
        "topics": str(out / "topics.jsonl"),
        "eval_sessions": str(out / "eval_sessions.jsonl"),
        "eval_qrels": str(out / "eval_qrels.txt"),
        "train_sessions": str(out / "train_sessions.jsonl"),
        "train_qrels": str(out / "train_qrels.txt"),
    }
    write_collection(collection, paths["collection"])
    write_topics(topics, paths["topics"])
    write_sessions(eval_sessions, paths["eval_sessions"])
    write_qrels(eval_qrels, paths["eval_qrels"])
    write_sessions(train_sessions, paths["train_sessions"])
    write_qrels(train_qrels, paths["train_qrels"])
    return paths
