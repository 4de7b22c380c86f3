"""Contrastive fine-tuning of the query encoder on (reformulated query, passage) pairs.

The query for turn n is the concatenation of all session queries up to and
including turn n. The objective is the negative log-likelihood of the positive
passage under a softmax over dot-product scores against in-batch negatives
(each example's negatives are the other batch members' positives). Only the
query encoder's projection matrix is updated; the passage encoder is frozen.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field

import numpy as np

from .datamodel import (
    ConversationSession,
    PassageCollection,
    Qrels,
    TrainingExample,
)
from .retrieval import HashedProjectionEncoder

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 5
    learning_rate: float = 1e-5
    seed: int = 0
    negatives: str = "in_batch"
    max_concat_len: int = 512

    def __post_init__(self):
        if self.negatives != "in_batch":
            raise ValueError(f"unknown negative scheme {self.negatives!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for in-batch negatives")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class BatchReport:
    batches: int = 0
    dropped_examples: int = 0
    positive_collisions: int = 0


@dataclass
class TrainingReport:
    epoch_mean_loss: list[float] = field(default_factory=list)
    examples: int = 0
    batches_per_epoch: int = 0
    dropped_examples: int = 0
    positive_collisions: int = 0


def reformulate_query(
    session: ConversationSession, n: int, max_concat_len: int = 512
) -> str:
    """Concatenate session queries 1..n with single spaces, budgeted by tokens.

    When the whitespace-token count exceeds ``max_concat_len``, whole earliest
    turns are dropped first; the current turn is only ever truncated (from the
    front) when it alone exceeds the budget.
    """
    if not (1 <= n <= len(session.turns)):
        raise ValueError(f"n {n} out of range 1..{len(session.turns)}")
    queries = [turn.query for turn in session.turns[:n]]
    counts = [len(q.split()) for q in queries]
    total = sum(counts)
    start = 0
    while total > max_concat_len and start < n - 1:
        total -= counts[start]
        start += 1
    if total > max_concat_len:
        tokens = queries[n - 1].split()
        return " ".join(tokens[-max_concat_len:])
    return " ".join(queries[start:])


def contrastive_loss(
    q_vec: np.ndarray, pos_vec: np.ndarray, neg_vecs: list[np.ndarray]
) -> tuple[float, np.ndarray]:
    """NLL of the positive under a dot-product softmax; returns (loss, dL/dq).

    Computed via log-sum-exp so arbitrary score magnitudes stay stable.
    """
    if not neg_vecs:
        raise ValueError("need at least one negative (objective is degenerate)")
    q = np.asarray(q_vec, dtype=np.float64)
    vecs = np.vstack([pos_vec] + list(neg_vecs)).astype(np.float64)
    if vecs.shape[1] != q.shape[0]:
        raise ValueError(f"dim mismatch: q has {q.shape[0]}, passages have {vecs.shape[1]}")
    scores = vecs @ q
    m = float(np.max(scores))
    lse = m + np.log(np.sum(np.exp(scores - m)))
    loss = float(lse - scores[0])
    probs = np.exp(scores - lse)
    grad = probs @ vecs - vecs[0]
    return loss, grad


def build_training_examples(
    sessions: list[ConversationSession],
    qrels: Qrels,
    rel_threshold: int = 1,
    max_concat_len: int = 512,
) -> list[TrainingExample]:
    """One example per turn with at least one passage at grade >= threshold."""
    grouped = qrels.grouped()
    examples = []
    for session in sessions:
        for turn in session.turns:
            grades = grouped.get(turn.turn_id, {})
            positives = sorted(pid for pid, g in grades.items() if g >= rel_threshold)
            if not positives:
                continue
            examples.append(
                TrainingExample(
                    query_id=turn.turn_id,
                    reformulated_query=reformulate_query(
                        session, turn.ordinal, max_concat_len
                    ),
                    positive_pids=positives,
                )
            )
    return examples


def make_batches(
    examples: list[TrainingExample], cfg: TrainConfig
) -> tuple[list[list[TrainingExample]], BatchReport]:
    """Seed-shuffled batches; negatives are implicit (other members' positives).

    Trailing groups smaller than two examples cannot form negatives and are
    dropped with a warning. Examples sharing a primary positive within one
    batch are kept (the duplicate merely weakens one negative) but counted.
    """
    for ex in examples:
        ex.validate()
    report = BatchReport()
    order = list(examples)
    random.Random(cfg.seed).shuffle(order)
    batches = []
    for i in range(0, len(order), cfg.batch_size):
        chunk = order[i : i + cfg.batch_size]
        if len(chunk) < 2:
            report.dropped_examples += len(chunk)
            log.warning(
                "dropping %d leftover example(s): too few to form in-batch negatives",
                len(chunk),
            )
            continue
        primaries = [ex.positive_pids[0] for ex in chunk]
        report.positive_collisions += len(primaries) - len(set(primaries))
        batches.append(chunk)
    report.batches = len(batches)
    return batches, report


def _passage_embeddings(
    examples: list[TrainingExample],
    collection: PassageCollection,
    passage_encoder,
) -> dict[str, np.ndarray]:
    emb = {}
    for ex in examples:
        pid = ex.positive_pids[0]
        if pid not in emb:
            emb[pid] = passage_encoder.encode(collection.passages[pid].text)
    return emb


def train(
    examples: list[TrainingExample],
    query_encoder: HashedProjectionEncoder,
    passage_encoder,
    cfg: TrainConfig,
    collection: PassageCollection,
) -> tuple[HashedProjectionEncoder, TrainingReport]:
    """SGD over the contrastive objective; returns a trained copy of the encoder.

    The input encoders are left untouched: the query encoder is cloned before
    any update and the passage encoder is only ever read. Each example uses
    its first positive pid as the scored positive.
    """
    if query_encoder.dim != passage_encoder.dim:
        raise ValueError("query and passage encoders must share dim")
    if not examples:
        raise ValueError("no training examples")
    trained = query_encoder.clone()
    report = TrainingReport(examples=len(examples))
    emb = _passage_embeddings(examples, collection, passage_encoder)

    # One seed-shuffled batch sequence, reused every epoch: with lr=0 the
    # per-epoch mean loss is then exactly constant.
    batches, breport = make_batches(examples, cfg)
    report.batches_per_epoch = breport.batches
    report.dropped_examples = breport.dropped_examples
    report.positive_collisions = breport.positive_collisions
    if not batches:
        raise TrainingError("no usable batches (all smaller than 2 examples)")

    for epoch in range(cfg.epochs):
        losses = []
        for b, batch in enumerate(batches):
            pos_vecs = [emb[ex.positive_pids[0]] for ex in batch]
            grad_w: dict[int, np.ndarray] = {}
            for i, ex in enumerate(batch):
                slots = trained.token_slots(ex.reformulated_query)
                q_vec = np.zeros(trained.dim, dtype=np.float64)
                for slot, count in slots.items():
                    q_vec += count * trained.weights[slot]
                negs = [pos_vecs[j] for j in range(len(batch)) if j != i]
                loss, grad_q = contrastive_loss(q_vec, pos_vecs[i], negs)
                if not np.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch + 1}, batch {b + 1}, "
                        f"example {ex.query_id!r}"
                    )
                losses.append(loss)
                for slot, count in slots.items():
                    g = grad_w.get(slot)
                    if g is None:
                        grad_w[slot] = count * grad_q
                    else:
                        g += count * grad_q
            scale = cfg.learning_rate / len(batch)
            for slot, g in grad_w.items():
                trained.weights[slot] -= scale * g
        report.epoch_mean_loss.append(float(np.mean(losses)))
    return trained, report
