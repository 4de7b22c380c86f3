"""Rank-based retrieval metrics and paired significance testing.

Metric conventions follow the trec_eval family: NDCG uses linear gains with a
log2(rank+1) discount (``ndcg_cut``), MRR and Recall binarize at a
configurable grade threshold, and macro averages run over every query that
appears in the qrels — a query missing from the run scores zero everywhere.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from scipy import special

from .datamodel import Qrels, RankedRun

_METRIC_RE = re.compile(r"^(mrr|ndcg|recall)(?:@(\d+))?$")


def parse_metric(name: str) -> tuple[str, int | None]:
    m = _METRIC_RE.match(name.strip().lower())
    if not m:
        raise ValueError(f"unknown metric {name!r} (expected mrr, ndcg@k, recall@k)")
    kind, k = m.group(1), m.group(2)
    if kind in ("ndcg", "recall") and k is None:
        raise ValueError(f"metric {name!r} needs a cutoff, e.g. {kind}@10")
    return kind, int(k) if k is not None else None


def reciprocal_rank(
    ranked_pids: list[str],
    qrels_for_query: dict[str, int],
    rel_threshold: int = 1,
    k: int | None = None,
) -> float:
    """1/rank of the first passage at grade >= threshold; 0.0 if none retrieved."""
    depth = len(ranked_pids) if k is None else min(k, len(ranked_pids))
    for i in range(depth):
        if qrels_for_query.get(ranked_pids[i], 0) >= rel_threshold:
            return 1.0 / (i + 1)
    return 0.0


def ndcg_at_k(
    ranked_pids: list[str], qrels_for_query: dict[str, int], k: int = 3
) -> float:
    """Linear-gain NDCG@k; 0.0 when the query has no positively graded passage."""
    if k < 1:
        raise ValueError("k must be >= 1")
    dcg = 0.0
    for i, pid in enumerate(ranked_pids[:k], start=1):
        gain = qrels_for_query.get(pid, 0)
        if gain > 0:
            dcg += gain / math.log2(i + 1)
    ideal = sorted((g for g in qrels_for_query.values() if g > 0), reverse=True)
    idcg = sum(g / math.log2(i + 1) for i, g in enumerate(ideal[:k], start=1))
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def recall_at_k(
    ranked_pids: list[str],
    qrels_for_query: dict[str, int],
    k: int,
    rel_threshold: int = 1,
) -> float:
    """Fraction of relevant passages present in the top k; 0.0 if none relevant."""
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = {pid for pid, g in qrels_for_query.items() if g >= rel_threshold}
    if not relevant:
        return 0.0
    hits = sum(1 for pid in ranked_pids[:k] if pid in relevant)
    return hits / len(relevant)


@dataclass
class EvalResult:
    per_query: dict[str, dict[str, float]] = field(default_factory=dict)
    means: dict[str, float] = field(default_factory=dict)


def evaluate_run(
    run: RankedRun,
    qrels: Qrels,
    metrics: list[str],
    rel_threshold: int = 1,
) -> EvalResult:
    """Per-query metric table plus macro means over all qrels queries."""
    parsed = [(name, *parse_metric(name)) for name in metrics]
    grouped = qrels.grouped()
    result = EvalResult()
    for qid in sorted(grouped):
        judgments = grouped[qid]
        ranked = run.ranked_pids(qid)
        row = {}
        for name, kind, k in parsed:
            if kind == "mrr":
                row[name] = reciprocal_rank(ranked, judgments, rel_threshold, k)
            elif kind == "ndcg":
                row[name] = ndcg_at_k(ranked, judgments, k)
            else:
                row[name] = recall_at_k(ranked, judgments, k, rel_threshold)
        result.per_query[qid] = row
    n = len(result.per_query)
    for name, _, _ in parsed:
        total = sum(row[name] for row in result.per_query.values())
        result.means[name] = total / n if n else 0.0
    return result


def paired_t_test(
    per_query_a: list[float], per_query_b: list[float]
) -> tuple[float, float]:
    """Two-sided paired Student t-test on per-query score differences.

    Degenerate convention: zero-variance differences give p=1.0 when the mean
    difference is zero and p=0.0 otherwise.
    """
    if len(per_query_a) != len(per_query_b):
        raise ValueError(
            f"length mismatch: {len(per_query_a)} vs {len(per_query_b)}"
        )
    n = len(per_query_a)
    if n < 2:
        raise ValueError("need at least 2 paired observations")
    diffs = [a - b for a, b in zip(per_query_a, per_query_b)]
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    # Differences that are constant up to float rounding count as zero
    # variance (the inputs are themselves computed scores).
    if var == 0.0 or math.sqrt(var) <= abs(mean) * 1e-12:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / math.sqrt(var / n)
    p = 2.0 * float(special.stdtr(n - 1, -abs(t)))
    return t, p
