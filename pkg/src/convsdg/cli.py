"""Subcommand front-end for the generation / supervision / training / eval stages.

Every subcommand is file-in, file-out, so experiments stay resumable and
reproducible from the shell. The ``pipeline``, ``ablate-size`` and
``ablate-form`` commands read the JSON config documented in the README; the
other commands take explicit paths.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import datamodel as dm
from .evaluation import evaluate_run, paired_t_test
from .llm_gateway import BackendDescriptor, GatewayError, GenerationParams
from .pipeline import (
    PipelineError,
    SIZE_FRACTIONS,
    load_config,
    make_supervision_retriever,
    run_data_size_ablation,
    run_pipeline,
    run_query_form_ablation,
    run_for_sessions,
)
from .query_aug import AugmentationConfig, augment_dataset, merge_datasets
from .retrieval import (
    Bm25Searcher,
    build_dense_index,
    load_encoder,
    new_passage_encoder,
    new_query_encoder,
    save_encoder,
)
from .session_gen import generate_session_corpus
from .supervision import PrfConfig, QueryForm, assign_pseudo_labels
from .training import TrainConfig, build_training_examples, reformulate_query, train

log = logging.getLogger(__name__)


def _backend_from_args(args) -> BackendDescriptor:
    if args.backend == "mock":
        return BackendDescriptor(kind="mock")
    return BackendDescriptor(
        kind="http_chat",
        model_name=args.model_name,
        endpoint=args.endpoint,
        rate_limit=args.rate_limit,
        max_retries=args.max_retries,
        timeout=args.timeout,
    )


def _params_from_args(args) -> GenerationParams:
    return GenerationParams(seed=args.seed)


def cmd_generate_dialogue(args) -> int:
    topics = dm.read_topics(args.topics)
    sessions, report = generate_session_corpus(
        topics, args.sessions_per_topic, args.turns,
        _backend_from_args(args), _params_from_args(args),
    )
    dm.write_sessions(sessions, args.out)
    print(f"requested={report.requested} produced={report.produced} "
          f"failed={report.failed} -> {args.out}")
    return 0


def cmd_augment_queries(args) -> int:
    sessions = dm.read_sessions(args.sessions)
    qrels = dm.read_qrels(args.qrels, source="manual")
    aug_sessions, aug_qrels, report = augment_dataset(
        sessions, qrels,
        AugmentationConfig(t=args.t, params=_params_from_args(args)),
        _backend_from_args(args),
    )
    merged_sessions, merged_qrels = merge_datasets(
        (sessions, qrels), (aug_sessions, aug_qrels)
    )
    dm.write_sessions(merged_sessions, args.out_sessions)
    dm.write_qrels(merged_qrels, args.out_qrels)
    print(f"augmented_turns={report.turns_augmented} skipped={report.turns_skipped} "
          f"degenerate={report.degenerate} merged_sessions={len(merged_sessions)}")
    return 0


def cmd_build_supervision(args) -> int:
    sessions = dm.read_sessions(args.sessions)
    collection = dm.load_collection(args.collection)
    if args.retriever == "bm25":
        retriever = Bm25Searcher(collection)
    else:
        from .retrieval import DenseSearcher

        if args.encoder:
            qenc = load_encoder(args.encoder)
        else:
            qenc = new_query_encoder(args.dim, 64, args.hash_width, args.seed)
        penc = new_passage_encoder(qenc.dim, 384, qenc.hash_width, args.seed)
        retriever = DenseSearcher(qenc, build_dense_index(collection, penc))
    cfg = PrfConfig(top_k=args.top_k, m=args.m, seed=args.seed,
                    form=QueryForm.from_code(args.form))
    qrels, report = assign_pseudo_labels(sessions, retriever, collection, cfg)
    dm.write_qrels(qrels, args.out_qrels)
    print(f"labeled_turns={report.labeled_turns} skipped={report.skipped_turns} "
          f"entries={len(qrels)} -> {args.out_qrels}")
    return 0


def cmd_train(args) -> int:
    sessions = dm.read_sessions(args.sessions)
    qrels = dm.read_qrels(args.qrels, source=args.qrels_source)
    collection = dm.load_collection(args.collection)
    examples = build_training_examples(
        sessions, qrels, rel_threshold=args.rel_threshold,
        max_concat_len=args.max_concat_len,
    )
    if not examples:
        raise PipelineError("no training examples (no annotated turns)")
    qenc = new_query_encoder(args.dim, args.query_max_len, args.hash_width, args.seed)
    penc = new_passage_encoder(args.dim, args.passage_max_len, args.hash_width,
                               args.seed)
    cfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs,
                      learning_rate=args.lr, seed=args.seed,
                      max_concat_len=args.max_concat_len)
    trained, report = train(examples, qenc, penc, cfg, collection)
    save_encoder(trained, args.out_encoder)
    losses = " ".join(f"{l:.4f}" for l in report.epoch_mean_loss)
    print(f"examples={report.examples} epoch_mean_loss=[{losses}] "
          f"-> {args.out_encoder}")
    return 0


def _load_query_texts(args) -> dict[str, str]:
    """(query_id -> text) pairs: session turns reformulated, or a plain TSV."""
    if args.queries_format == "sessions":
        queries = {}
        for session in dm.read_sessions(args.queries):
            for turn in session.turns:
                queries[turn.turn_id] = reformulate_query(
                    session, turn.ordinal, args.max_concat_len
                )
        return queries
    queries = {}
    with open(args.queries, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 1)
            if len(parts) != 2:
                raise dm.DataFormatError(
                    f"{args.queries}:{lineno}: expected 'qid<TAB>text'"
                )
            queries[parts[0]] = parts[1]
    return queries


def cmd_retrieve(args) -> int:
    collection = dm.load_collection(args.collection)
    queries = _load_query_texts(args)
    scored = {}
    if args.mode == "bm25":
        searcher = Bm25Searcher(collection)
        for qid, text in queries.items():
            hits = searcher.search(text, args.k)
            scored[qid] = [(h.pid, h.score) for h in hits]
    else:
        if not args.encoder:
            raise PipelineError("dense modes need --encoder")
        qenc = load_encoder(args.encoder)
        penc = new_passage_encoder(qenc.dim, args.passage_max_len, qenc.hash_width,
                                   args.seed)
        index = build_dense_index(collection, penc)
        mode = "exact" if args.mode == "dense-exact" else "ann"
        from .retrieval import dense_search

        for qid, text in queries.items():
            hits = dense_search(qenc.encode(text), index, args.k, mode)
            scored[qid] = [(h.pid, h.score) for h in hits]
    run = dm.RankedRun.from_scores(scored, tag=args.tag)
    dm.write_run(run, args.out_run)
    print(f"queries={len(queries)} k={args.k} mode={args.mode} -> {args.out_run}")
    return 0


def cmd_evaluate(args) -> int:
    run = dm.read_run(args.run)
    qrels = dm.read_qrels(args.qrels)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    result = evaluate_run(run, qrels, metrics, args.rel_threshold)
    tsv_lines = ["query_id\t" + "\t".join(metrics)]
    for qid, row in result.per_query.items():
        tsv_lines.append(qid + "\t" + "\t".join(f"{row[m]:.6f}" for m in metrics))
    tsv = "\n".join(tsv_lines) + "\n"
    if args.per_query_out:
        with open(args.per_query_out, "w", encoding="utf-8") as fh:
            fh.write(tsv)
    else:
        sys.stdout.write(tsv)
    for m in metrics:
        print(f"macro {m} = {result.means[m]:.6f} over {len(result.per_query)} queries")
    if args.compare:
        other = evaluate_run(dm.read_run(args.compare), qrels, metrics,
                             args.rel_threshold)
        for m in metrics:
            qids = list(result.per_query)
            a = [result.per_query[q][m] for q in qids]
            b = [other.per_query[q][m] for q in qids]
            t, p = paired_t_test(a, b)
            print(f"t-test {m}: t={t:.6f} p={p:.6f} "
                  f"(macro {result.means[m]:.6f} vs {other.means[m]:.6f})")
    return 0


def _config_from_args(args):
    overrides = {
        "workspace": args.workspace,
        "seed": args.seed,
        "backend": {"mock": "mock", "http": "http"}.get(args.backend, args.backend)
        if args.backend else None,
    }
    if not args.config:
        raise PipelineError("this command needs --config FILE")
    return load_config(args.config, overrides)


def cmd_pipeline(args) -> int:
    manifest = run_pipeline(_config_from_args(args), resume=args.resume)
    for name, info in manifest["artifacts"].items():
        print(f"{name}: {info['path']} sha256={info['sha256'][:12]}…")
    skipped = sum(1 for s in manifest["stages"] if s["skipped"])
    print(f"stages={len(manifest['stages'])} skipped={skipped}")
    return 0


def cmd_ablate_size(args) -> int:
    fractions = ([float(f) for f in args.fractions.split(",")]
                 if args.fractions else list(SIZE_FRACTIONS))
    path = run_data_size_ablation(_config_from_args(args), fractions)
    print(f"wrote {path}")
    return 0


def cmd_ablate_form(args) -> int:
    path = run_query_form_ablation(_config_from_args(args))
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--workspace", help="artifact directory (overrides config)")
    common.add_argument("--seed", type=int, default=0, help="global random seed")
    common.add_argument("--resume", action="store_true",
                        help="skip stages whose outputs already exist")
    common.add_argument("--backend", choices=["mock", "http"], default="mock",
                        help="generation backend")
    common.add_argument("--model-name", default="gpt-3.5-turbo")
    common.add_argument("--endpoint", default="",
                        help="chat-completions URL for --backend http")
    common.add_argument("--rate-limit", type=int, default=60,
                        help="max requests per rolling minute")
    common.add_argument("--max-retries", type=int, default=3,
                        help="total HTTP attempts per request")
    common.add_argument("--timeout", type=float, default=30.0)

    parser = argparse.ArgumentParser(
        prog="convsdg",
        description="Generate conversational search sessions, build supervision, "
                    "fine-tune a dense retriever, and evaluate runs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-dialogue", parents=[common],
                       help="generate whole sessions from topic descriptions")
    p.add_argument("--topics", required=True)
    p.add_argument("--sessions-per-topic", type=int, default=1)
    p.add_argument("--turns", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_dialogue)

    p = sub.add_parser("augment-queries", parents=[common],
                       help="rewrite annotated turns and propagate their labels")
    p.add_argument("--sessions", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--t", type=int, default=2, help="rewrites per turn")
    p.add_argument("--out-sessions", required=True)
    p.add_argument("--out-qrels", required=True)
    p.set_defaults(func=cmd_augment_queries)

    p = sub.add_parser("build-supervision", parents=[common],
                       help="PRF pseudo labels for generated sessions")
    p.add_argument("--sessions", required=True)
    p.add_argument("--collection", required=True)
    p.add_argument("--form", choices=["qa", "qat", "cqt", "cqat"], default="qat")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--retriever", choices=["bm25", "dense"], default="bm25")
    p.add_argument("--encoder", help="query encoder checkpoint for --retriever dense")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--hash-width", type=int, default=1 << 15)
    p.add_argument("--out-qrels", required=True)
    p.set_defaults(func=cmd_build_supervision)

    p = sub.add_parser("train", parents=[common],
                       help="fine-tune the query encoder contrastively")
    p.add_argument("--sessions", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--qrels-source", choices=["manual", "pseudo"], default="pseudo")
    p.add_argument("--collection", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--hash-width", type=int, default=1 << 15)
    p.add_argument("--query-max-len", type=int, default=64)
    p.add_argument("--passage-max-len", type=int, default=384)
    p.add_argument("--max-concat-len", type=int, default=512)
    p.add_argument("--rel-threshold", type=int, default=1)
    p.add_argument("--out-encoder", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("retrieve", parents=[common],
                       help="produce a TREC run for session turns or ad-hoc queries")
    p.add_argument("--mode", choices=["bm25", "dense-exact", "dense-ann"],
                   required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--queries", required=True,
                   help="sessions JSONL (turns reformulated) or qid<TAB>text TSV")
    p.add_argument("--queries-format", choices=["sessions", "tsv"],
                   default="sessions")
    p.add_argument("--collection", required=True)
    p.add_argument("--encoder", help="query encoder checkpoint (dense modes)")
    p.add_argument("--passage-max-len", type=int, default=384)
    p.add_argument("--max-concat-len", type=int, default=512)
    p.add_argument("--tag", default="convsdg")
    p.add_argument("--out-run", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score a run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", default="mrr,ndcg@3,recall@100")
    p.add_argument("--rel-threshold", type=int, default=1)
    p.add_argument("--compare", help="second run; adds a paired t-test per metric")
    p.add_argument("--per-query-out", help="write the per-query TSV here "
                                           "instead of stdout")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", parents=[common],
                       help="run a full scenario from a config file")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("ablate-size", parents=[common],
                       help="retrain on fractions of the generated data")
    p.add_argument("--fractions", help="comma list, default 0.25,0.5,0.75,1.0")
    p.set_defaults(func=cmd_ablate_size)

    p = sub.add_parser("ablate-form", parents=[common],
                       help="retrain under each PRF query form")
    p.set_defaults(func=cmd_ablate_form)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (dm.DataFormatError, PipelineError, GatewayError, ValueError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
