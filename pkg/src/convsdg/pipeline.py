"""End-to-end scenario runner: stages, workspace artifacts, and ablations.

Two scenarios are wired:

* ``dialogue_unsupervised`` — generate sessions from topics, pseudo-label them
  with PRF, fine-tune the query encoder, retrieve on held-out sessions,
  evaluate.
* ``query_semisupervised`` — rewrite annotated turns, propagate labels, merge
  with the originals, then train / retrieve / evaluate the same way.

Each stage reads and writes workspace files, so runs are resumable: with
``resume=True`` a stage whose outputs already exist is skipped. The manifest
lists every artifact with a SHA-256 content hash.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import datamodel as dm
from .llm_gateway import BackendDescriptor, GenerationParams
from .query_aug import AugmentationConfig, augment_dataset, merge_datasets
from .retrieval import (
    Bm25Searcher,
    DenseSearcher,
    build_dense_index,
    dense_search,
    load_encoder,
    new_passage_encoder,
    new_query_encoder,
    save_encoder,
)
from .seeds import derive_seed
from .session_gen import generate_session_corpus
from .supervision import PrfConfig, QueryForm, assign_pseudo_labels
from .training import TrainConfig, build_training_examples, reformulate_query, train
from .evaluation import evaluate_run

log = logging.getLogger(__name__)

SCENARIOS = ("dialogue_unsupervised", "query_semisupervised")
FORM_CODES = ("qa", "qat", "cqt", "cqat")
SIZE_FRACTIONS = (0.25, 0.50, 0.75, 1.00)
_ABLATION_METRICS = ("mrr", "ndcg@3", "recall@100")


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    """Flat key-value experiment configuration (JSON on disk)."""

    scenario: str
    workspace: str
    collection: str
    test_sessions: str
    test_qrels: str
    topics: str | None = None
    train_sessions: str | None = None
    train_qrels: str | None = None
    seed: int = 0
    backend: str = "mock"
    model_name: str = "mock-chat"
    endpoint: str = ""
    rate_limit: int = 60
    max_retries: int = 3
    timeout: float = 30.0
    temperature: float = 1.0
    max_output_tokens: int = 1024
    sessions_per_topic: int = 1
    n_turns: int = 8
    form: str = "qat"
    top_k: int = 5
    m: int = 3
    supervision_retriever: str = "bm25"
    t: int = 2
    dim: int = 64
    hash_width: int = 32768
    query_max_len: int = 64
    passage_max_len: int = 384
    batch_size: int = 16
    epochs: int = 5
    learning_rate: float = 1e-5
    max_concat_len: int = 512
    rel_threshold: int = 1
    retrieve_k: int = 100
    retrieve_mode: str = "exact"
    metrics: list[str] = field(default_factory=lambda: ["mrr", "ndcg@3", "recall@100"])

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise PipelineError(
                f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}"
            )
        required = {"workspace": self.workspace, "collection": self.collection,
                    "test_sessions": self.test_sessions, "test_qrels": self.test_qrels}
        if self.scenario == "dialogue_unsupervised":
            required["topics"] = self.topics
        else:
            required["train_sessions"] = self.train_sessions
            required["train_qrels"] = self.train_qrels
        missing = [k for k, v in required.items() if not v]
        if missing:
            raise PipelineError(f"config is missing required keys: {missing}")
        if self.backend not in ("mock", "http"):
            raise PipelineError(f"backend must be 'mock' or 'http', got {self.backend!r}")
        if self.retrieve_mode not in ("exact", "ann"):
            raise PipelineError(
                f"retrieve_mode must be 'exact' or 'ann', got {self.retrieve_mode!r}"
            )
        QueryForm.from_code(self.form)


_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _interpolate(value):
    if isinstance(value, str):
        def sub(m):
            name = m.group(1)
            if name not in os.environ:
                raise PipelineError(f"config references unset environment variable ${name}")
            return os.environ[name]
        return _ENV_RE.sub(sub, value)
    return value


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    """Read the JSON config, interpolate ${ENV} refs, apply flag overrides."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise PipelineError(f"{path}: config must be a JSON object")
    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise PipelineError(f"{path}: unknown config keys: {unknown}")
    raw = {k: _interpolate(v) for k, v in raw.items()}
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    try:
        config = PipelineConfig(**raw)
    except TypeError as exc:
        raise PipelineError(f"{path}: {exc}") from None
    config.validate()
    return config


def _backend(config: PipelineConfig) -> BackendDescriptor:
    if config.backend == "mock":
        return BackendDescriptor(kind="mock", model_name=config.model_name)
    return BackendDescriptor(
        kind="http_chat",
        model_name=config.model_name,
        endpoint=config.endpoint,
        rate_limit=config.rate_limit,
        max_retries=config.max_retries,
        timeout=config.timeout,
    )


def _params(config: PipelineConfig) -> GenerationParams:
    return GenerationParams(
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
        seed=config.seed,
    )


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Stage bodies (file -> file)
# ---------------------------------------------------------------------------


def stage_generate(config: PipelineConfig, out_sessions) -> None:
    topics = dm.read_topics(config.topics)
    sessions, report = generate_session_corpus(
        topics, config.sessions_per_topic, config.n_turns,
        _backend(config), _params(config),
    )
    log.info("generation: requested=%d produced=%d failed=%d",
             report.requested, report.produced, report.failed)
    dm.write_sessions(sessions, out_sessions)


def make_supervision_retriever(config: PipelineConfig, collection: dm.PassageCollection):
    if config.supervision_retriever == "bm25":
        return Bm25Searcher(collection)
    if config.supervision_retriever == "dense":
        penc = new_passage_encoder(
            config.dim, config.passage_max_len, config.hash_width, config.seed
        )
        qenc = new_query_encoder(
            config.dim, config.query_max_len, config.hash_width, config.seed
        )
        return DenseSearcher(qenc, build_dense_index(collection, penc))
    raise PipelineError(
        f"unknown supervision retriever {config.supervision_retriever!r}"
    )


def stage_supervision(config: PipelineConfig, in_sessions, out_qrels,
                      form_code: str | None = None) -> None:
    sessions = dm.read_sessions(in_sessions)
    collection = dm.load_collection(config.collection)
    cfg = PrfConfig(
        top_k=config.top_k, m=config.m, seed=config.seed,
        form=QueryForm.from_code(form_code or config.form),
    )
    qrels, report = assign_pseudo_labels(
        sessions, make_supervision_retriever(config, collection), collection, cfg
    )
    log.info("supervision: labeled=%d skipped=%d", report.labeled_turns,
             report.skipped_turns)
    dm.write_qrels(qrels, out_qrels)


def stage_augment(config: PipelineConfig, out_sessions, out_qrels) -> None:
    sessions = dm.read_sessions(config.train_sessions)
    qrels = dm.read_qrels(config.train_qrels, source="manual")
    aug_sessions, aug_qrels, report = augment_dataset(
        sessions, qrels,
        AugmentationConfig(t=config.t, params=_params(config)),
        _backend(config),
    )
    merged_sessions, merged_qrels = merge_datasets(
        (sessions, qrels), (aug_sessions, aug_qrels)
    )
    log.info("augmentation: turns=%d skipped=%d degenerate=%d",
             report.turns_augmented, report.turns_skipped, report.degenerate)
    dm.write_sessions(merged_sessions, out_sessions)
    dm.write_qrels(merged_qrels, out_qrels)


def _train_encoder(config: PipelineConfig, examples, collection):
    qenc = new_query_encoder(
        config.dim, config.query_max_len, config.hash_width, config.seed
    )
    penc = new_passage_encoder(
        config.dim, config.passage_max_len, config.hash_width, config.seed
    )
    cfg = TrainConfig(
        batch_size=config.batch_size, epochs=config.epochs,
        learning_rate=config.learning_rate, seed=config.seed,
        max_concat_len=config.max_concat_len,
    )
    trained, report = train(examples, qenc, penc, cfg, collection)
    log.info("training: %d examples, epoch losses %s", report.examples,
             ["%.4f" % l for l in report.epoch_mean_loss])
    return trained


def stage_train(config: PipelineConfig, in_sessions, in_qrels, qrels_source,
                out_encoder) -> None:
    sessions = dm.read_sessions(in_sessions)
    qrels = dm.read_qrels(in_qrels, source=qrels_source)
    collection = dm.load_collection(config.collection)
    examples = build_training_examples(
        sessions, qrels, rel_threshold=1, max_concat_len=config.max_concat_len
    )
    if not examples:
        raise PipelineError("no training examples (no annotated turns)")
    trained = _train_encoder(config, examples, collection)
    save_encoder(trained, out_encoder)


def run_for_sessions(query_encoder, sessions, index, k: int, mode: str,
                     max_concat_len: int, tag: str) -> dm.RankedRun:
    """Retrieve for every turn of every session; query ids are turn ids."""
    scored = {}
    for session in sessions:
        for turn in session.turns:
            text = reformulate_query(session, turn.ordinal, max_concat_len)
            hits = dense_search(query_encoder.encode(text), index, k, mode)
            scored[turn.turn_id] = [(h.pid, h.score) for h in hits]
    return dm.RankedRun.from_scores(scored, tag=tag)


def stage_retrieve(config: PipelineConfig, in_encoder, out_run) -> None:
    query_encoder = load_encoder(in_encoder)
    collection = dm.load_collection(config.collection)
    penc = new_passage_encoder(
        config.dim, config.passage_max_len, config.hash_width, config.seed
    )
    index = build_dense_index(collection, penc)
    sessions = dm.read_sessions(config.test_sessions)
    run = run_for_sessions(
        query_encoder, sessions, index, config.retrieve_k, config.retrieve_mode,
        config.max_concat_len, tag=f"convsdg-{config.scenario}",
    )
    dm.write_run(run, out_run)


def stage_evaluate(config: PipelineConfig, in_run, out_report) -> None:
    run = dm.read_run(in_run)
    qrels = dm.read_qrels(config.test_qrels, source="manual")
    result = evaluate_run(run, qrels, config.metrics, config.rel_threshold)
    payload = {
        "metrics": config.metrics,
        "rel_threshold": config.rel_threshold,
        "means": result.means,
        "per_query": result.per_query,
    }
    with open(out_report, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def run_pipeline(config: PipelineConfig, resume: bool = False) -> dict:
    """Execute the configured scenario and return the artifact manifest."""
    config.validate()
    ws = Path(config.workspace)
    ws.mkdir(parents=True, exist_ok=True)
    if config.scenario == "dialogue_unsupervised":
        art = {
            "sessions": ws / "sessions.jsonl",
            "qrels": ws / "pseudo_qrels.txt",
        }
        qrels_source = "pseudo"
    else:
        art = {
            "sessions": ws / "merged_sessions.jsonl",
            "qrels": ws / "merged_qrels.txt",
        }
        qrels_source = "manual"
    art.update({
        "encoder": ws / "encoder.bin",
        "run": ws / "run.txt",
        "report": ws / "report.json",
    })

    if config.scenario == "dialogue_unsupervised":
        stages = [
            ("generate", [config.topics], [art["sessions"]],
             lambda: stage_generate(config, art["sessions"])),
            ("supervise", [art["sessions"], config.collection], [art["qrels"]],
             lambda: stage_supervision(config, art["sessions"], art["qrels"])),
        ]
    else:
        stages = [
            ("augment", [config.train_sessions, config.train_qrels],
             [art["sessions"], art["qrels"]],
             lambda: stage_augment(config, art["sessions"], art["qrels"])),
        ]
    stages += [
        ("train", [art["sessions"], art["qrels"], config.collection],
         [art["encoder"]],
         lambda: stage_train(config, art["sessions"], art["qrels"], qrels_source,
                             art["encoder"])),
        ("retrieve", [art["encoder"], config.collection, config.test_sessions],
         [art["run"]],
         lambda: stage_retrieve(config, art["encoder"], art["run"])),
        ("evaluate", [art["run"], config.test_qrels], [art["report"]],
         lambda: stage_evaluate(config, art["run"], art["report"])),
    ]

    stage_log = []
    for name, inputs, outputs, body in stages:
        if resume and all(Path(o).exists() for o in outputs):
            log.info("stage %s: outputs exist, skipping (resume)", name)
            stage_log.append({"name": name, "skipped": True})
            continue
        try:
            body()
        except Exception as exc:
            raise PipelineError(
                f"stage {name!r} failed (inputs: {[str(i) for i in inputs]}): {exc}"
            ) from exc
        stage_log.append({"name": name, "skipped": False})

    manifest = {
        "scenario": config.scenario,
        "workspace": str(ws),
        "seed": config.seed,
        "stages": stage_log,
        "artifacts": {
            name: {"path": str(path), "sha256": _sha256(path)}
            for name, path in art.items()
        },
    }
    with open(ws / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# Ablation runners
# ---------------------------------------------------------------------------


def _evaluate_examples(config: PipelineConfig, examples, collection,
                       test_sessions, test_qrels) -> dict[str, float]:
    """Train from scratch on ``examples`` and evaluate on the held-out split."""
    trained = _train_encoder(config, examples, collection)
    penc = new_passage_encoder(
        config.dim, config.passage_max_len, config.hash_width, config.seed
    )
    index = build_dense_index(collection, penc)
    run = run_for_sessions(
        trained, test_sessions, index, config.retrieve_k, config.retrieve_mode,
        config.max_concat_len, tag="ablation",
    )
    result = evaluate_run(run, test_qrels, list(_ABLATION_METRICS),
                          config.rel_threshold)
    return result.means


def _generated_artifacts(config: PipelineConfig) -> tuple[Path, Path]:
    ws = Path(config.workspace)
    if config.scenario == "dialogue_unsupervised":
        sessions, qrels = ws / "sessions.jsonl", ws / "pseudo_qrels.txt"
    else:
        sessions, qrels = ws / "merged_sessions.jsonl", ws / "merged_qrels.txt"
    for path in (sessions, qrels):
        if not path.exists():
            raise PipelineError(
                f"{path} not found; run the pipeline first to produce the "
                "generated dataset"
            )
    return sessions, qrels


def run_data_size_ablation(
    config: PipelineConfig, fractions=SIZE_FRACTIONS, out_csv=None
) -> str:
    """Retrain on seeded subsamples of the generated turns; one CSV row each.

    In the semi-supervised scenario the original annotated turns are always
    kept and only the augmented ones are subsampled.
    """
    fractions = sorted(fractions)
    if any(not (0.0 < f <= 1.0) for f in fractions):
        raise ValueError(f"fractions must lie in (0, 1], got {fractions}")
    sessions_path, qrels_path = _generated_artifacts(config)
    qrels_source = "pseudo" if config.scenario == "dialogue_unsupervised" else "manual"
    sessions = dm.read_sessions(sessions_path)
    qrels = dm.read_qrels(qrels_path, source=qrels_source)
    collection = dm.load_collection(config.collection)
    test_sessions = dm.read_sessions(config.test_sessions)
    test_qrels = dm.read_qrels(config.test_qrels, source="manual")
    examples = build_training_examples(
        sessions, qrels, rel_threshold=1, max_concat_len=config.max_concat_len
    )
    kept = [ex for ex in examples if "#a" not in ex.query_id]
    generated = [ex for ex in examples if "#a" in ex.query_id]
    if config.scenario == "dialogue_unsupervised":
        kept, generated = [], examples

    out_csv = Path(out_csv or Path(config.workspace) / "ablate_size.csv")
    rows = []
    for fraction in fractions:
        count = max(1, round(fraction * len(generated)))
        rng_seed = derive_seed(config.seed, "ablate-size", repr(fraction))
        idx = sorted(random.Random(rng_seed).sample(range(len(generated)), count))
        subset = kept + [generated[i] for i in idx]
        means = _evaluate_examples(config, subset, collection, test_sessions,
                                   test_qrels)
        rows.append((fraction, means))
        log.info("size ablation %.2f: %s", fraction, means)
    with open(out_csv, "w", encoding="utf-8") as fh:
        fh.write("fraction," + ",".join(_ABLATION_METRICS) + "\n")
        for fraction, means in rows:
            cells = ",".join(f"{means[m]:.6f}" for m in _ABLATION_METRICS)
            fh.write(f"{fraction:.2f},{cells}\n")
    return str(out_csv)


def run_query_form_ablation(config: PipelineConfig, out_csv=None) -> str:
    """Re-label the generated sessions under each query form, retrain, evaluate."""
    ws = Path(config.workspace)
    sessions_path = ws / "sessions.jsonl"
    if not sessions_path.exists():
        raise PipelineError(
            f"{sessions_path} not found; run the dialogue_unsupervised pipeline "
            "first to generate sessions"
        )
    sessions = dm.read_sessions(sessions_path)
    collection = dm.load_collection(config.collection)
    test_sessions = dm.read_sessions(config.test_sessions)
    test_qrels = dm.read_qrels(config.test_qrels, source="manual")
    retriever = make_supervision_retriever(config, collection)

    out_csv = Path(out_csv or ws / "ablate_form.csv")
    rows = []
    for code in FORM_CODES:
        cfg = PrfConfig(top_k=config.top_k, m=config.m, seed=config.seed,
                        form=QueryForm.from_code(code))
        qrels, report = assign_pseudo_labels(sessions, retriever, collection, cfg)
        examples = build_training_examples(
            sessions, qrels, rel_threshold=1, max_concat_len=config.max_concat_len
        )
        if not examples:
            raise PipelineError(f"form {code!r} produced no supervision")
        means = _evaluate_examples(config, examples, collection, test_sessions,
                                   test_qrels)
        rows.append((code, means))
        log.info("form ablation %s (labeled=%d): %s", code, report.labeled_turns,
                 means)
    with open(out_csv, "w", encoding="utf-8") as fh:
        fh.write("form," + ",".join(_ABLATION_METRICS) + "\n")
        for code, means in rows:
            cells = ",".join(f"{means[m]:.6f}" for m in _ABLATION_METRICS)
            fh.write(f"{code},{cells}\n")
    return str(out_csv)
