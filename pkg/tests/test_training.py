"""Reformulation, contrastive loss/gradient, batching, and the training loop."""

import math

import numpy as np
import pytest

from convsdg.datamodel import Qrels, TrainingExample, make_session
from convsdg.retrieval import new_passage_encoder, new_query_encoder
from convsdg.training import (
    TrainConfig,
    TrainingError,
    build_training_examples,
    contrastive_loss,
    make_batches,
    reformulate_query,
    train,
)


@pytest.fixture
def cancer_session(whale_topic):
    return make_session(
        "s1", whale_topic,
        [("what is throat cancer", None), ("is it treatable", None),
         ("what are symptoms", None)],
    )


class TestReformulateQuery:
    def test_first_turn_is_just_q1(self, cancer_session):
        assert reformulate_query(cancer_session, 1) == "what is throat cancer"

    def test_concatenates_all_turns(self, cancer_session):
        assert reformulate_query(cancer_session, 3) == (
            "what is throat cancer is it treatable what are symptoms"
        )

    def test_drops_earliest_turn_first(self, cancer_session):
        # 4 + 3 + 3 tokens; a budget of 6 forces q1 out.
        assert reformulate_query(cancer_session, 3, max_concat_len=6) == (
            "is it treatable what are symptoms"
        )

    def test_current_turn_truncated_from_front_as_last_resort(self, cancer_session):
        assert reformulate_query(cancer_session, 3, max_concat_len=2) == "are symptoms"

    def test_out_of_range_n(self, cancer_session):
        with pytest.raises(ValueError):
            reformulate_query(cancer_session, 4)


class TestContrastiveLoss:
    def test_equal_scores_one_negative_is_ln2(self):
        q = np.array([1.0, 0.0])
        v = np.array([0.5, 1.0])
        loss, _ = contrastive_loss(q, v, [v.copy()])
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_equal_scores_three_negatives_is_ln4(self):
        q = np.array([1.0, 2.0])
        v = np.array([0.3, 0.4])
        loss, _ = contrastive_loss(q, v, [v.copy() for _ in range(3)])
        assert loss == pytest.approx(math.log(4.0), abs=1e-12)

    def test_unit_gap_value(self):
        # s+ = 1, s- = 0  ->  ln(1 + e^-1)
        q = np.array([1.0])
        loss, _ = contrastive_loss(q, np.array([1.0]), [np.array([0.0])])
        assert loss == pytest.approx(math.log(1.0 + math.exp(-1.0)), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        for _ in range(25):
            dim = rng.integers(2, 12)
            q = rng.standard_normal(dim)
            pos = rng.standard_normal(dim)
            negs = [rng.standard_normal(dim) for _ in range(rng.integers(1, 6))]
            _, grad = contrastive_loss(q, pos, negs)
            h = 1e-6
            for d in range(dim):
                e = np.zeros(dim)
                e[d] = h
                up, _ = contrastive_loss(q + e, pos, negs)
                down, _ = contrastive_loss(q - e, pos, negs)
                fd = (up - down) / (2 * h)
                denom = max(abs(fd), abs(grad[d]), 1e-6)
                assert abs(grad[d] - fd) / denom < 1e-4

    def test_invariant_under_negative_permutation(self):
        rng = np.random.default_rng(3)
        q, pos = rng.standard_normal(6), rng.standard_normal(6)
        negs = [rng.standard_normal(6) for _ in range(4)]
        a, _ = contrastive_loss(q, pos, negs)
        b, _ = contrastive_loss(q, pos, list(reversed(negs)))
        assert a == pytest.approx(b, abs=1e-12)

    def test_adding_a_negative_never_decreases_loss(self):
        rng = np.random.default_rng(4)
        q, pos = rng.standard_normal(6), rng.standard_normal(6)
        negs = [rng.standard_normal(6)]
        for _ in range(5):
            before, _ = contrastive_loss(q, pos, negs)
            negs.append(rng.standard_normal(6))
            after, _ = contrastive_loss(q, pos, negs)
            assert after >= before

    def test_stable_at_huge_scores(self):
        q = np.array([1000.0])
        loss, grad = contrastive_loss(q, np.array([1.0]), [np.array([0.99])])
        assert np.isfinite(loss)
        assert np.all(np.isfinite(grad))

    def test_empty_negatives_rejected(self):
        with pytest.raises(ValueError):
            contrastive_loss(np.ones(2), np.ones(2), [])

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError, match="dim"):
            contrastive_loss(np.ones(2), np.ones(3), [np.ones(3)])


def _examples(n):
    return [
        TrainingExample(query_id=f"q{i}", reformulated_query=f"query {i}",
                        positive_pids=[f"d{i}"])
        for i in range(n)
    ]


class TestMakeBatches:
    def test_full_batch_gives_fifteen_negatives(self):
        batches, report = make_batches(_examples(16), TrainConfig(seed=0))
        assert len(batches) == 1 and len(batches[0]) == 16
        # In-batch rule: every example's negatives are the other 15 positives.
        others = {ex.positive_pids[0] for ex in batches[0][1:]}
        assert len(others) == 15

    def test_same_seed_same_sequence(self):
        a, _ = make_batches(_examples(40), TrainConfig(seed=5))
        b, _ = make_batches(_examples(40), TrainConfig(seed=5))
        assert [[e.query_id for e in batch] for batch in a] == [
            [e.query_id for e in batch] for batch in b
        ]

    def test_singleton_remainder_dropped(self):
        batches, report = make_batches(_examples(17), TrainConfig(seed=1))
        assert [len(b) for b in batches] == [16]
        assert report.dropped_examples == 1

    def test_positive_collisions_counted(self):
        examples = _examples(4)
        examples[1].positive_pids = ["d0"]  # collides with q0
        batches, report = make_batches(examples, TrainConfig(batch_size=4, seed=0))
        assert report.positive_collisions == 1
        assert sum(len(b) for b in batches) == 4


def _separable_setup(fixture_paths):
    from convsdg import datamodel as dm
    from convsdg.llm_gateway import BackendDescriptor, GenerationParams
    from convsdg.retrieval import Bm25Searcher
    from convsdg.session_gen import generate_session_corpus
    from convsdg.supervision import PrfConfig, assign_pseudo_labels

    collection = dm.load_collection(fixture_paths["collection"])
    topics = dm.read_topics(fixture_paths["topics"])[:8]
    sessions, _ = generate_session_corpus(
        topics, 1, 6, BackendDescriptor(kind="mock"), GenerationParams(seed=2)
    )
    qrels, _ = assign_pseudo_labels(
        sessions, Bm25Searcher(collection), collection, PrfConfig(seed=2)
    )
    examples = build_training_examples(sessions, qrels)
    return collection, examples


class TestTrain:
    def test_loss_improves_on_separable_fixture(self, fixture_paths):
        collection, examples = _separable_setup(fixture_paths)
        qenc = new_query_encoder(seed=2)
        penc = new_passage_encoder(seed=2)
        cfg = TrainConfig(epochs=5, learning_rate=0.05, seed=2)
        _, report = train(examples, qenc, penc, cfg, collection)
        assert report.epoch_mean_loss[4] < report.epoch_mean_loss[0]

    def test_zero_learning_rate_changes_nothing(self, fixture_paths):
        collection, examples = _separable_setup(fixture_paths)
        qenc = new_query_encoder(seed=2)
        penc = new_passage_encoder(seed=2)
        cfg = TrainConfig(epochs=2, learning_rate=0.0, seed=2)
        trained, report = train(examples, qenc, penc, cfg, collection)
        assert trained.weights.tobytes() == qenc.weights.tobytes()
        assert report.epoch_mean_loss[0] == pytest.approx(report.epoch_mean_loss[1])

    def test_same_seed_bit_identical(self, fixture_paths):
        collection, examples = _separable_setup(fixture_paths)
        cfg = TrainConfig(epochs=2, learning_rate=0.05, seed=9)
        a, _ = train(examples, new_query_encoder(seed=2), new_passage_encoder(seed=2),
                     cfg, collection)
        b, _ = train(examples, new_query_encoder(seed=2), new_passage_encoder(seed=2),
                     cfg, collection)
        assert a.weights.tobytes() == b.weights.tobytes()

    def test_passage_encoder_untouched(self, fixture_paths):
        collection, examples = _separable_setup(fixture_paths)
        penc = new_passage_encoder(seed=2)
        before = penc.weights.tobytes()
        train(examples, new_query_encoder(seed=2), penc,
              TrainConfig(epochs=1, learning_rate=0.05, seed=0), collection)
        assert penc.weights.tobytes() == before

    def test_input_query_encoder_not_mutated(self, fixture_paths):
        collection, examples = _separable_setup(fixture_paths)
        qenc = new_query_encoder(seed=2)
        before = qenc.weights.tobytes()
        train(examples, qenc, new_passage_encoder(seed=2),
              TrainConfig(epochs=1, learning_rate=0.05, seed=0), collection)
        assert qenc.weights.tobytes() == before

    def test_dim_mismatch_rejected(self, fixture_paths):
        collection, examples = _separable_setup(fixture_paths)
        with pytest.raises(ValueError, match="dim"):
            train(examples, new_query_encoder(dim=32, seed=0),
                  new_passage_encoder(dim=64, seed=0),
                  TrainConfig(), collection)

    def test_no_examples_rejected(self, tiny_collection):
        with pytest.raises(ValueError):
            train([], new_query_encoder(seed=0), new_passage_encoder(seed=0),
                  TrainConfig(), tiny_collection)


class TestBuildTrainingExamples:
    def test_only_annotated_turns_become_examples(self, whale_topic):
        session = make_session("s1", whale_topic,
                               [("what are whales", None), ("do they sing", None)])
        qrels = Qrels(source="pseudo")
        qrels.add("s1_2", "d3", 1)
        qrels.add("s1_2", "d1", 1)
        (example,) = build_training_examples([session], qrels)
        assert example.query_id == "s1_2"
        assert example.reformulated_query == "what are whales do they sing"
        assert example.positive_pids == ["d1", "d3"]  # sorted for determinism

    def test_threshold_filters_low_grades(self, whale_topic):
        session = make_session("s1", whale_topic, [("q", None)])
        qrels = Qrels(source="manual")
        qrels.add("s1_1", "d1", 0)
        assert build_training_examples([session], qrels) == []


def test_batch_size_one_rejected():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
