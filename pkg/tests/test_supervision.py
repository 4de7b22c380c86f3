"""Query forms and PRF pseudo-label sampling."""

from collections import Counter

import pytest

from convsdg.datamodel import Passage, PassageCollection, Qrels, make_session
from convsdg.retrieval import ScoredPassage
from convsdg.supervision import (
    PrfConfig,
    QueryForm,
    assign_pseudo_labels,
    build_query_form,
)


@pytest.fixture
def ocean_session():
    from convsdg.datamodel import TopicDescription

    topic = TopicDescription("ocean", "Ocean life", "ocean life")
    return make_session(
        "s1", topic,
        [("what are whales", "mammals"), ("where do they live", "everywhere")],
    )


class TestBuildQueryForm:
    def test_q_plus_a_plus_topic(self, ocean_session):
        got = build_query_form(ocean_session, 1, QueryForm.Q_PLUS_A_PLUS_TOPIC)
        assert got == "what are whales mammals ocean life"

    def test_convq_plus_topic_at_turn_1(self, ocean_session):
        got = build_query_form(ocean_session, 1, QueryForm.CONVQ_PLUS_TOPIC)
        assert got == "what are whales ocean life"

    def test_convq_conva_order_at_turn_2(self, ocean_session):
        got = build_query_form(ocean_session, 2, QueryForm.CONVQ_CONVA_PLUS_TOPIC)
        assert got == ("what are whales mammals where do they live everywhere "
                       "ocean life")

    def test_q_plus_a(self, ocean_session):
        assert build_query_form(ocean_session, 2, QueryForm.Q_PLUS_A) == \
            "where do they live everywhere"

    def test_missing_answer_is_an_error(self, whale_topic):
        session = make_session("s1", whale_topic, [("q one", None)])
        with pytest.raises(ValueError, match="answer"):
            build_query_form(session, 1, QueryForm.Q_PLUS_A)
        assert build_query_form(session, 1, QueryForm.CONVQ_PLUS_TOPIC)

    def test_out_of_range_turn(self, ocean_session):
        with pytest.raises(ValueError, match="range"):
            build_query_form(ocean_session, 3, QueryForm.Q_PLUS_A)

    def test_form_codes(self):
        assert QueryForm.from_code("qat") is QueryForm.Q_PLUS_A_PLUS_TOPIC
        with pytest.raises(ValueError):
            QueryForm.from_code("nope")


class _FixedRetriever:
    """Returns a fixed ranked list regardless of the query."""

    def __init__(self, pids):
        self.pids = pids

    def search(self, query, k):
        return [ScoredPassage(pid, float(len(self.pids) - i))
                for i, pid in enumerate(self.pids[:k])]


@pytest.fixture
def five_doc_collection():
    return PassageCollection([Passage(f"d{i}", f"text {i}") for i in range(1, 6)])


class TestAssignPseudoLabels:
    def test_samples_subset_of_top_k(self, ocean_session, five_doc_collection):
        retriever = _FixedRetriever(["d1", "d2", "d3", "d4", "d5"])
        cfg = PrfConfig(top_k=5, m=3, seed=7)
        qrels, report = assign_pseudo_labels(
            [ocean_session], retriever, five_doc_collection, cfg
        )
        assert qrels.source == "pseudo"
        assert report.labeled_turns == 2
        for turn_id in ("s1_1", "s1_2"):
            chosen = set(qrels.for_query(turn_id))
            assert len(chosen) == 3
            assert chosen <= {"d1", "d2", "d3", "d4", "d5"}
        again, _ = assign_pseudo_labels(
            [ocean_session], retriever, five_doc_collection, cfg
        )
        assert again.entries == qrels.entries

    def test_fewer_results_than_m_labels_all(self, ocean_session,
                                             five_doc_collection):
        retriever = _FixedRetriever(["d1", "d2"])
        qrels, _ = assign_pseudo_labels(
            [ocean_session], retriever, five_doc_collection,
            PrfConfig(top_k=5, m=3, seed=0),
        )
        assert set(qrels.for_query("s1_1")) == {"d1", "d2"}

    def test_empty_results_skip_turn(self, ocean_session, five_doc_collection):
        retriever = _FixedRetriever([])
        qrels, report = assign_pseudo_labels(
            [ocean_session], retriever, five_doc_collection,
            PrfConfig(top_k=5, m=3, seed=0),
        )
        assert len(qrels) == 0
        assert report.skipped_turns == 2

    def test_turn_without_answer_is_skipped_for_answer_forms(
        self, whale_topic, five_doc_collection
    ):
        session = make_session("s1", whale_topic, [("q one", None)])
        retriever = _FixedRetriever(["d1", "d2", "d3"])
        qrels, report = assign_pseudo_labels(
            [session], retriever, five_doc_collection,
            PrfConfig(seed=0, form=QueryForm.Q_PLUS_A),
        )
        assert report.skipped_turns == 1
        assert len(qrels) == 0

    def test_output_independent_of_session_order(self, whale_topic,
                                                 five_doc_collection):
        sessions = [
            make_session(f"s{i}", whale_topic, [(f"q {i}", "a")]) for i in range(4)
        ]
        retriever = _FixedRetriever(["d1", "d2", "d3", "d4", "d5"])
        cfg = PrfConfig(seed=3)
        forward, _ = assign_pseudo_labels(sessions, retriever,
                                          five_doc_collection, cfg)
        backward, _ = assign_pseudo_labels(list(reversed(sessions)), retriever,
                                           five_doc_collection, cfg)
        assert forward.entries == backward.entries

    def test_selection_uniform_over_subsets(self, whale_topic,
                                            five_doc_collection):
        # 2,000 reseeded draws of 3-of-5; each of the 10 subsets should land
        # within 4 sigma of 200 (the full 10k-draw check runs in acceptance).
        session = make_session("s1", whale_topic, [("q", "a")])
        retriever = _FixedRetriever(["d1", "d2", "d3", "d4", "d5"])
        counts = Counter()
        for seed in range(2000):
            qrels, _ = assign_pseudo_labels(
                [session], retriever, five_doc_collection,
                PrfConfig(top_k=5, m=3, seed=seed),
            )
            counts[frozenset(qrels.for_query("s1_1"))] += 1
        assert len(counts) == 10
        sigma = (2000 * 0.1 * 0.9) ** 0.5
        for subset, count in counts.items():
            assert abs(count - 200) <= 4 * sigma, (subset, count)

    def test_m_greater_than_top_k_rejected(self):
        with pytest.raises(ValueError):
            PrfConfig(top_k=3, m=4)
