import pytest

from convsdg import synth
from convsdg.datamodel import Passage, PassageCollection, TopicDescription, make_session
from convsdg.llm_gateway import BackendDescriptor, GenerationParams


@pytest.fixture
def mock_backend():
    return BackendDescriptor(kind="mock")


@pytest.fixture
def params():
    return GenerationParams(seed=11)


@pytest.fixture
def whale_topic():
    return TopicDescription(
        topic_id="whales",
        title="Whales",
        description="whales are large marine mammals that migrate across oceans",
    )


@pytest.fixture
def tiny_collection():
    docs = [
        ("d1", "cats chase mice in the garden"),
        ("d2", "dogs chase cats across the yard"),
        ("d3", "whales swim in the deep ocean"),
        ("d4", "ocean currents move warm water"),
        ("d5", "mice hide from cats and dogs"),
    ]
    return PassageCollection([Passage(pid, text) for pid, text in docs])


@pytest.fixture
def two_turn_session(whale_topic):
    return make_session(
        "s1",
        whale_topic,
        [
            ("what are whales", "large marine mammals"),
            ("where do they migrate", "across entire oceans"),
        ],
    )


@pytest.fixture(scope="session")
def fixture_paths(tmp_path_factory):
    """The bundled synthetic corpus: 20 topics x 50 passages."""
    out = tmp_path_factory.mktemp("fixture")
    return synth.build_fixture(out, n_topics=20, passages_per_topic=50, seed=13)


@pytest.fixture(scope="session")
def small_fixture_paths(tmp_path_factory):
    """A reduced corpus for fast CLI round trips: 6 topics x 20 passages."""
    out = tmp_path_factory.mktemp("small_fixture")
    return synth.build_fixture(out, n_topics=6, passages_per_topic=20, seed=13)
