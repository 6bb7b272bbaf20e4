import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from uniret.corpus import Document, QueryRecord, chunk_corpus
from uniret.sparse import build_bm25_index
from uniret.synthetic import SyntheticConfig, generate

sys.path.insert(0, str(Path(__file__).parent / "oracles"))

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL_WORLD = SyntheticConfig(n_pages=24, passages_per_page=10, n_filler=80, topic_words=6, seed=3)


@pytest.fixture(scope="session")
def small_world():
    return generate(SMALL_WORLD)


@pytest.fixture(scope="session")
def small_passages(small_world):
    return small_world.passages


@pytest.fixture(scope="session")
def small_bm25(small_passages):
    return build_bm25_index(small_passages)


@pytest.fixture
def tiny_docs():
    return [
        Document("A", "Alpha", "the red fox lives in the forest . the fox eats berries"),
        Document("B", "Beta", "a blue whale swims in the ocean . whales sing"),
        Document("C", "Gamma", "the forest ranger counts red berries every spring"),
    ]


@pytest.fixture
def tiny_passages(tiny_docs):
    return chunk_corpus(tiny_docs, chunk_size=6)


def make_query(qid, text, gold_passages, dataset="ds", task_class="qa", answers=None, mapping_score=None):
    pages = {p.rsplit("::", 1)[0] for p in gold_passages}
    return QueryRecord(qid, dataset, task_class, text, frozenset(pages), frozenset(gold_passages), answers, mapping_score)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
