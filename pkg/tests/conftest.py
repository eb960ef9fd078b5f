import pytest

from relsearch import pipeline


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small seeded corpus shared by tests that just need realistic stores."""
    return pipeline.generate_synthetic(seed=11, n_queries=60, n_pins=300, vocab_size=600)


@pytest.fixture(scope="session")
def tiny_stores(tiny_corpus):
    return tiny_corpus.queries_by_id(), tiny_corpus.pins_by_id()
