import pytest

from d3mes.molgraph import bundled_corpus, strip_hydrogens


@pytest.fixture(scope="session")
def corpus():
    return bundled_corpus()


@pytest.fixture(scope="session")
def heavy_corpus(corpus):
    return [strip_hydrogens(m) for m in corpus]
