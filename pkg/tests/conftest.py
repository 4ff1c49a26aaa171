import numpy as np
import pytest

from sadcnn.dataset import ingest_corpus
from sadcnn.synthetic import write_corpus


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Six 48x48 synthetic color images."""
    d = tmp_path_factory.mktemp("corpus")
    write_corpus(d, 6, size=48, seed=7)
    return d


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    return ingest_corpus(corpus_dir)


@pytest.fixture(scope="session")
def test_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("testset")
    write_corpus(d, 3, size=40, seed=99, color=False)
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """Record the outcome line for one acceptance criterion.

    Call it with (number, passed, detail) once the measurements are in; the
    lines are printed together at the end of the run.
    """
    def record(number, passed, detail):
        _ACCEPTANCE[number] = f"acceptance {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
