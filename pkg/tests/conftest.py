import pytest

from roostkit.detector import RingDetector
from roostkit.stylemodel import run_em
from roostkit.synth import AnnotatorSpec, SceneSpec, generate_corpus


@pytest.fixture(scope="session")
def basic_corpus():
    """Small clean corpus with one exact annotator, for module tests."""
    ann = [AnnotatorSpec("u0", 1.0, 0.0)]
    return generate_corpus(SceneSpec(seed=31), ann, 4, 6)


@pytest.fixture(scope="session")
def basic_detector(basic_corpus):
    det = RingDetector()
    return det.fit(basic_corpus.scans, basic_corpus.labels_by_scan())


@pytest.fixture(scope="session")
def em_corpus():
    """Styled 200-scan corpus with three planted annotator biases."""
    annotators = [
        AnnotatorSpec("u_small", 0.6, 1.0),
        AnnotatorSpec("u_exact", 1.0, 1.0),
        AnnotatorSpec("u_large", 1.5, 1.0),
    ]
    return generate_corpus(SceneSpec(seed=11), annotators, 25, 8)


@pytest.fixture(scope="session")
def em_result(em_corpus):
    det = RingDetector()
    det.warm_cache(em_corpus.scans)
    return run_em(det, em_corpus.scans, em_corpus.annotations, rounds=2)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    from util import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
