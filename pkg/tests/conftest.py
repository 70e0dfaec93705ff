import numpy as np
import pytest

from kbqa.corpus import Corpus, Query

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}

WORDS = ("printer network vpn password reset server backup disk outage latency cache deploy release "
         "rollback ticket laptop email quota license audit firewall").split()


def random_text(rng, n):
    return " ".join(rng.choice(WORDS, size=n))


@pytest.fixture
def small_corpus():
    rng = np.random.default_rng(7)
    return Corpus.from_texts([(f"d{i:02d}", random_text(rng, int(rng.integers(5, 30)))) for i in range(20)])


@pytest.fixture
def small_queries():
    rng = np.random.default_rng(11)
    return [Query(f"q{i}", random_text(rng, int(rng.integers(1, 5)))) for i in range(10)]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
