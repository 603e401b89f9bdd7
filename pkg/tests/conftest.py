import io
from pathlib import Path

import pytest

from conceptrec.embedding import MockEmbedder
from conceptrec.ontology import load_obo, parse_obo

DATA_DIR = Path(__file__).parent / "data"


def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    print(f"\n[acceptance] {outcome} {name}")

CHAIN_OBO = """\
[Term]
id: X:A
name: alpha finding

[Term]
id: X:B
name: beta finding
is_a: X:A

[Term]
id: X:C
name: gamma finding
is_a: X:B

[Term]
id: X:D
name: delta finding
is_a: X:A
"""


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def mini_ontology():
    return load_obo(DATA_DIR / "mini.obo")


@pytest.fixture(scope="session")
def fixture_ontology():
    return load_obo(DATA_DIR / "fixture_onto.obo")


@pytest.fixture()
def chain_ontology():
    return parse_obo(io.StringIO(CHAIN_OBO))


@pytest.fixture()
def mock_embedder():
    return MockEmbedder(dimension=64, seed=11)


class CountingEmbedder(MockEmbedder):
    """Mock embedder that counts backend (uncached) embedding calls."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.backend_calls = 0

    def _embed_uncached(self, texts):
        self.backend_calls += 1
        return super()._embed_uncached(texts)


@pytest.fixture()
def counting_embedder():
    return CountingEmbedder(dimension=64, seed=11)
