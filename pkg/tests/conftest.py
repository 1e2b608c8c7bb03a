import numpy as np
import pytest

from grokmuon.tensor import make_rng


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: takes minutes (CI-scale training runs)")
    config.addinivalue_line("markers", "full: full-scale reproduction (about 30 min); opt in with GROKMUON_FULL=1")


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(20240601)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance(request):
    """Collects one (criterion, verdict, detail) line per acceptance check."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(criterion: str, ok, detail: str) -> None:
        verdict = {True: "PASS", False: "FAIL"}.get(ok, ok)
        lines.append(f"[{verdict}] {criterion}: {detail}")

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
