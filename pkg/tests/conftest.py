import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from anchorgnn.graphs import GeneratorConfig, generate

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(n: int, ok: bool, detail: str) -> bool:
        lines.append((n, ok, detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = sorted(config.stash.get(_ACCEPTANCE, []))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in lines:
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def motif_splits():
    return generate(GeneratorConfig(num_graphs=80, size_range=(8, 16), seed=11))


@pytest.fixture(scope="session")
def node_splits():
    return generate(GeneratorConfig(task="node_classification", shift="covariate", num_nodes=120,
                                    feature_dim=3, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
