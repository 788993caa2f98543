import numpy as np
import pytest

from hmdn.data import SyntheticConfig, generate_synthetic
from hmdn.embedding import Feature, FeatureSchema


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_schema():
    return FeatureSchema((
        Feature("domain", 3, 4, True, "domain"),
        Feature("user_type", 2, 3, True, "user_type"),
        Feature("item", 10, 5),
        Feature("ctx", 6, 2),
    ))


@pytest.fixture(scope="session")
def tiny_data():
    cfg = SyntheticConfig(n_examples=1200, test_size=400, nondist_cardinalities=[12, 12], embedding_dim=4)
    return generate_synthetic(cfg)



_ACCEPTANCE = []


@pytest.fixture
def criterion(capsys):
    """Record (and echo) one PASS/FAIL line for an acceptance criterion."""

    def record(label, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {label}: {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
