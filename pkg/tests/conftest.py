import numpy as np
import pytest

from mocha_stream.model import init_model, toy_config


@pytest.fixture(scope="session")
def toy():
    """A 64-bit toy model and its config (shared, read-only)."""
    config = toy_config(seed=0, precision="float64")
    return config, init_model(config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Append one ``PASS``/``FAIL`` line per acceptance criterion."""

    def record(name: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
