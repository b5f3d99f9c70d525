import numpy as np
import pytest

from sfda import bench


@pytest.fixture(scope="session")
def multi_suite():
    return bench.bench_suite("multi")


@pytest.fixture(scope="session")
def multi_source(multi_suite):
    return bench.train_source(multi_suite.source, 3000, hidden=(32, 32), epochs=40, seed=0, lr=0.1)


@pytest.fixture(scope="session")
def single_suite():
    return bench.bench_suite("single")


@pytest.fixture(scope="session")
def single_source(single_suite):
    return bench.train_source(single_suite.source, 2000, hidden=(32, 32), epochs=30, seed=0,
                              lr=0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion; echoed in the terminal summary."""
    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
