import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from occmotion.bodymodel import toy_body_model


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    # bit-reproducibility checks assume one BLAS thread
    with threadpool_limits(limits=1):
        yield


@pytest.fixture(scope="session")
def body():
    return toy_body_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record the one-line verdict of an acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
