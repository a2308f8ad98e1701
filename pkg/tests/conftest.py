import numpy as np
import pytest
from hypothesis import settings

from oulab import build_model

settings.register_profile("oulab", max_examples=40, deadline=None)
settings.load_profile("oulab")

JORDAN_B = np.array([[-1.0, 1.0], [0.0, -1.0]])
JORDAN_Q_INF = np.array([[0.75, 0.25], [0.25, 0.5]])


@pytest.fixture(scope="session")
def jordan():
    return build_model(np.eye(2), JORDAN_B)


@pytest.fixture(scope="session")
def scalar():
    return build_model(np.eye(1), -np.eye(1))


@pytest.fixture(scope="session", params=[1, 2, 3])
def identity(request):
    n = request.param
    return build_model(np.eye(n), -np.eye(n))


def random_stable_model(rng, n):
    """A random stable drift and covariance; eigenvalues of B have real part <= -0.2."""
    A = rng.standard_normal((n, n))
    Q = A @ A.T + 0.5 * np.eye(n)
    M = rng.standard_normal((n, n))
    shift = np.max(np.linalg.eigvals(M).real) + 0.2 + rng.uniform(0, 1)
    return build_model(Q, M - shift * np.eye(n))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
