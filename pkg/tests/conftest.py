"""Dense reference implementations used as independent oracles."""
import numpy as np
import pytest

ACCEPTANCE_LINES = []


def dense_A(n):
    a = np.zeros((n, n))
    for i in range(n):
        a[i, i] = 2 * n * n
        a[i, (i + 1) % n] -= n * n
        a[i, (i - 1) % n] -= n * n
    return a


def dense_J(n):
    j = np.zeros((n, n))
    for i in range(n):
        j[i, (i + 1) % n] += n / 2
        j[i, (i - 1) % n] -= n / 2
    return j


def dense_D(n):
    d = np.zeros((n, n))
    for i in range(n):
        d[i, i] = n
        d[i, (i + 1) % n] = -n
    return d


def dense_P(n, m):
    k = n // m
    p = np.zeros((m, n))
    for b in range(m):
        p[b, b * k:(b + 1) * k] = 1.0 / k
    return p


def dense_lift(n, m):
    return np.repeat(np.eye(m), n // m, axis=0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
