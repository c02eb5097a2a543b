import numpy as np
import pytest

from hlstm import kernels
from hlstm.numcore import backward


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    previous = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


def rel_error(a, n, floor=1e-4):
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(a), np.asarray(n)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_gradients(build, params, eps=1e-5, names=None):
    """Compare tape gradients with central differences.

    ``build(tape, params)`` must create leaves named after ``params`` keys
    and return a scalar loss node. Returns the worst relative error.
    """
    from hlstm.numcore import Tape

    tape = Tape()
    analytic = backward(tape, build(tape, params))
    worst = 0.0
    for name in names or params:
        w = params[name]
        numeric = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + eps
            up = float(build(Tape(), params).value)
            w[idx] = old - eps
            down = float(build(Tape(), params).value)
            w[idx] = old
            numeric[idx] = (up - down) / (2 * eps)
        worst = max(worst, rel_error(analytic[name], numeric))
    return worst


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
