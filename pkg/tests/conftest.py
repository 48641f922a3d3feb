import numpy as np
import pytest

from fiplab.nn import Batch, init_mlp


def tiny_problem(seed, dims=(6, 5, 4, 3), n=8):
    """Small random model and batch with nonzero biases."""
    rng = np.random.default_rng(seed)
    model = init_mlp(list(dims), seed=seed)
    theta = model.theta + 0.1 * rng.normal(size=model.n_params)
    model = model.with_params(theta)
    x = rng.uniform(0.0, 1.0, size=(n, dims[0]))
    y = rng.integers(0, dims[-1], size=n)
    return model, Batch(x, y)


@pytest.fixture
def tiny():
    return tiny_problem(0)


def central_fd(f, theta, h=1e-6):
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        out[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return out


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(mod.RESULTS, key=lambda n: int(n[1:])):
        terminalreporter.write_line(mod.RESULTS[name])
