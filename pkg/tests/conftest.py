import numpy as np
import pytest

from pointpst import gradcore as gc


def numeric_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def analytic_grad(build, x: np.ndarray) -> np.ndarray:
    """Gradient of the scalar tensor returned by ``build(Tensor)`` w.r.t. its input."""
    t = gc.Tensor(x, requires_grad=True)
    with gc.Tape() as tape:
        out = gc.sum(build(t))
        tape.backward(out)
    return t.grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def check_grad(build, x, tol=1e-4):
    num = numeric_grad(lambda v: float(build(gc.Tensor(v)).data.sum()), x)
    ana = analytic_grad(build, x)
    assert rel_err(ana, num) < tol, (ana, num)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
