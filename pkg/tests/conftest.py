import numpy as np
import pytest

from scriptfuse import tensor as T


def numerical_grad(f, t: T.Tensor, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``t``."""
    g = np.zeros_like(t.data)
    for idx in np.ndindex(t.shape):
        old = t.data[idx]
        t.data[idx] = old + h
        up = f().item()
        t.data[idx] = old - h
        down = f().item()
        t.data[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, guarded for all-zero gradients."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def check_grads(f, tensors, h=1e-6):
    for t in tensors:
        t.grad = None
    f().backward()
    return max(rel_error(t.grad, numerical_grad(f, t, h)) for t in tensors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
