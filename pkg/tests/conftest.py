import math

import numpy as np
import pytest

ACCEPTANCE_LINES = []


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        up = f(x)
        x[idx] = orig - h
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def brute_sc_terms(z, labels, tau):
    """Per-anchor SC loss written straight from the definition with python loops."""
    n = len(labels)
    out = []
    for j in range(n):
        others = [a for a in range(n) if a != j]
        pos = [p for p in others if labels[p] == labels[j]]
        if not pos:
            out.append(0.0)
            continue
        denom = sum(math.exp(float(np.dot(z[j], z[a])) / tau) for a in others)
        frac = sum(math.exp(float(np.dot(z[j], z[p])) / tau) / denom for p in pos) / len(pos)
        out.append(-math.log(frac))
    return out


def random_unit_rows(gen, n, g):
    m = gen.standard_normal((n, g))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
