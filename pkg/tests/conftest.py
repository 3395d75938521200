import numpy as np
import pytest

from splitpriv import nn
from splitpriv.rng import RngStream

SMALL_CNN = [
    {"kind": "conv-2d-small", "out": 3},
    {"kind": "relu"},
    {"kind": "max-pool"},
    {"kind": "dense", "out": 8},
    {"kind": "relu"},
    {"kind": "dense", "out": 4},
]
MLP = [{"kind": "dense", "out": 8}, {"kind": "relu"}, {"kind": "dense", "out": 3}]


@pytest.fixture
def cnn():
    return nn.build_model(SMALL_CNN, (1, 8, 8), RngStream(0))


@pytest.fixture
def mlp():
    return nn.build_model(MLP, (5,), RngStream(0))


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


ACCEPTANCE = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    """Record and print one PASS/FAIL line for acceptance criterion ``n``, then assert it."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
