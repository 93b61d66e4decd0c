from contextlib import contextmanager

import numpy as np
import pytest

from waveformer import autodiff
from waveformer.autodiff import Tensor

KINK_MARGIN = 1e-3

# filled by the acceptance tests, printed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[1:s.index("]")])):
            terminalreporter.write_line(line)


def numerical_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Largest absolute deviation, relative to the larger of the two gradient scales."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def check_grads(build_loss, arrays, h: float = 1e-5) -> float:
    """Compare autodiff gradients of ``build_loss(*tensors)`` against finite differences.

    Returns the worst relative error across all inputs.
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    loss.backward()
    worst = 0.0
    for i, t in enumerate(tensors):

        def f(xi, i=i):
            args = [Tensor(np.array(a, dtype=np.float64)) for a in arrays]
            args[i] = Tensor(xi)
            return float(build_loss(*args).data)

        num = numerical_grad(f, arrays[i], h)
        worst = max(worst, max_rel_error(t.grad, num))
    return worst


def weighted_sum(out: Tensor, seed: int = 12345) -> Tensor:
    """Scalar ``sum(out * R)`` with fixed random R, to probe a full Jacobian-vector product."""
    r = np.random.default_rng(seed).normal(size=out.shape)
    return (out * Tensor(r)).sum()


@contextmanager
def relu_inputs():
    """Collect min |x| over every relu call made inside the block."""
    seen: list[float] = []
    original = autodiff.relu

    def spy(x):
        seen.append(float(np.abs(x.data).min()))
        return original(x)

    autodiff.relu = spy
    try:
        yield seen
    finally:
        autodiff.relu = original


def near_kink(build_loss, arrays, margin: float = KINK_MARGIN) -> bool:
    """True if some relu input lies within ``margin`` of 0, where finite differences straddle the kink."""
    with relu_inputs() as seen:
        build_loss(*[Tensor(np.array(a, dtype=np.float64)) for a in arrays])
    return bool(seen) and min(seen) < margin


def bind_parameters(module, names, tensors) -> None:
    """Point a module's parameter attributes (dotted names) at the given tensors."""
    for name, t in zip(names, tensors):
        obj = module
        *path, leaf = name.split(".")
        for part in path:
            obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
        setattr(obj, leaf, t)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
