import numpy as np
import pytest

from lowbit import tensor as T


def finite_difference_grad(fn, arrays, h=1e-3):
    """Central finite differences of a scalar function of numpy arrays.

    ``fn`` maps a list of float64 arrays to a float; returns one gradient
    array per input.  Callers run the function on a double-precision shadow
    path (see ``lowbit.tensor.precision``) so the step dominates rounding.
    """
    grads = []
    for idx, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.ravel()
        base_flat = base.ravel()
        for i in range(base_flat.size):
            orig = base_flat[i]
            base_flat[i] = orig + h
            up = fn(arrays)
            base_flat[i] = orig - h
            down = fn(arrays)
            base_flat[i] = orig
            flat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return np.abs(a - b).max(initial=0.0) / denom


@pytest.fixture
def f64_graph():
    """Run the enclosed graph construction in float64 (shadow path)."""
    with T.precision(np.float64):
        yield
