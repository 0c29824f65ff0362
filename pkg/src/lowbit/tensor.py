"""Dense-tensor reverse-mode autodiff substrate.

Tensors store row-major float arrays (single precision by default) and an
optional gradient buffer of the same shape.  Operations build a tape of
nodes whose backward closures map the output gradient to input gradients;
``backward`` walks the tape once in reverse topological order.

Numerical conventions:
  - matmul and reductions accumulate in float64 internally, results are
    stored in the active precision (float32 by default);
  - the ``precision`` context switches the whole graph to float64, which is
    what gradient checks against central finite differences run under;
  - graphs are built and traversed single-threaded, so gradient
    accumulation order is fixed and runs are bit-reproducible.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, InputError

_ACTIVE_DTYPE = np.float32

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def active_dtype():
    return _ACTIVE_DTYPE


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype newly created tensors are stored in."""
    global _ACTIVE_DTYPE
    prev = _ACTIVE_DTYPE
    _ACTIVE_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _ACTIVE_DTYPE = prev


class TapeNode:
    """One recorded operation: parent tensors plus a backward closure.

    ``backward_fn`` receives the gradient w.r.t. the node's output and
    returns one gradient array (or None) per input, in order.
    """

    __slots__ = ("inputs", "backward_fn")

    def __init__(self, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_ACTIVE_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: TapeNode | None = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _wants_grad(t: Tensor) -> bool:
    return t.requires_grad or t._tape is not None


def _make(data64: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(np.asarray(data64).astype(_ACTIVE_DTYPE, copy=False))
    if any(_wants_grad(t) for t in inputs):
        out.requires_grad = True
        out._tape = TapeNode(inputs, backward_fn)
    return out


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


def _cast_grad(g: np.ndarray) -> np.ndarray:
    return np.asarray(g).astype(_ACTIVE_DTYPE, copy=False)


# ---------------------------------------------------------------------------
# topological backward
# ---------------------------------------------------------------------------

def backward(root: Tensor):
    """Populate .grad on every reachable tensor that wants a gradient."""
    if root.data.size != 1:
        raise DimensionError("backward requires a scalar root")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._tape is not None:
            for parent in node._tape.inputs:
                if id(parent) not in visited and _wants_grad(parent):
                    stack.append((parent, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        tape = node._tape
        if tape is None or node.grad is None:
            continue
        grads = tape.backward_fn(node.grad)
        for parent, g in zip(tape.inputs, grads):
            if g is None or not _wants_grad(parent):
                continue
            g = _cast_grad(g)
            if g.shape != parent.data.shape:
                raise DimensionError(
                    f"gradient shape {g.shape} != tensor shape {parent.data.shape}"
                )
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}"
        )
    a64, b64 = _f64(a), _f64(b)
    out = a64 @ b64

    def bwd(g):
        g64 = g.astype(np.float64, copy=False)
        return g64 @ b64.T, a64.T @ g64

    return _make(out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also supports adding a 1-D bias row to a 2-D tensor."""
    if a.data.shape == b.data.shape:
        def bwd(g):
            return g, g
        return _make(_f64(a) + _f64(b), (a, b), bwd)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        def bwd(g):
            return g, g.astype(np.float64, copy=False).sum(axis=0)
        return _make(_f64(a) + _f64(b)[None, :], (a, b), bwd)
    raise DimensionError(f"add shapes incompatible: {a.data.shape} + {b.data.shape}")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g.astype(np.float64, copy=False) * c,)

    return _make(_f64(a) * c, (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    def bwd(g):
        return (g.T.copy(),)

    return _make(_f64(a).T.copy(), (a,), bwd)


def slice_rows(a: Tensor, r0: int, r1: int) -> Tensor:
    def bwd(g):
        full = np.zeros(a.data.shape, dtype=np.float64)
        full[r0:r1, :] = g
        return (full,)

    return _make(_f64(a)[r0:r1, :].copy(), (a,), bwd)


def slice_cols(a: Tensor, c0: int, c1: int) -> Tensor:
    def bwd(g):
        full = np.zeros(a.data.shape, dtype=np.float64)
        full[:, c0:c1] = g
        return (full,)

    return _make(_f64(a)[:, c0:c1].copy(), (a,), bwd)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offsets[i]:offsets[i + 1], :] for i in range(len(parts)))

    return _make(np.concatenate([_f64(p) for p in parts], axis=0), parts, bwd)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    sizes = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([_f64(p) for p in parts], axis=1), parts, bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise DimensionError("embedding ids must be 1-D")
    n_rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise InputError(f"embedding id out of range [0, {n_rows})")
    out = _f64(table)[ids, :]

    def bwd(g):
        full = np.zeros(table.data.shape, dtype=np.float64)
        np.add.at(full, ids, g.astype(np.float64, copy=False))
        return (full,)

    return _make(out, (table,), bwd)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with affine output.

    Uses the population (1/d) variance and an eps inside the square root, so
    constant rows normalize to zero rather than dividing by zero.
    """
    if x.data.ndim != 2:
        raise DimensionError("layernorm expects a 2-D input")
    d = x.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError("layernorm gain/bias must have shape (d,)")
    x64 = _f64(x)
    mu = x64.mean(axis=1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    g64, b64 = _f64(gain), _f64(bias)
    out = y * g64[None, :] + b64[None, :]

    def bwd(g):
        go = g.astype(np.float64, copy=False)
        gy = go * g64[None, :]
        dgain = (go * y).sum(axis=0)
        dbias = go.sum(axis=0)
        dx = (gy - gy.mean(axis=1, keepdims=True)
              - y * (gy * y).mean(axis=1, keepdims=True)) * inv
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), bwd)


def softmax_masked(scores: Tensor, causal: bool = True) -> Tensor:
    """Row softmax over a square score matrix; with ``causal`` the upper
    triangle (future positions) is masked to exactly zero probability."""
    s = scores.data
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError("softmax_masked expects a square score matrix")
    s64 = _f64(scores)
    if causal:
        mask = np.triu(np.ones(s.shape, dtype=bool), k=1)
        s64 = np.where(mask, -np.inf, s64)
    m = s64.max(axis=1, keepdims=True)
    e = np.exp(s64 - m)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        go = g.astype(np.float64, copy=False)
        dot = (go * p).sum(axis=1, keepdims=True)
        ds = (go - dot) * p
        return (ds,)

    return _make(p, (scores,), bwd)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x64 = _f64(x)
    x2 = x64 * x64
    inner = GELU_C * (x64 + GELU_A * x2 * x64)
    t = np.tanh(inner)
    out = 0.5 * x64 * (1.0 + t)

    def bwd(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * x2)
        dt = (1.0 - t * t) * dinner
        dx = 0.5 * (1.0 + t) + 0.5 * x64 * dt
        return (g.astype(np.float64, copy=False) * dx,)

    return _make(out, (x,), bwd)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_seqs: int,
                     n_heads: int, scale_factor: float = 1.0) -> Tensor:
    """Batched multi-head causal attention over stacked sequences.

    q, k, v are (n_seqs * L, d) with heads laid out as contiguous column
    groups; rows are grouped per sequence.  Numerically identical to running
    softmax_masked(q_h k_h^T * scale) v_h per sequence and head, fused into
    one node to keep the tape small.
    """
    n_rows, d = q.data.shape
    if k.data.shape != (n_rows, d) or v.data.shape != (n_rows, d):
        raise DimensionError("q, k, v must share one (rows, d) shape")
    if n_rows % n_seqs or d % n_heads:
        raise DimensionError("rows must split into sequences, columns into heads")
    L = n_rows // n_seqs
    dh = d // n_heads

    def split(t64):
        # (B*L, H*dh) -> (B, H, L, dh)
        return t64.reshape(n_seqs, L, n_heads, dh).transpose(0, 2, 1, 3)

    def merge(t4):
        return t4.transpose(0, 2, 1, 3).reshape(n_rows, d)

    q4, k4, v4 = split(_f64(q)), split(_f64(k)), split(_f64(v))
    scores = (q4 @ k4.swapaxes(-1, -2)) * scale_factor
    mask = np.triu(np.ones((L, L), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = merge(p @ v4)

    def bwd(g):
        g4 = split(g.astype(np.float64, copy=False))
        dv = p.swapaxes(-1, -2) @ g4
        dp = g4 @ v4.swapaxes(-1, -2)
        ds = (dp - (dp * p).sum(axis=-1, keepdims=True)) * p * scale_factor
        dq = ds @ k4
        dk = ds.swapaxes(-1, -2) @ q4
        return merge(dq), merge(dk), merge(dv)

    return _make(out, (q, k, v), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood (nats) of ``targets`` under row softmax."""
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise DimensionError("cross_entropy expects 2-D logits")
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise DimensionError(f"targets must have shape ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise InputError(f"target id out of range [0, {v})")
    z = _f64(logits)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    sum_e = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(sum_e[:, 0])
    nll = lse - z[np.arange(n), targets]
    out = nll.mean()

    def bwd(g):
        p = e / sum_e
        p[np.arange(n), targets] -= 1.0
        return (p * (float(g) / n),)

    return _make(out, (logits,), bwd)


def mean_rows_sq(x: Tensor) -> Tensor:
    """Mean of squared entries; handy scalar head for gradient checks."""
    x64 = _f64(x)
    out = (x64 * x64).mean()

    def bwd(g):
        return (x64 * (2.0 * float(g) / x64.size),)

    return _make(out, (x,), bwd)
