"""Learned-clip fake quantization with straight-through gradients.

The forward pass quantizes and immediately dequantizes an activation tensor
against one learnable clip pair (c-, c+) per site, so training sees exactly
the values inference will see.  The backward pass passes gradients straight
through inside the clip range and routes them to the clip values outside it;
in-range elements additionally contribute a rounding-error term

    E = (Q - round(Q)) / (2^b - 1),   Q = s * (A - c-)

to both clip gradients (-E to c+, sign_in_range * E to c-; the default
sign_in_range = -1 keeps both terms negative, and +1 selects the variant the
LSQ-style derivation gives for c-).

Clip gradients are reduced with exact (compensated) summation, so the result
is independent of element order and any naive per-element reference sums to
the identical scalar bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .quant import QuantSpec, dequantize, quantize

# minimum clip gap enforced by the optimizer projection
CLIP_GAP_MIN = 1e-3


@dataclass
class ClipParam:
    """Learnable clip pair for one activation site.

    ``bounded_input`` marks sites whose input is known nonnegative: c- is
    frozen at 0 and its gradient is discarded.
    """

    clip_lo: float
    clip_hi: float
    bits: int = 4
    align_zero: bool = True
    bounded_input: bool = False
    sign_in_range: float = -1.0
    grad_lo: float = field(default=0.0, repr=False)
    grad_hi: float = field(default=0.0, repr=False)

    def __post_init__(self):
        self.clip_lo = float(self.clip_lo)
        self.clip_hi = float(self.clip_hi)
        if self.bounded_input:
            if self.clip_lo != 0.0:
                raise ParameterError("bounded_input requires clip_lo == 0")
        self._validate()

    def _validate(self):
        if not (self.clip_lo < self.clip_hi):
            raise ParameterError(
                f"clip_lo must stay below clip_hi, got ({self.clip_lo}, {self.clip_hi})"
            )

    def spec(self) -> QuantSpec:
        return QuantSpec(self.bits, self.clip_lo, self.clip_hi,
                         align_zero=self.align_zero)

    def zero_grads(self):
        self.grad_lo = 0.0
        self.grad_hi = 0.0


def fakequant_forward(a: np.ndarray, p: ClipParam) -> np.ndarray:
    """Quantize-then-dequantize ``a`` against the clip pair (per tensor)."""
    p._validate()
    return dequantize(quantize(np.asarray(a, dtype=np.float64), p.spec()))


def _exact_sum(values64: np.ndarray) -> float:
    return math.fsum(values64.ravel().tolist())


def fakequant_backward(a: np.ndarray, p: ClipParam,
                       grad_out: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Straight-through gradients for the activation and both clips.

    Returns (grad_a, grad_hi, grad_lo).  Branches partition the elements:
    above c+ the activation gradient is blocked and flows to c+; below c-
    it flows to c- (this mirrors the c+ structure; the in-range term keeps
    its printed sign via ``sign_in_range``); in range it passes through and
    both clips receive the rounding-error term.
    """
    a64 = np.asarray(a, dtype=np.float64)
    g64 = np.asarray(grad_out, dtype=np.float64)
    if a64.shape != g64.shape:
        raise ParameterError("grad_out shape must match input shape")
    levels = float((1 << p.bits) - 1)
    s = levels / (p.clip_hi - p.clip_lo)
    q = s * (a64 - p.clip_lo)
    e = (q - np.rint(q)) / levels
    above = a64 > p.clip_hi
    below = a64 < p.clip_lo
    in_range = ~(above | below)

    grad_a = np.where(in_range, grad_out, 0).astype(np.asarray(grad_out).dtype)
    c_hi = np.where(above, g64, np.where(in_range, -e * g64, 0.0))
    c_lo = np.where(below, g64, np.where(in_range, p.sign_in_range * e * g64, 0.0))
    grad_hi = _exact_sum(c_hi)
    grad_lo = 0.0 if p.bounded_input else _exact_sum(c_lo)
    return grad_a, grad_hi, grad_lo


def fakequant(x: "T.Tensor", p: ClipParam) -> "T.Tensor":
    """Autodiff node wrapping the forward/backward pair; clip gradients
    accumulate into the ClipParam."""
    out_data = fakequant_forward(x.data, p)

    def bwd(g):
        grad_a, grad_hi, grad_lo = fakequant_backward(x.data, p, g)
        p.grad_hi += grad_hi
        if not p.bounded_input:
            p.grad_lo += grad_lo
        return (grad_a,)

    return T._make(out_data, (x,), bwd)


def clip_optimizer_step(p: ClipParam, lr: float):
    """One plain SGD step on the clip pair (no momentum, no weight decay),
    projected so the gap never collapses below CLIP_GAP_MIN."""
    new_hi = p.clip_hi - lr * p.grad_hi
    if p.bounded_input:
        p.clip_hi = max(new_hi, CLIP_GAP_MIN)
    else:
        new_lo = p.clip_lo - lr * p.grad_lo
        if new_hi - new_lo < CLIP_GAP_MIN:
            center = 0.5 * (new_hi + new_lo)
            new_hi = center + 0.5 * CLIP_GAP_MIN
            new_lo = center - 0.5 * CLIP_GAP_MIN
        p.clip_hi = new_hi
        p.clip_lo = new_lo
    p.zero_grads()
