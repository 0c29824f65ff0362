"""Uniform quantization and dequantization primitives.

A quantizer maps reals to integer codes in [0, 2^b - 1] between clip values
(c-, c+) via

    codes = clamp_int(round(s * clamp(a, c-, c+) + z), 0, 2^b - 1)
    s     = (2^b - 1) / (c+ - c-)
    z     = -round(s * c-)   when align_zero, else 0

and back via a_hat = (codes - z) / s.  Rounding is half-to-even throughout.
Codes are clamped after rounding because zero-point rounding can push a
boundary code one step out of range.

The sign of z above reproduces the stated codomain; ``paper_zero_sign``
selects z = +round(s * c-) instead, for A/B comparisons only (codes are then
clamped the same way, but the affine identity no longer maps clips onto the
code range).

Granularity is per-tensor, per-row (axis 0) or per-column (axis 1).  Codes
are stored one per element here regardless of bit width; bit packing is the
integer-GEMM layer's concern.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InputError, SpecError

GRANULARITIES = ("tensor", "row", "column")

# symmetric widening applied to constant calibration slices
DEGENERATE_DELTA = 1e-6


@dataclass(frozen=True)
class QuantSpec:
    """Bit width, clip pair(s) and derived affine parameters.

    ``clip_lo``/``clip_hi`` are scalars for tensor granularity and 1-D
    vectors (one pair per slice) for row/column granularity.
    """

    bits: int
    clip_lo: np.ndarray
    clip_hi: np.ndarray
    align_zero: bool = True
    granularity: str = "tensor"
    paper_zero_sign: bool = False

    def __post_init__(self):
        # 2..8 is the storage range; widths up to 16 are accepted so the
        # fake quantizer can run in its high-bitwidth limit
        if not (2 <= int(self.bits) <= 16):
            raise SpecError(f"bits must be in [2, 16], got {self.bits}")
        lo = np.asarray(self.clip_lo, dtype=np.float64)
        hi = np.asarray(self.clip_hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim > 1:
            raise SpecError("clip_lo/clip_hi must be scalars or equal-length vectors")
        if self.granularity not in GRANULARITIES:
            raise SpecError(f"granularity must be one of {GRANULARITIES}")
        if self.granularity == "tensor" and lo.ndim != 0:
            raise SpecError("tensor granularity takes scalar clips")
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise SpecError("clip values must be finite")
        if not (lo < hi).all():
            raise SpecError("clip_lo must be strictly below clip_hi")
        object.__setattr__(self, "clip_lo", lo)
        object.__setattr__(self, "clip_hi", hi)

    @property
    def n_levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def scale(self) -> np.ndarray:
        return self.n_levels / (self.clip_hi - self.clip_lo)

    @property
    def zero_point(self) -> np.ndarray:
        if not self.align_zero:
            return np.zeros_like(self.clip_lo, dtype=np.int64)
        z = np.rint(self.scale * self.clip_lo)
        if not self.paper_zero_sign:
            z = -z
        return z.astype(np.int64)


@dataclass
class QuantizedTensor:
    """Integer codes plus per-slice scale/zero-point vectors."""

    codes: np.ndarray          # int32, values in [0, 2^bits - 1]
    bits: int
    scales: np.ndarray         # float64, scalar or per-slice vector
    zero_points: np.ndarray    # int64, same shape as scales
    axis: Optional[int] = None  # None = tensor, 0 = per row, 1 = per column

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int32)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.zero_points = np.asarray(self.zero_points, dtype=np.int64)
        hi = (1 << self.bits) - 1
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() > hi):
            raise InputError(f"codes out of range [0, {hi}]")
        if (self.scales <= 0).any() or not np.isfinite(self.scales).all():
            raise SpecError("scales must be positive and finite")

    @property
    def shape(self):
        return self.codes.shape


def _broadcast_slices(arr2d_shape, vec: np.ndarray, granularity: str) -> np.ndarray:
    """Reshape a per-slice vector so it broadcasts against the data array."""
    if granularity == "tensor":
        return vec
    n_rows, n_cols = arr2d_shape if len(arr2d_shape) == 2 else (arr2d_shape[0], 1)
    if granularity == "row":
        if vec.shape != (n_rows,):
            raise SpecError(f"row granularity needs {n_rows} clip pairs, got {vec.shape}")
        return vec.reshape(-1, 1)
    if vec.shape != (n_cols,):
        raise SpecError(f"column granularity needs {n_cols} clip pairs, got {vec.shape}")
    return vec.reshape(1, -1)


def quantize(a: np.ndarray, spec: QuantSpec) -> QuantizedTensor:
    """Map reals to integer codes per ``spec``."""
    a = np.asarray(a, dtype=np.float64)
    if not np.isfinite(a).all():
        raise InputError("quantize input must be finite")
    if spec.granularity != "tensor" and a.ndim != 2:
        raise InputError("row/column granularity requires a 2-D input")
    lo = _broadcast_slices(a.shape, spec.clip_lo, spec.granularity)
    hi = _broadcast_slices(a.shape, spec.clip_hi, spec.granularity)
    s = _broadcast_slices(a.shape, np.asarray(spec.scale, dtype=np.float64), spec.granularity)
    z = _broadcast_slices(a.shape, spec.zero_point.astype(np.float64), spec.granularity)
    q = np.rint(s * np.clip(a, lo, hi) + z)
    codes = np.clip(q, 0, spec.n_levels).astype(np.int32)
    axis = {"tensor": None, "row": 0, "column": 1}[spec.granularity]
    return QuantizedTensor(codes, spec.bits, np.asarray(spec.scale),
                           spec.zero_point, axis)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Invert the affine map: (codes - z) / s.

    Returns float64 so the code grid survives exactly; callers that store
    single precision cast at their own boundary.
    """
    s = q.scales
    z = q.zero_points.astype(np.float64)
    if q.axis == 0:
        s, z = s.reshape(-1, 1), z.reshape(-1, 1)
    elif q.axis == 1:
        s, z = s.reshape(1, -1), z.reshape(1, -1)
    return (q.codes.astype(np.float64) - z) / s


def minmax_calibrate(a: np.ndarray, bits: int, granularity: str = "tensor",
                     align_zero: bool = True) -> QuantSpec:
    """Data-driven clip selection: c- = min(slice), c+ = max(slice).

    Constant slices are widened symmetrically by 1e-6 * max(1, |v|) so the
    scale stays finite.  Slices must contain at least one finite value.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise InputError("cannot calibrate an empty tensor")
    if granularity not in GRANULARITIES:
        raise SpecError(f"granularity must be one of {GRANULARITIES}")
    if granularity == "tensor":
        flat = a.reshape(1, -1)
    elif granularity == "row":
        if a.ndim != 2:
            raise InputError("row granularity requires a 2-D input")
        flat = a
    else:
        if a.ndim != 2:
            raise InputError("column granularity requires a 2-D input")
        flat = a.T
    finite = np.isfinite(flat)
    if not finite.any(axis=1).all():
        raise InputError("every slice must contain at least one finite value")
    lo = np.where(finite, flat, np.inf).min(axis=1)
    hi = np.where(finite, flat, -np.inf).max(axis=1)
    degenerate = lo == hi
    if degenerate.any():
        delta = DEGENERATE_DELTA * np.maximum(1.0, np.abs(lo))
        lo = np.where(degenerate, lo - delta, lo)
        hi = np.where(degenerate, hi + delta, hi)
    if granularity == "tensor":
        lo, hi = lo[0], hi[0]
    return QuantSpec(bits, lo, hi, align_zero=align_zero, granularity=granularity)
