"""Integer-domain matrix multiply for quantized operands, plus bit packing.

For U quantized per row and V per column with integer zero points, the
dequantized product decomposes into pure integer terms:

    (Q_U - z_U (x) 1)(Q_V - 1 (x) z_V)
        = Q_U Q_V - z_U (x) (1^T Q_V) - (Q_U 1) (x) z_V + k * z_U (x) z_V

(using the identity (z (x) 1) Q = z (x) (1^T Q) for the cross terms), after
which each output element is rescaled by 1 / (s_U[i] * s_V[j]).

Accumulation uses 32-bit signed integers; with b <= 4 bits every term is
bounded by (2^b - 1)^2 * k, so inputs with k <= 2^20 provably cannot
overflow.  The bound is checked, not silently widened.

Packing layout (row-major element order):
  - 4-bit: two codes per byte, even index in the low nibble;
  - 3-bit: code i occupies bits [3i, 3i+3) of a little-endian bitstream.
The final partial byte, if any, is zero-padded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputError
from .quant import QuantizedTensor

ACC_BITS = 32
MAX_K = 1 << 20


@dataclass
class PackedIntMatrix:
    data: np.ndarray   # uint8 byte stream
    bits: int
    rows: int
    cols: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)


def pack(codes: np.ndarray, bits: int) -> PackedIntMatrix:
    """Pack a 2-D integer code matrix into the byte layout above."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise InputError("pack expects a 2-D code matrix")
    if bits not in (3, 4):
        raise InputError(f"pack supports 3- and 4-bit codes, got {bits}")
    hi = (1 << bits) - 1
    if codes.size and (codes.min() < 0 or codes.max() > hi):
        raise InputError(f"codes out of range [0, {hi}]")
    rows, cols = codes.shape
    flat = codes.astype(np.uint8).ravel()
    if bits == 4:
        if flat.size % 2:
            flat = np.concatenate([flat, np.zeros(1, dtype=np.uint8)])
        packed = flat[0::2] | (flat[1::2] << 4)
    else:
        bit_lanes = ((flat[:, None] >> np.arange(3, dtype=np.uint8)) & 1).astype(np.uint8)
        packed = np.packbits(bit_lanes.ravel(), bitorder="little")
    return PackedIntMatrix(packed, bits, rows, cols)


def unpack(p: PackedIntMatrix) -> np.ndarray:
    """Recover the int32 code matrix from a packed byte stream."""
    n = p.rows * p.cols
    if p.bits == 4:
        low = p.data & 0x0F
        high = p.data >> 4
        flat = np.empty(p.data.size * 2, dtype=np.int32)
        flat[0::2] = low
        flat[1::2] = high
        flat = flat[:n]
    elif p.bits == 3:
        bits = np.unpackbits(p.data, bitorder="little", count=n * 3)
        flat = bits.reshape(-1, 3).astype(np.int32) @ np.array([1, 2, 4], dtype=np.int32)
    else:
        raise InputError(f"unsupported packed bit width {p.bits}")
    return flat.reshape(p.rows, p.cols)


def _check_shapes(qu: QuantizedTensor, qv: QuantizedTensor):
    if qu.codes.ndim != 2 or qv.codes.ndim != 2:
        raise ContractError("intmm operands must be 2-D")
    if qu.codes.shape[1] != qv.codes.shape[0]:
        raise ContractError(
            f"inner dimensions disagree: {qu.codes.shape} x {qv.codes.shape}"
        )
    if qu.axis not in (None, 0):
        raise ContractError("left operand must be quantized per row (or per tensor)")
    if qv.axis not in (None, 1):
        raise ContractError("right operand must be quantized per column (or per tensor)")


def _check_overflow(qu, qv, z_u: np.ndarray, z_v: np.ndarray):
    """Worst-case magnitude of any intermediate of the four-term combination,
    from the actual code and zero-point ranges."""
    k = qu.codes.shape[1]
    if k > MAX_K:
        raise InputError(f"inner dimension {k} exceeds the documented bound {MAX_K}")
    cu = (1 << qu.bits) - 1
    cv = (1 << qv.bits) - 1
    zu = int(np.abs(z_u).max(initial=0))
    zv = int(np.abs(z_v).max(initial=0))
    worst = k * (cu * cv + zu * cv + cu * zv + zu * zv)
    if worst >= (1 << (ACC_BITS - 1)):
        raise InputError(
            f"operands may overflow {ACC_BITS}-bit accumulation (bound {worst})"
        )


def _per_axis(q: QuantizedTensor, n: int):
    """Expand scalar scale/zero-point to the operand's quantization axis."""
    s = np.asarray(q.scales, dtype=np.float64)
    z = np.asarray(q.zero_points, dtype=np.int64)
    if s.ndim == 0:
        s = np.full(n, float(s))
        z = np.full(n, int(z), dtype=np.int64)
    return s, z


def intmm(qu: QuantizedTensor, qv: QuantizedTensor) -> np.ndarray:
    """Integer product of a row-quantized left and column-quantized right
    operand, rescaled to the real domain (float32)."""
    _check_shapes(qu, qv)
    n, k = qu.codes.shape
    m = qv.codes.shape[1]
    s_u, z_u = _per_axis(qu, n)
    s_v, z_v = _per_axis(qv, m)
    _check_overflow(qu, qv, z_u, z_v)

    q_u = qu.codes.astype(np.int32)
    q_v = qv.codes.astype(np.int32)
    z_u32 = z_u.astype(np.int32)
    z_v32 = z_v.astype(np.int32)

    prod = q_u @ q_v                                  # Q_U Q_V
    col_sums = q_v.sum(axis=0, dtype=np.int32)        # 1^T Q_V
    row_sums = q_u.sum(axis=1, dtype=np.int32)        # Q_U 1
    acc = (prod
           - np.outer(z_u32, col_sums)
           - np.outer(row_sums, z_v32)
           + np.int32(k) * np.outer(z_u32, z_v32))
    return (acc.astype(np.float64) / np.outer(s_u, s_v)).astype(np.float32)
