import math

import numpy as np
import pytest

from lowbit import tensor as T
from lowbit.errors import ParameterError
from lowbit.fakequant import (
    CLIP_GAP_MIN,
    ClipParam,
    clip_optimizer_step,
    fakequant,
    fakequant_backward,
    fakequant_forward,
)
from lowbit.quant import QuantSpec, dequantize, quantize


def naive_backward(a, p, grad_out):
    """Element-by-element reference for the straight-through backward pass.

    Pure Python scalar arithmetic (IEEE double, like the vectorized float64
    path); the scalar clip gradients use exact summation, so they are
    order-independent and must match the production reduction bit for bit.
    """
    levels = float((1 << p.bits) - 1)
    s = levels / (p.clip_hi - p.clip_lo)
    grad_a = np.zeros_like(np.asarray(grad_out))
    c_hi, c_lo = [], []
    rows, cols = a.shape
    for i in range(rows):
        for j in range(cols):
            av = float(a[i, j])
            gv = float(grad_out[i, j])
            q = s * (av - p.clip_lo)
            # round-half-even on a python float
            e = (q - float(np.rint(q))) / levels
            if av > p.clip_hi:
                c_hi.append(gv)
                c_lo.append(0.0)
            elif av < p.clip_lo:
                c_hi.append(0.0)
                c_lo.append(gv)
            else:
                grad_a[i, j] = grad_out[i, j]
                c_hi.append(-e * gv)
                c_lo.append(p.sign_in_range * e * gv)
    return grad_a, math.fsum(c_hi), 0.0 if p.bounded_input else math.fsum(c_lo)


class TestForward:
    def test_high_bitwidth_limit(self):
        rng = np.random.default_rng(0)
        p = ClipParam(-4.0, 4.0, bits=16)
        a = rng.uniform(-3.9, 3.9, (16, 16)).astype(np.float32)
        out = fakequant_forward(a, p)
        s = ((1 << 16) - 1) / 8.0
        assert np.abs(out - a).max() <= 0.5 / s + 1e-7

    def test_saturation(self):
        p = ClipParam(-4.0, 4.0, bits=4)
        out = fakequant_forward(np.array([p.clip_hi + 10.0]), p)
        expected = dequantize(quantize(np.array([4.0]), p.spec()))
        assert out[0] == expected[0]

    def test_matches_quant_core_round_trip(self):
        p = ClipParam(-4.0, 4.0, bits=4)
        a = np.array([-5.0, -0.1, 0.0, 2.2, 9.0])
        out = fakequant_forward(a, p)
        oracle = dequantize(quantize(a, QuantSpec(4, -4.0, 4.0)))
        np.testing.assert_array_equal(out, oracle)

    def test_invalid_clip_pair_rejected(self):
        with pytest.raises(ParameterError):
            ClipParam(2.0, 2.0)


class TestBackwardBranches:
    def test_all_above_clip(self):
        p = ClipParam(-4.0, 4.0)
        a = np.full((3, 4), 10.0)
        g = np.ones((3, 4))
        grad_a, grad_hi, grad_lo = fakequant_backward(a, p, g)
        assert (grad_a == 0).all()
        assert grad_hi == 12.0
        assert grad_lo == 0.0

    def test_all_below_clip(self):
        p = ClipParam(-4.0, 4.0)
        a = np.full((3, 4), -10.0)
        g = np.ones((3, 4))
        grad_a, grad_hi, grad_lo = fakequant_backward(a, p, g)
        assert (grad_a == 0).all()
        assert grad_hi == 0.0
        assert grad_lo == 12.0

    def test_on_grid_points_passthrough(self):
        # grid values have zero rounding error, so clip grads vanish and the
        # activation gradient passes through untouched
        p = ClipParam(-4.0, 4.0, bits=4)
        s = 15 / 8.0
        codes = np.array([[0, 3, 7], [8, 12, 15]], dtype=np.float64)
        a = p.clip_lo + codes / s
        g = np.arange(6, dtype=np.float32).reshape(2, 3) + 1
        grad_a, grad_hi, grad_lo = fakequant_backward(a, p, g)
        np.testing.assert_array_equal(grad_a, g)
        assert grad_hi == 0.0
        assert grad_lo == 0.0

    def test_branch_partition(self):
        rng = np.random.default_rng(1)
        p = ClipParam(-1.0, 1.0)
        a = rng.uniform(-3, 3, (32, 32))
        above = (a > p.clip_hi).sum()
        below = (a < p.clip_lo).sum()
        inside = ((a >= p.clip_lo) & (a <= p.clip_hi)).sum()
        assert above + below + inside == a.size

    def test_rounding_error_bound(self):
        rng = np.random.default_rng(2)
        for bits in (3, 4, 8):
            p = ClipParam(-2.0, 2.0, bits=bits)
            a = rng.uniform(-3, 3, 1000)
            levels = (1 << bits) - 1
            s = levels / 4.0
            q = s * (a - p.clip_lo)
            e = (q - np.rint(q)) / levels
            assert np.abs(e).max() <= 0.5 / levels + 1e-15


class TestOracleEquivalence:
    @pytest.mark.parametrize("seed", range(10))
    def test_vectorized_matches_naive_bit_exact(self, seed):
        rng = np.random.default_rng(1000 + seed)
        rows = int(rng.integers(1, 65))
        cols = int(rng.integers(1, 65))
        p = ClipParam(
            float(rng.uniform(-4, -0.5)), float(rng.uniform(0.5, 4)),
            bits=int(rng.choice([3, 4])),
            sign_in_range=float(rng.choice([-1.0, 1.0])),
        )
        # span all three branch regions
        a = rng.uniform(p.clip_lo * 2, p.clip_hi * 2, (rows, cols)).astype(np.float32)
        g = rng.standard_normal((rows, cols)).astype(np.float32)
        got = fakequant_backward(a, p, g)
        want = naive_backward(a, p, g)
        np.testing.assert_array_equal(got[0], want[0])
        assert got[1] == want[1]
        assert got[2] == want[2]

    def test_bounded_input_discards_lo_grad(self):
        p = ClipParam(0.0, 4.0, bounded_input=True)
        a = np.array([[-1.0, 2.0, 5.0]])
        g = np.ones((1, 3))
        _, grad_hi, grad_lo = fakequant_backward(a, p, g)
        assert grad_lo == 0.0
        assert grad_hi != 0.0


class TestAutodiffNode:
    def test_grads_accumulate_into_clip_param(self):
        p = ClipParam(-1.0, 1.0)
        x = T.parameter(np.array([[2.0, -2.0, 0.5]]))
        out = fakequant(x, p)
        loss = T.mean_rows_sq(out)
        loss.backward()
        assert p.grad_hi != 0.0 or p.grad_lo != 0.0
        assert x.grad is not None

    def test_ste_identity_region(self):
        # in-range grid points: fakequant is gradient-transparent
        p = ClipParam(-4.0, 4.0, bits=4)
        s = 15 / 8.0
        a = p.clip_lo + np.array([[1.0, 5.0, 9.0]]) / s
        x = T.parameter(a)
        out = fakequant(x, p)
        loss = T.mean_rows_sq(out)
        loss.backward()
        # gradient of mean(out^2) w.r.t. out is 2*out/n, passed through
        np.testing.assert_array_equal(x.grad, (2 * out.data / 3).astype(np.float32))


class TestClipOptimizer:
    def test_single_sgd_step(self):
        p = ClipParam(-4.0, 4.0)
        p.grad_hi = 1.0
        clip_optimizer_step(p, 0.1)
        assert p.clip_hi == pytest.approx(3.9)
        assert p.grad_hi == 0.0

    def test_projection_preserves_gap(self):
        p = ClipParam(-0.1, 0.1)
        p.grad_hi = 100.0
        p.grad_lo = -100.0
        clip_optimizer_step(p, 1.0)
        assert p.clip_hi - p.clip_lo == pytest.approx(CLIP_GAP_MIN)
        assert p.clip_lo < p.clip_hi

    def test_bounded_site_keeps_lo_frozen(self):
        p = ClipParam(0.0, 4.0, bounded_input=True)
        p.grad_lo = 5.0
        p.grad_hi = 1.0
        clip_optimizer_step(p, 0.1)
        assert p.clip_lo == 0.0
        assert p.clip_hi == pytest.approx(3.9)
