import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowbit.errors import InputError, SpecError
from lowbit.quant import QuantSpec, QuantizedTensor, dequantize, minmax_calibrate, quantize


class TestQuantSpec:
    def test_rejects_inverted_clips(self):
        with pytest.raises(SpecError):
            QuantSpec(4, 1.0, -1.0)

    def test_rejects_equal_clips(self):
        with pytest.raises(SpecError):
            QuantSpec(4, 2.0, 2.0)

    def test_rejects_bad_bits(self):
        with pytest.raises(SpecError):
            QuantSpec(17, -1.0, 1.0)
        with pytest.raises(SpecError):
            QuantSpec(1, -1.0, 1.0)

    def test_scale_and_zero_point_for_paper_init(self):
        # b=4, clips +-4 (the learned-clip initialization): s = 15/8 = 1.875,
        # z = -round(1.875 * -4) = -round(-7.5) = 8 (half-to-even)
        spec = QuantSpec(4, -4.0, 4.0)
        assert float(spec.scale) == pytest.approx(1.875)
        assert int(spec.zero_point) == 8

    def test_paper_zero_sign_flag_flips_sign(self):
        spec = QuantSpec(4, -4.0, 4.0, paper_zero_sign=True)
        assert int(spec.zero_point) == -8


class TestQuantize:
    def test_unit_scale(self):
        spec = QuantSpec(4, 0.0, 15.0)
        q = quantize(np.array([7.3]), spec)
        assert q.codes[0] == 7

    def test_paper_clip_init_zero_maps_to_code_8(self):
        spec = QuantSpec(4, -4.0, 4.0)
        q = quantize(np.array([0.0]), spec)
        assert q.codes[0] == 8
        assert dequantize(q)[0] == 0.0

    def test_beyond_clip_saturates_to_top_code(self):
        # a=100 clamps to 4; round(1.875*4 + 8) = round(15.5) -> 16 (half-even),
        # integer clamp brings it back to 15
        spec = QuantSpec(4, -4.0, 4.0)
        q = quantize(np.array([100.0]), spec)
        assert q.codes[0] == 15

    def test_nonfinite_input_rejected(self):
        with pytest.raises(InputError):
            quantize(np.array([np.nan]), QuantSpec(4, -1.0, 1.0))

    def test_row_granularity(self):
        a = np.array([[0.0, 1.0], [0.0, 10.0]])
        spec = QuantSpec(4, np.array([0.0, 0.0]), np.array([1.0, 10.0]),
                         granularity="row")
        q = quantize(a, spec)
        assert q.axis == 0
        np.testing.assert_array_equal(q.codes, [[0, 15], [0, 15]])


class TestDequantize:
    def test_zero_point_identity(self):
        q = QuantizedTensor(np.array([8]), 4, np.array(1.875), np.array(8))
        assert dequantize(q)[0] == 0.0

    def test_all_16_codes_identity_scale(self):
        q = QuantizedTensor(np.arange(16), 4, np.array(1.0), np.array(0))
        np.testing.assert_array_equal(dequantize(q), np.arange(16, dtype=np.float32))

    def test_round_trip_bound_b8(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(-2, 2, 100_000)
        spec = QuantSpec(8, -1.0, 1.0)
        a_hat = dequantize(quantize(a, spec)).astype(np.float64)
        clamped = np.clip(a, -1, 1)
        err = np.abs(a_hat - clamped)
        s = float(spec.scale)
        assert err.max() <= 1.0 / s + 1e-12
        interior = (a > -1) & (a < 1)
        assert err[interior].max() <= 0.5 / s + 1e-12


class TestMinmaxCalibrate:
    def test_per_row(self):
        spec = minmax_calibrate(np.array([[-2.0, 0.0, 6.0]]), 4, "row")
        assert spec.clip_lo[0] == -2.0 and spec.clip_hi[0] == 6.0

    def test_constant_row_widened(self):
        spec = minmax_calibrate(np.array([[3.0, 3.0, 3.0]]), 4, "row")
        delta = 1e-6 * 3.0
        assert spec.clip_lo[0] == pytest.approx(3.0 - delta)
        assert spec.clip_hi[0] == pytest.approx(3.0 + delta)
        q = quantize(np.array([[3.0, 3.0, 3.0]]), spec)
        np.testing.assert_allclose(dequantize(q), 3.0, atol=2 * delta)

    def test_tensor_granularity(self):
        spec = minmax_calibrate(np.array([[-1.0, 2.0], [0.0, 5.0]]), 4, "tensor")
        assert float(spec.clip_lo) == -1.0 and float(spec.clip_hi) == 5.0

    def test_empty_input_rejected(self):
        with pytest.raises(InputError):
            minmax_calibrate(np.array([]), 4)


# ---------------------------------------------------------------------------
# property suites
# ---------------------------------------------------------------------------

finite_floats = st.floats(allow_nan=False, allow_infinity=False,
                          min_value=-1e6, max_value=1e6)


@st.composite
def specs(draw, self_consistent=False):
    """Random specs; with ``self_consistent`` the code grid can represent its
    own clip interval (align_zero, or zero-based clips with z=0), which is a
    precondition for exact round trips."""
    bits = draw(st.sampled_from([2, 3, 4, 8]))
    align_zero = draw(st.booleans())
    if self_consistent and not align_zero:
        lo = 0.0
    else:
        lo = draw(finite_floats)
    width = draw(st.floats(min_value=1e-3, max_value=1e6))
    return QuantSpec(bits, lo, lo + width, align_zero=align_zero)


@settings(max_examples=200, deadline=None)
@given(spec=specs(), data=st.data())
def test_codomain_property(spec, data):
    vals = data.draw(st.lists(finite_floats, min_size=1, max_size=32))
    q = quantize(np.array(vals), spec)
    assert q.codes.min() >= 0
    assert q.codes.max() <= (1 << spec.bits) - 1


@settings(max_examples=100, deadline=None)
@given(spec=specs(), data=st.data())
def test_monotonicity_property(spec, data):
    vals = data.draw(st.lists(finite_floats, min_size=2, max_size=32))
    a = np.sort(np.array(vals))
    codes = quantize(a, spec).codes
    assert (np.diff(codes) >= 0).all()


@settings(max_examples=100, deadline=None)
@given(spec=specs(self_consistent=True), data=st.data())
def test_idempotence_property(spec, data):
    n_codes = 1 << spec.bits
    codes = np.array(data.draw(st.lists(
        st.integers(0, n_codes - 1), min_size=1, max_size=32)))
    q = QuantizedTensor(codes, spec.bits, np.asarray(spec.scale),
                        spec.zero_point)
    again = quantize(dequantize(q).astype(np.float64), spec)
    np.testing.assert_array_equal(again.codes, q.codes)


@settings(max_examples=100, deadline=None)
@given(bits=st.sampled_from([2, 3, 4, 8]),
       lo=st.floats(min_value=-100, max_value=-1e-3),
       hi=st.floats(min_value=1e-3, max_value=100))
def test_zero_fidelity_property(bits, lo, hi):
    spec = QuantSpec(bits, lo, hi, align_zero=True)
    q = quantize(np.array([0.0]), spec)
    assert dequantize(q)[0] == 0.0
