from fractions import Fraction
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cordic_rpe.fxp import (Q8_4, Q16_8, Q32_16, FxpFormat, FxpValue, RoundingMode, add,
                            clip_raw, negate, quantize, quantize_array, requantize, shr, sub)

formats = st.sampled_from([Q8_4, Q16_8, Q32_16, FxpFormat(12, 6), FxpFormat(64, 30)])


def oracle_unclamped(value: Fraction, fmt: FxpFormat, mode: RoundingMode) -> int:
    scaled = value * (1 << fmt.frac_bits)
    lo = math.floor(scaled)
    if mode is RoundingMode.TRUNCATE:
        return lo
    rem = scaled - lo
    return lo + 1 if rem > Fraction(1, 2) or (rem == Fraction(1, 2) and lo % 2) else lo


def test_format_bounds():
    assert (Q8_4.min_raw, Q8_4.max_raw, Q8_4.int_bits) == (-128, 127, 3)
    assert Q8_4.max_value == Fraction(127, 16)
    assert Q16_8.ulp == Fraction(1, 256)
    assert str(Q32_16) == "Q32.16"


@pytest.mark.parametrize("text, fmt", [("Q8.4", Q8_4), ("q16.8", Q16_8), (" Q32.16 ", Q32_16)])
def test_parse(text, fmt):
    assert FxpFormat.parse(text) == fmt


@pytest.mark.parametrize("text", ["Q8", "8.4", "Q3.1", "Q65.4", "Q8.8", "Qx.y"])
def test_parse_rejects(text):
    with pytest.raises(ValueError):
        FxpFormat.parse(text)


def test_rounding_examples():
    assert quantize(0.03125, Q8_4).raw == 0
    assert quantize(-0.03125, Q8_4).raw == -1
    # ties go to even
    assert quantize(0.03125, Q8_4, RoundingMode.NEAREST_EVEN).raw == 0
    assert quantize(0.09375, Q8_4, RoundingMode.NEAREST_EVEN).raw == 2
    assert quantize(-0.09375, Q8_4, RoundingMode.NEAREST_EVEN).raw == -2


def test_saturation_sets_flag():
    hi = quantize(100.0, Q8_4)
    assert hi.raw == 127 and hi.saturated
    lo = quantize(float("-inf"), Q8_4)
    assert lo.raw == -128 and lo.saturated
    assert not quantize(7.9375, Q8_4).saturated
    with pytest.raises(ValueError):
        quantize(float("nan"), Q8_4)


def test_sticky_flag_propagates():
    big = quantize(100.0, Q8_4)
    small = quantize(0.5, Q8_4)
    assert add(big, small).saturated
    assert sub(small, small).saturated is False
    assert negate(quantize(-8, Q8_4)).raw == 127


def test_shift_is_floor():
    assert shr(FxpValue(-3, Q8_4), 1).raw == -2
    assert shr(FxpValue(3, Q8_4), 1).raw == 1
    with pytest.raises(ValueError):
        shr(FxpValue(3, Q8_4), 8)


def test_format_mismatch():
    with pytest.raises(TypeError):
        add(quantize(1, Q8_4), quantize(1, Q16_8))


def test_value_validates_raw():
    with pytest.raises(ValueError):
        FxpValue(128, Q8_4)
    with pytest.raises(TypeError):
        FxpValue(1.5, Q8_4)


@given(st.fractions(min_value=-200, max_value=200), formats,
       st.sampled_from(list(RoundingMode)))
def test_quantize_matches_oracle(value, fmt, mode):
    q = quantize(value, fmt, mode)
    r = oracle_unclamped(value, fmt, mode)
    assert q.raw == max(fmt.min_raw, min(fmt.max_raw, r))
    assert q.saturated == (not fmt.fits(r))


@given(st.floats(-300, 300, allow_nan=False), formats)
def test_truncation_error_below_one_ulp(value, fmt):
    q = quantize(value, fmt)
    if not q.saturated:
        err = Fraction(value) - q.to_real()
        assert 0 <= err < fmt.ulp


@given(st.integers(-128, 127), st.integers(-128, 127))
def test_add_is_saturating_sum(a, b):
    s = add(FxpValue(a, Q8_4), FxpValue(b, Q8_4))
    assert s.raw == max(-128, min(127, a + b))
    assert s.saturated == (not -128 <= a + b <= 127)


@given(st.integers(-2**15, 2**15 - 1))
def test_requantize_round_trip(raw):
    v = FxpValue(raw, Q16_8)
    wide = requantize(v, Q32_16)
    assert wide.to_real() == v.to_real() and not wide.saturated
    assert requantize(wide, Q16_8) == v


@given(st.lists(st.floats(-300, 300, allow_nan=False), min_size=1, max_size=40), formats,
       st.sampled_from(list(RoundingMode)))
def test_array_quantize_matches_scalar(values, fmt, mode):
    raw, n_sat = quantize_array(values, fmt, mode)
    scalar = [quantize(v, fmt, mode) for v in values]
    assert [int(r) for r in raw] == [q.raw for q in scalar]
    assert n_sat == sum(q.saturated for q in scalar)


def test_clip_raw():
    assert list(clip_raw(np.array([-500, 0, 500]), Q8_4)) == [-128, 0, 127]
