"""Generalized CORDIC in circular, linear and hyperbolic modes.

One iteration with shift ``s`` and angle constant ``E``::

    x' = x - m * d * (y >> s)
    y' = y + d * (x >> s)
    z' = z - d * E

with ``m`` = +1 (circular), 0 (linear), -1 (hyperbolic). In rotation the
direction ``d`` follows the sign of z, in vectoring it opposes the sign of
y*x. A zero comparator input always yields ``d = +1``.

The ``*_raw`` functions work on numpy arrays of raw integers and are what
the activation datapath and the network engine use; the FxpValue functions
are thin scalar wrappers over them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .fxp import (FxpFormat, FxpValue, RoundingMode, clip_raw, quantize, shift_left_saturating,
                  shift_right)

LN2 = math.log(2.0)
EXP_GUARD = 4  # extra fraction bits for the truncation of the rotation steps


class CordicMode(Enum):
    CIRCULAR = 1
    LINEAR = 0
    HYPERBOLIC = -1

    @property
    def m(self) -> int:
        return self.value

    def schedule(self, n: int, first_index: int | None = None) -> tuple[int, ...]:
        """Shift amounts of the first ``n`` executed steps.

        Hyperbolic mode starts at 1 and repeats 4, 13, 40, ... (k -> 3k+1).
        """
        if n < 1:
            raise ValueError("iteration count must be >= 1")
        if self is CordicMode.HYPERBOLIC:
            start = 1 if first_index is None else first_index
            if start < 1:
                raise ValueError("hyperbolic iterations start at index >= 1")
            repeat = 4
            while repeat < start:
                repeat = 3 * repeat + 1
            seq: list[int] = []
            i = start
            while len(seq) < n:
                seq.append(i)
                if i == repeat:
                    if len(seq) < n:
                        seq.append(i)
                    repeat = 3 * repeat + 1
                i += 1
            return tuple(seq)
        start = 0 if first_index is None else first_index
        return tuple(range(start, start + n))

    def elementary_angle(self, i: int) -> float:
        t = math.ldexp(1.0, -i)
        if self is CordicMode.CIRCULAR:
            return math.atan(t)
        if self is CordicMode.HYPERBOLIC:
            return math.atanh(t)
        return t


class CordicDirection(Enum):
    ROTATION = "rotation"
    VECTORING = "vectoring"


@dataclass(frozen=True)
class CordicTable:
    """Per-configuration constants: shift schedule, quantized angles and gain."""

    mode: CordicMode
    fmt: FxpFormat
    shifts: tuple[int, ...]
    angles: tuple[int, ...]
    gain: float
    inv_gain_raw: int
    bound: float

    @property
    def n(self) -> int:
        return len(self.shifts)

    def bypassed(self, j: int) -> bool:
        # an angle that rounds to zero cannot steer z, so the stage passes its
        # inputs through instead of adding uncounted rotation and floor bias
        return self.angles[j] == 0


@lru_cache(maxsize=None)
def cordic_table(mode: CordicMode, fmt: FxpFormat, n: int,
                 first_index: int | None = None) -> CordicTable:
    shifts = mode.schedule(n, first_index)
    if mode is CordicMode.LINEAR:
        angles = tuple(quantize(Fraction(1, 1 << i), fmt, RoundingMode.NEAREST_EVEN).raw
                       for i in shifts)
    else:
        angles = tuple(quantize(mode.elementary_angle(i), fmt, RoundingMode.NEAREST_EVEN).raw
                       for i in shifts)
    gain = 1.0
    if mode is not CordicMode.LINEAR:
        for i, a in zip(shifts, angles):
            if a:
                gain *= math.sqrt(1.0 + mode.m * math.ldexp(1.0, -2 * i))
    inv_gain = quantize(1.0 / gain, fmt, RoundingMode.NEAREST_EVEN).raw
    active = [i for i, a in zip(shifts, angles) if a]
    bound = sum(mode.elementary_angle(i) for i in active)
    return CordicTable(mode, fmt, shifts, angles, gain, inv_gain, bound)


@dataclass(frozen=True)
class CordicState:
    x: FxpValue
    y: FxpValue
    z: FxpValue
    i: int = 0

    def __post_init__(self):
        if not (self.x.fmt == self.y.fmt == self.z.fmt):
            raise TypeError("x, y and z must share one format")

    @property
    def fmt(self) -> FxpFormat:
        return self.x.fmt


def _direction(x, y, z, direction: CordicDirection):
    """+1/-1 per element; ties resolve to +1."""
    if direction is CordicDirection.ROTATION:
        return np.where(z >= 0, 1, -1)
    # drive y toward zero: d = -sign(y*x), d = +1 when y == 0
    pos = (y == 0) | ((y > 0) != (x >= 0))
    return np.where(pos, 1, -1)


def step(state: CordicState, table: CordicTable, direction: CordicDirection) -> CordicState:
    """Apply one iteration of ``table`` to ``state``."""
    if state.fmt != table.fmt:
        raise TypeError(f"state format {state.fmt} differs from table format {table.fmt}")
    if not 0 <= state.i < table.n:
        raise IndexError(f"iteration {state.i} outside table of length {table.n}")
    fmt = table.fmt
    s, angle = table.shifts[state.i], table.angles[state.i]
    if table.bypassed(state.i):
        return replace(state, i=state.i + 1)
    x, y, z = state.x.raw, state.y.raw, state.z.raw
    if direction is CordicDirection.ROTATION:
        d = 1 if z >= 0 else -1
    else:
        d = 1 if (y == 0 or (y > 0) != (x >= 0)) else -1
    xn, sx = fmt.saturate(x - table.mode.m * d * (y >> s))
    yn, sy = fmt.saturate(y + d * (x >> s))
    zn, sz = fmt.saturate(z - d * angle)
    sticky = state.x.saturated or state.y.saturated or state.z.saturated
    return CordicState(FxpValue(xn, fmt, sx or sticky), FxpValue(yn, fmt, sy or sticky),
                       FxpValue(zn, fmt, sz or sticky), state.i + 1)


def run(state: CordicState, table: CordicTable, direction: CordicDirection) -> CordicState:
    while state.i < table.n:
        state = step(state, table, direction)
    return state


def _as_raw(a, fmt: FxpFormat) -> np.ndarray:
    return np.asarray(a, dtype=fmt.dtype)


def iterate_raw(x, y, z, table: CordicTable, direction: CordicDirection):
    """All steps of ``table`` on raw arrays, saturating after every update.

    Returns (x, y, z, saturated) where ``saturated`` marks elements that hit
    a format bound at any step.
    """
    fmt = table.fmt
    x, y, z = _as_raw(x, fmt), _as_raw(y, fmt), _as_raw(z, fmt)
    x, y, z = np.broadcast_arrays(x, y, z)
    sat = np.zeros(x.shape, dtype=bool)
    m = table.mode.m
    for j, (s, angle) in enumerate(zip(table.shifts, table.angles)):
        if table.bypassed(j):
            continue
        d = _direction(x, y, z, direction)
        xs, ys = shift_right(x, s), shift_right(y, s)
        xn = x - m * d * ys if m else x
        yn = y + d * xs
        zn = z - d * angle
        x, y, z = clip_raw(xn, fmt), clip_raw(yn, fmt), clip_raw(zn, fmt)
        sat |= (x != xn) | (y != yn) | (z != zn)
    return x, y, z, sat


# ---------------------------------------------------------------------------
# linear-mode multiply-accumulate

def prescale_shift(w_raw, frac_bits: int):
    """Smallest k >= 0 with |w| < 2**(k+1), elementwise."""
    w = np.abs(np.asarray(w_raw)).astype(object if np.asarray(w_raw).dtype == object else np.int64)
    k = np.zeros(w.shape, dtype=np.int64)
    limit = 2 << frac_bits
    while True:
        over = w >= (limit << k) if w.dtype == object else w >= np.left_shift(limit, k)
        if not np.any(over):
            return k
        k = k + over.astype(np.int64)


def mac_directions(w_raw, n: int, frac_bits: int, k=0) -> np.ndarray:
    """Direction bits of an ``n``-step linear rotation driving ``w`` to zero.

    ``k`` is the pre-scale exponent per weight (weights are treated as
    w / 2**k, which is below 2). Zero weights are bypassed and get all-zero
    directions. Result shape is (n,) + w.shape with values in {-1, 0, +1}.
    """
    w = np.asarray(w_raw)
    wide = w.dtype == object or frac_bits + int(np.max(k, initial=0)) > 60
    w = w.astype(object if wide else np.int64)
    k = np.broadcast_to(np.asarray(k, dtype=np.int64), w.shape)
    groups = [(int(kk), k == kk) for kk in np.unique(k)]
    z = w.copy()
    out = np.empty((n,) + w.shape, dtype=np.int8)
    for i in range(n):
        d = np.where(z >= 0, 1, -1)
        out[i] = d
        for kk, sel in groups:
            e = frac_bits + kk - i
            if e >= 0:
                z = np.where(sel, z - d * (1 << e), z)
            else:
                out[i] = np.where(sel, 0, out[i])  # constant below one ULP: stage bypassed
    out[:, w == 0] = 0
    return out


def scaled_shift(x, s: int):
    """floor(x * 2**-s) for any integer s (left shift when s < 0)."""
    return x << (-s) if s < 0 else shift_right(x, s)


def mac_raw(x, w, y0, n: int, fmt: FxpFormat, prescale: bool = False):
    """y0 + x*w by ``n`` linear rotation steps on raw arrays, saturating y per step.

    Inputs, weights and y0 share ``fmt``. Without ``prescale`` every |w| must
    be below 2. Returns (y, saturated).
    """
    x, w, y = _as_raw(x, fmt), _as_raw(w, fmt), _as_raw(y0, fmt)
    x, w, y = np.broadcast_arrays(x, w, y)
    if prescale:
        k = prescale_shift(w, fmt.frac_bits)
    else:
        if np.any(np.abs(w) >= (2 << fmt.frac_bits)):
            raise ValueError("weight outside linear convergence range |w| < 2")
        k = np.zeros(w.shape, dtype=np.int64)
    dirs = mac_directions(w, n, fmt.frac_bits, k)
    sat = np.zeros(x.shape, dtype=bool)
    ks = np.unique(k)
    for i in range(n):
        if len(ks) == 1:
            term = scaled_shift(x, i - int(ks[0]))
        else:
            term = np.zeros_like(x)
            for kk in ks:
                term = np.where(k == kk, scaled_shift(x, i - int(kk)), term)
        yn = y + dirs[i].astype(x.dtype) * term
        y = clip_raw(yn, fmt)
        sat |= y != yn
    return y, sat


def linear_mac(input: FxpValue, weight: FxpValue, bias: FxpValue, n: int) -> FxpValue:
    """bias + input*weight with ``input`` on x, ``weight`` on z and ``bias`` on y."""
    fmt = input.fmt
    if not (weight.fmt == bias.fmt == fmt):
        raise TypeError("input, weight and bias must share one format")
    if n < 1:
        raise ValueError("iteration count must be >= 1")
    if abs(weight.raw) >= 2 << fmt.frac_bits:
        raise ValueError(f"weight {float(weight)} outside linear convergence range |w| < 2; "
                         "use scaled_linear_mac")
    y, sat = mac_raw(input.raw, weight.raw, bias.raw, n, fmt)
    sticky = input.saturated or weight.saturated or bias.saturated
    return FxpValue(int(y), fmt, bool(sat) or sticky)


def scaled_linear_mac(input: FxpValue, weight: FxpValue, bias: FxpValue, n: int) -> FxpValue:
    """linear_mac for any weight: |w| >= 2 is split into mantissa * 2**k.

    The rotation runs on the mantissa and each product term is shifted left
    by k, so no weight bits are lost.
    """
    fmt = input.fmt
    if not (weight.fmt == bias.fmt == fmt):
        raise TypeError("input, weight and bias must share one format")
    y, sat = mac_raw(input.raw, weight.raw, bias.raw, n, fmt, prescale=True)
    sticky = input.saturated or weight.saturated or bias.saturated
    return FxpValue(int(y), fmt, bool(sat) or sticky)


# ---------------------------------------------------------------------------
# hyperbolic / circular rotation, exp

def _check_angle(angle: FxpValue, table: CordicTable):
    if abs(float(angle)) > table.bound:
        raise ValueError(f"angle {float(angle)} outside convergence range ±{table.bound:.4f} "
                         f"for {table.n} {table.mode.name.lower()} iterations")


def hyperbolic_raw(angle, fmt: FxpFormat, n: int):
    """(cosh, sinh, saturated) of raw angles already inside the convergence range."""
    table = cordic_table(CordicMode.HYPERBOLIC, fmt, n)
    angle = _as_raw(angle, fmt)
    x, y, _, sat = iterate_raw(np.full(angle.shape, table.inv_gain_raw, dtype=fmt.dtype),
                               np.zeros(angle.shape, dtype=fmt.dtype), angle, table,
                               CordicDirection.ROTATION)
    return x, y, sat


def hyperbolic_rotate(angle: FxpValue, n: int) -> tuple[FxpValue, FxpValue]:
    """(cosh, sinh) of ``angle`` with gain pre-compensation."""
    table = cordic_table(CordicMode.HYPERBOLIC, angle.fmt, n)
    _check_angle(angle, table)
    c, s, sat = hyperbolic_raw(angle.raw, angle.fmt, n)
    flag = bool(sat) or angle.saturated
    return FxpValue(int(c), angle.fmt, flag), FxpValue(int(s), angle.fmt, flag)


def circular_rotate(angle: FxpValue, n: int) -> tuple[FxpValue, FxpValue]:
    """(cos, sin) of ``angle``."""
    table = cordic_table(CordicMode.CIRCULAR, angle.fmt, n)
    _check_angle(angle, table)
    fmt = angle.fmt
    x, y, _, sat = iterate_raw(table.inv_gain_raw, 0, angle.raw, table, CordicDirection.ROTATION)
    flag = bool(sat) or angle.saturated
    return FxpValue(int(x), fmt, flag), FxpValue(int(y), fmt, flag)


@lru_cache(maxsize=None)
def _ln2_raw(fmt: FxpFormat) -> int:
    return quantize(LN2, fmt, RoundingMode.NEAREST_EVEN).raw


def reduce_ln2(t, fmt: FxpFormat):
    """Split raw t into k*ln2 + r with r near [-ln2/2, ln2/2]. Returns (k, r)."""
    t = _as_raw(t, fmt)
    k = np.floor(t.astype(np.float64) / float(1 << fmt.frac_bits) / LN2 + 0.5).astype(np.int64)
    r = t - k.astype(t.dtype) * _ln2_raw(fmt)
    return k, r


def shift_by_k(v, k, fmt: FxpFormat):
    """v * 2**k per element: saturating left shift for k > 0, truncating right shift otherwise."""
    v = _as_raw(v, fmt)
    k = np.asarray(k, dtype=np.int64)
    out = v.copy()
    for kk in np.unique(k):
        kk = int(kk)
        sel = k == kk
        if kk > 0:
            out = np.where(sel, shift_left_saturating(v, kk, fmt), out)
        elif kk < 0:
            out = np.where(sel, shift_right(v, -kk), out)
    return out


def exp_raw(a, fmt: FxpFormat, n: int, sign: int = 1):
    """e**(sign*a) for raw a: reduce a = k*ln2 + r, rotate r once, then shift by sign*k.

    e**r = cosh r + sinh r and e**-r = cosh r - sinh r.
    """
    # guard bits: the 2**k scale would otherwise blow up the error of e**r
    g = fmt.int_bits + EXP_GUARD
    inner = FxpFormat(fmt.word_bits + g, fmt.frac_bits + g)
    k, r = reduce_ln2(_as_raw(a, fmt).astype(inner.dtype) << g, inner)
    c, s, _ = hyperbolic_raw(r, inner, n)
    v = clip_raw(c + s if sign > 0 else c - s, inner)
    wide = FxpFormat(inner.word_bits + g + 1, inner.frac_bits)
    out = shift_by_k(v, k if sign > 0 else -k, wide)
    return clip_raw(shift_right(out, g), fmt).astype(fmt.dtype)


def exp_of(angle: FxpValue, n: int, sign: str | int = "+") -> FxpValue:
    """e**angle for sign "+", e**-angle for sign "-"."""
    if sign in ("+", 1):
        sgn = 1
    elif sign in ("-", -1):
        sgn = -1
    else:
        raise ValueError(f"sign must be '+' or '-', got {sign!r}")
    fmt = angle.fmt
    e = int(exp_raw(angle.raw, fmt, n, sgn))
    return FxpValue(e, fmt, angle.saturated or e == fmt.max_raw)


# ---------------------------------------------------------------------------
# linear vectoring division

def _bit_length(a) -> np.ndarray:
    if a.dtype == object:
        return np.vectorize(lambda v: int(v).bit_length(), otypes=[np.int64])(a)
    _, e = np.frexp(a.astype(np.float64))
    e = e.astype(np.int64)
    # float rounding can only overstate the length by one
    over = (e > 0) & (np.left_shift(np.int64(1), np.maximum(e - 1, 0)) > a)
    return e - over


def divide_raw(num, den, fmt: FxpFormat, n: int, first_index: int = 0,
               out_fmt: FxpFormat | None = None):
    """num/den on raw arrays by ``n`` linear vectoring steps.

    Operands are moved into an internal format with extra fraction bits and
    jointly normalized so that |den| lies in [1, 2). After the last step the
    remainder sign and size settle z on the quotient truncated to the last
    step's resolution (non-restoring correction).
    The result is truncated into ``out_fmt`` (default ``fmt``) and saturated.
    """
    out_fmt = out_fmt or fmt
    guard = fmt.word_bits - fmt.frac_bits
    fi = fmt.frac_bits + guard
    # steps past fi have a zero constant and are bypassed; the rest shift by
    # at most `ext`, and x, y carry that many extra bits so the shifts are exact
    shifts = [i for i in CordicMode.LINEAR.schedule(n, first_index) if i <= fi]
    ext = max(shifts, default=0)
    dtype = np.int64 if fi + ext + 6 <= 62 else object
    num = np.asarray(num).astype(dtype)
    den = np.asarray(den).astype(dtype)
    num, den = np.broadcast_arrays(num, den)
    if np.any(den == 0):
        raise ZeroDivisionError("division by zero")
    # quotients beyond 4 saturate anyway; clamping keeps the shifts in range
    lim = 4 * np.abs(den)
    num = np.minimum(np.maximum(num, -lim), lim)
    num = num << guard
    den = den << guard
    e = _bit_length(np.abs(den)) - 1 - fi
    right = np.maximum(e, 0)
    left = np.maximum(-e, 0)
    if dtype == object:
        num = np.array([(a >> int(r)) << int(l) for a, r, l in
                        zip(num.ravel(), right.ravel(), left.ravel())], dtype=object).reshape(num.shape)
        den = np.array([(a >> int(r)) << int(l) for a, r, l in
                        zip(den.ravel(), right.ravel(), left.ravel())], dtype=object).reshape(den.shape)
    else:
        num = np.left_shift(np.right_shift(num, right), left)
        den = np.left_shift(np.right_shift(den, right), left)
    x, y = den << ext, num << ext
    z = np.zeros(x.shape, dtype=dtype)
    last = last_shift = 0
    for i in shifts:
        d = _direction(x, y, None, CordicDirection.VECTORING)
        y = y + d * (x >> i)
        last, last_shift = 1 << (fi - i), i
        z = z - d * last
    if not shifts:
        return np.zeros(num.shape, dtype=out_fmt.dtype)
    # y = den * (q - z) exactly and |q - z| <= last; settle z on floor(q) at that step
    r = np.where(x > 0, y, -y)
    under = (r << last_shift) >= np.abs(x)
    z = np.where(r < 0, z - last, np.where(under, z + last, z))
    q = shift_right(z, fi - out_fmt.frac_bits)
    return clip_raw(q, out_fmt).astype(out_fmt.dtype)


def linear_divide(num: FxpValue, den: FxpValue, n: int, first_index: int = 0) -> FxpValue:
    """num/den by linear vectoring (x0 = den, y0 = num, z0 = 0)."""
    if num.fmt != den.fmt:
        raise TypeError(f"format mismatch: {num.fmt} vs {den.fmt}")
    if den.raw == 0:
        raise ZeroDivisionError("division by zero")
    if n < 1:
        raise ValueError("iteration count must be >= 1")
    q = int(divide_raw(num.raw, den.raw, num.fmt, n, first_index))
    fmt = num.fmt
    return FxpValue(q, fmt, num.saturated or den.saturated or q in (fmt.max_raw, fmt.min_raw))
