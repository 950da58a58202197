"""Signed two's-complement fixed-point numbers with saturating arithmetic.

Scalars are :class:`FxpValue` objects backed by Python integers. Bulk data
is carried as numpy arrays of raw integers together with an
:class:`FxpFormat`; the helpers at the bottom of this module convert between
reals and raw arrays with the same rounding and saturation rules as the
scalar path.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from numbers import Rational, Real

import numpy as np

MAX_WORD_BITS = 128
_FORMAT_RE = re.compile(r"^[Qq](\d+)\.(\d+)$")


class RoundingMode(Enum):
    TRUNCATE = "truncate"
    NEAREST_EVEN = "nearest-even"

    @classmethod
    def parse(cls, text: str) -> "RoundingMode":
        key = text.strip().lower().replace("_", "-")
        aliases = {"trunc": "truncate", "floor": "truncate", "nearest": "nearest-even",
                   "rne": "nearest-even", "round": "nearest-even"}
        key = aliases.get(key, key)
        for mode in cls:
            if mode.value == key:
                return mode
        raise ValueError(f"unknown rounding mode {text!r}")


@dataclass(frozen=True)
class FxpFormat:
    """Q(word_bits, frac_bits): one sign bit, word_bits-1-frac_bits integer bits."""

    word_bits: int
    frac_bits: int

    def __post_init__(self):
        if not isinstance(self.word_bits, int) or not isinstance(self.frac_bits, int):
            raise TypeError("word_bits and frac_bits must be integers")
        if not 2 <= self.word_bits <= MAX_WORD_BITS:
            raise ValueError(f"word_bits {self.word_bits} outside 2..{MAX_WORD_BITS}")
        if not 0 <= self.frac_bits < self.word_bits:
            raise ValueError(f"frac_bits {self.frac_bits} must be in 0..{self.word_bits - 1}")

    @classmethod
    def parse(cls, text: str) -> "FxpFormat":
        """Parse "Q<word>.<frac>", e.g. "Q8.4"."""
        m = _FORMAT_RE.match(text.strip())
        if not m:
            raise ValueError(f"bad format string {text!r}, expected Q<word>.<frac>")
        word, frac = int(m.group(1)), int(m.group(2))
        if not 4 <= word <= 64:
            raise ValueError(f"word bits {word} outside 4..64 in {text!r}")
        return cls(word, frac)

    def __str__(self) -> str:
        return f"Q{self.word_bits}.{self.frac_bits}"

    @property
    def int_bits(self) -> int:
        return self.word_bits - 1 - self.frac_bits

    @property
    def min_raw(self) -> int:
        return -(1 << (self.word_bits - 1))

    @property
    def max_raw(self) -> int:
        return (1 << (self.word_bits - 1)) - 1

    @property
    def one_raw(self) -> int:
        return 1 << self.frac_bits

    @property
    def ulp(self) -> Fraction:
        return Fraction(1, 1 << self.frac_bits)

    @property
    def min_value(self) -> Fraction:
        return Fraction(self.min_raw, 1 << self.frac_bits)

    @property
    def max_value(self) -> Fraction:
        return Fraction(self.max_raw, 1 << self.frac_bits)

    @property
    def dtype(self):
        """numpy dtype able to hold raws and pairwise sums without overflow."""
        return np.int64 if self.word_bits <= 62 else object

    def fits(self, raw: int) -> bool:
        return self.min_raw <= raw <= self.max_raw

    def saturate(self, raw: int) -> tuple[int, bool]:
        if raw > self.max_raw:
            return self.max_raw, True
        if raw < self.min_raw:
            return self.min_raw, True
        return raw, False

    def widened(self, guard_bits: int) -> "FxpFormat":
        """Same fraction bits with extra integer guard bits."""
        return FxpFormat(self.word_bits + guard_bits, self.frac_bits)


Q8_4 = FxpFormat(8, 4)
Q16_8 = FxpFormat(16, 8)
Q32_16 = FxpFormat(32, 16)
DEFAULT_FORMATS = {8: Q8_4, 16: Q16_8, 32: Q32_16}


@dataclass(frozen=True)
class FxpValue:
    raw: int
    fmt: FxpFormat
    # sticky diagnostic: set when this value or any operand saturated
    saturated: bool = field(default=False, compare=False)

    def __post_init__(self):
        if isinstance(self.raw, (bool, np.bool_)) or not isinstance(self.raw, (int, np.integer)):
            raise TypeError(f"raw must be an integer, got {type(self.raw).__name__}")
        if not isinstance(self.raw, int):
            object.__setattr__(self, "raw", int(self.raw))
        if not self.fmt.fits(self.raw):
            raise ValueError(f"raw {self.raw} does not fit {self.fmt}")

    @classmethod
    def of(cls, value, fmt: FxpFormat, mode: RoundingMode = RoundingMode.TRUNCATE) -> "FxpValue":
        return quantize(value, fmt, mode)

    def to_real(self) -> Fraction:
        return Fraction(self.raw, 1 << self.fmt.frac_bits)

    def __float__(self) -> float:
        return self.raw / (1 << self.fmt.frac_bits)

    def __repr__(self) -> str:
        flag = ", saturated" if self.saturated else ""
        return f"FxpValue({float(self)!r} {self.fmt} raw={self.raw}{flag})"

    def __add__(self, other: "FxpValue") -> "FxpValue":
        return add(self, other)

    def __sub__(self, other: "FxpValue") -> "FxpValue":
        return sub(self, other)

    def __neg__(self) -> "FxpValue":
        return negate(self)

    def __rshift__(self, i: int) -> "FxpValue":
        return shr(self, i)


def _as_fraction(value) -> Fraction:
    if isinstance(value, FxpValue):
        return value.to_real()
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (int, np.integer, Rational)):
        return Fraction(int(value)) if isinstance(value, (int, np.integer)) else Fraction(value)
    if isinstance(value, (float, np.floating, Real)):
        f = float(value)
        if math.isnan(f):
            raise ValueError("cannot quantize NaN")
        return Fraction(f)
    return Fraction(value)


def quantize(value, fmt: FxpFormat, mode: RoundingMode = RoundingMode.TRUNCATE) -> FxpValue:
    """Nearest representable value under ``mode``; out-of-range values saturate.

    The returned value's ``saturated`` flag reports saturation.
    """
    if isinstance(value, (float, np.floating)) and math.isinf(value):
        raw = fmt.max_raw if value > 0 else fmt.min_raw
        return FxpValue(raw, fmt, True)
    scaled = _as_fraction(value) * (1 << fmt.frac_bits)
    if mode is RoundingMode.TRUNCATE:
        raw = math.floor(scaled)
    else:
        raw = round(scaled)  # Fraction rounds half to even
    raw, sat = fmt.saturate(raw)
    return FxpValue(raw, fmt, sat)


def requantize(a: FxpValue, fmt: FxpFormat, mode: RoundingMode = RoundingMode.TRUNCATE) -> FxpValue:
    """Move ``a`` into another format, saturating at its bounds."""
    if fmt.frac_bits >= a.fmt.frac_bits:
        raw = a.raw << (fmt.frac_bits - a.fmt.frac_bits)
        raw, sat = fmt.saturate(raw)
        return FxpValue(raw, fmt, sat or a.saturated)
    out = quantize(a.to_real(), fmt, mode)
    return FxpValue(out.raw, fmt, out.saturated or a.saturated)


def _check_same(a: FxpValue, b: FxpValue):
    if a.fmt != b.fmt:
        raise TypeError(f"format mismatch: {a.fmt} vs {b.fmt}")


def add(a: FxpValue, b: FxpValue) -> FxpValue:
    _check_same(a, b)
    raw, sat = a.fmt.saturate(a.raw + b.raw)
    return FxpValue(raw, a.fmt, sat or a.saturated or b.saturated)


def sub(a: FxpValue, b: FxpValue) -> FxpValue:
    _check_same(a, b)
    raw, sat = a.fmt.saturate(a.raw - b.raw)
    return FxpValue(raw, a.fmt, sat or a.saturated or b.saturated)


def negate(a: FxpValue) -> FxpValue:
    raw, sat = a.fmt.saturate(-a.raw)
    return FxpValue(raw, a.fmt, sat or a.saturated)


def shr(a: FxpValue, i: int) -> FxpValue:
    """Arithmetic right shift (truncates toward minus infinity)."""
    if not 0 <= i < a.fmt.word_bits:
        raise ValueError(f"shift {i} outside 0..{a.fmt.word_bits - 1}")
    return FxpValue(a.raw >> i, a.fmt, a.saturated)


def to_real(a: FxpValue) -> Fraction:
    return a.to_real()


# ---------------------------------------------------------------------------
# raw-array helpers

def clip_raw(raw, fmt: FxpFormat):
    return np.minimum(np.maximum(raw, fmt.min_raw), fmt.max_raw)


def shift_right(raw, s: int):
    """Floor division by 2**s that is safe for any s >= 0 on int64 arrays."""
    if isinstance(raw, np.ndarray) and raw.dtype != object and s > 63:
        s = 63
    return raw >> s


def shift_left_saturating(raw, s: int, fmt: FxpFormat):
    """raw * 2**s, saturated to fmt."""
    if s == 0:
        return raw
    s = min(s, fmt.word_bits + 1)
    hi = fmt.max_raw >> s
    lo = -((-fmt.min_raw) >> s)
    safe = np.minimum(np.maximum(raw, lo), hi)
    return np.where(raw > hi, fmt.max_raw, np.where(raw < lo, fmt.min_raw, safe << s))


def quantize_array(values, fmt: FxpFormat,
                   mode: RoundingMode = RoundingMode.TRUNCATE) -> tuple[np.ndarray, int]:
    """Quantize an array of reals. Returns (raw array, number of saturated elements)."""
    vals = np.asarray(values, dtype=np.float64)
    if np.isnan(vals).any():
        raise ValueError("cannot quantize NaN")
    if fmt.word_bits > 52:
        flat = [quantize(float(v), fmt, mode) for v in vals.ravel()]
        raw = np.array([q.raw for q in flat], dtype=fmt.dtype).reshape(vals.shape)
        return raw, sum(q.saturated for q in flat)
    scaled = vals * float(1 << fmt.frac_bits)
    rounded = np.floor(scaled) if mode is RoundingMode.TRUNCATE else np.rint(scaled)
    sat = (rounded > fmt.max_raw) | (rounded < fmt.min_raw)
    raw = np.clip(rounded, fmt.min_raw, fmt.max_raw).astype(np.int64)
    return raw, int(sat.sum())


def raw_to_float(raw, fmt: FxpFormat) -> np.ndarray:
    return np.asarray(raw).astype(np.float64) / float(1 << fmt.frac_bits)


def all_raws(fmt: FxpFormat) -> np.ndarray:
    """Every code of a narrow format, ascending."""
    if fmt.word_bits > 24:
        raise ValueError(f"{fmt} is too wide to enumerate")
    return np.arange(fmt.min_raw, fmt.max_raw + 1, dtype=np.int64)


def values_of(raws, fmt: FxpFormat) -> list[FxpValue]:
    return [FxpValue(int(r), fmt) for r in np.asarray(raws).ravel()]


def shift_right_each(raw, s):
    """Elementwise floor(raw / 2**s) with a per-element shift array."""
    raw = np.asarray(raw)
    s = np.broadcast_to(np.asarray(s, dtype=np.int64), raw.shape)
    if raw.dtype == object:
        flat = [int(v) >> int(k) for v, k in zip(raw.ravel(), s.ravel())]
        return np.array(flat, dtype=object).reshape(raw.shape)
    return np.right_shift(raw, np.minimum(s, 63))
