"""Error analysis: fixed-point CORDIC functions against a double-precision oracle.

A sweep evaluates one function over a grid of inputs for every
(format, iteration count) pair and reports MSE, MAE, average relative error
and two standard deviations per row. Activation sweeps use a single
iteration knob for the hyperbolic, division and multiply stages.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .cordic import exp_raw, mac_raw
from .fxp import (Q8_4, FxpFormat, RoundingMode, all_raws, quantize_array, raw_to_float)
from .rpe import (GELU_C1, GELU_C2, SELU_ALPHA, SELU_LAMBDA, AfKind, RpeConfig,
                  accumulator_format, activate_raw, softmax_raw)

SOFTMAX_LENGTH = 10
EXHAUSTIVE_MAX_WORD = 12
CSV_COLUMNS = ("function", "format", "iterations", "mse", "mae", "avg_rel_err", "std_paper",
               "std_conventional", "clamped", "n_samples")


class SweepFunction(Enum):
    MAC = "mac"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"
    GELU = "gelu"
    SELU = "selu"
    SWISH = "swish"
    EXP = "exp"

    @classmethod
    def parse(cls, text: str) -> "SweepFunction":
        try:
            return cls(text.strip().lower())
        except ValueError:
            names = ", ".join(f.value for f in cls)
            raise ValueError(f"unknown function {text!r} (expected one of {names})") from None


@dataclass(frozen=True)
class ErrorMetrics:
    mse: float
    mae: float
    avg_rel_err: float | None
    std_paper: float | None
    std_conventional: float | None
    n: int
    rel_skipped: int = 0  # samples with a zero reference, left out of avg_rel_err
    max_abs_err: float = 0.0


def metrics(reference, output) -> ErrorMetrics:
    """Error statistics of ``output`` against ``reference``.

    ``std_paper`` is sum((ref - mean(out))**2) / (n - 1); ``std_conventional``
    is the sample standard deviation of the errors. Both are None for n == 1.
    """
    x = np.asarray(reference, dtype=np.float64).ravel()
    y = np.asarray(output, dtype=np.float64).ravel()
    if x.size == 0 or x.size != y.size:
        raise ValueError(f"need equal nonempty samples, got {x.size} and {y.size}")
    n = x.size
    err = y - x
    abs_err = np.abs(err)
    nz = x != 0
    rel = float(np.mean(abs_err[nz] / np.abs(x[nz]))) if nz.any() else None
    if n > 1:
        std_paper = float(np.sum((x - y.mean()) ** 2) / (n - 1))
        std_conv = float(np.std(err, ddof=1))
    else:
        std_paper = std_conv = None
    return ErrorMetrics(mse=float(np.mean(err * err)), mae=float(np.mean(abs_err)),
                        avg_rel_err=rel, std_paper=std_paper, std_conventional=std_conv,
                        n=n, rel_skipped=int((~nz).sum()), max_abs_err=float(abs_err.max()))


@dataclass(frozen=True)
class InputGrid:
    """Where sweep inputs come from.

    ``exhaustive`` enumerates every code of formats up to 12 bits. Wider
    formats get the 256 Q8.4 codes, so all formats see the same real inputs.
    """

    kind: str = "exhaustive"
    lo: float = 0.0
    hi: float = 0.0
    steps: int = 0
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("exhaustive", "uniform", "explicit"):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if self.kind == "uniform" and (self.steps < 1 or not self.lo <= self.hi):
            raise ValueError("uniform grid needs lo <= hi and steps >= 1")
        if self.kind == "explicit" and not self.values:
            raise ValueError("explicit grid needs at least one value")

    @classmethod
    def uniform(cls, lo: float, hi: float, steps: int) -> "InputGrid":
        return cls("uniform", lo=float(lo), hi=float(hi), steps=int(steps))

    @classmethod
    def explicit(cls, values) -> "InputGrid":
        return cls("explicit", values=tuple(float(v) for v in values))

    @classmethod
    def parse(cls, text: str) -> "InputGrid":
        """Accepts ``exhaustive``, ``uniform:LO:HI:STEPS`` or ``list:V1,V2,...``."""
        text = text.strip()
        if text == "exhaustive":
            return cls()
        head, _, rest = text.partition(":")
        try:
            if head == "uniform":
                lo, hi, steps = rest.split(":")
                return cls.uniform(float(lo), float(hi), int(steps))
            if head in ("list", "explicit"):
                return cls.explicit(float(v) for v in rest.split(",") if v.strip())
        except ValueError as exc:
            raise ValueError(f"bad grid {text!r}: {exc}") from None
        raise ValueError(f"bad grid {text!r}; use exhaustive, uniform:LO:HI:STEPS or list:V,...")

    def __str__(self) -> str:
        if self.kind == "uniform":
            return f"uniform:{self.lo:g}:{self.hi:g}:{self.steps}"
        if self.kind == "explicit":
            return "list:" + ",".join(f"{v:g}" for v in self.values)
        return "exhaustive"

    def realize(self, fmt: FxpFormat, rounding: RoundingMode) -> tuple[np.ndarray, int]:
        """Raw input codes in ``fmt`` and the number that had to be clamped."""
        if self.kind == "exhaustive":
            if fmt.word_bits <= EXHAUSTIVE_MAX_WORD:
                return all_raws(fmt), 0
            vals = raw_to_float(all_raws(Q8_4), Q8_4)
        elif self.kind == "uniform":
            vals = np.linspace(self.lo, self.hi, self.steps)
        else:
            vals = np.array(self.values, dtype=np.float64)
        return quantize_array(vals, fmt, rounding)


@dataclass(frozen=True)
class SweepSpec:
    function: SweepFunction
    formats: tuple[FxpFormat, ...]
    iterations: tuple[int, int]  # inclusive
    grid: InputGrid = field(default_factory=InputGrid)
    rounding: RoundingMode = RoundingMode.TRUNCATE
    seed: int = 42
    softmax_vectors: int = 200

    def __post_init__(self):
        lo, hi = self.iterations
        if not self.formats:
            raise ValueError("sweep needs at least one format")
        if lo < 1 or hi < lo:
            raise ValueError(f"bad iteration range {lo}..{hi}")
        if self.softmax_vectors < 1:
            raise ValueError("softmax_vectors must be >= 1")

    def iteration_counts(self) -> range:
        return range(self.iterations[0], self.iterations[1] + 1)

    def header(self) -> dict[str, str]:
        return {"function": self.function.value,
                "formats": ",".join(str(f) for f in self.formats),
                "iterations": f"{self.iterations[0]}..{self.iterations[1]}",
                "grid": str(self.grid), "rounding": self.rounding.value,
                "seed": str(self.seed), "softmax_vectors": str(self.softmax_vectors),
                "softmax_length": str(SOFTMAX_LENGTH)}


@dataclass(frozen=True)
class SweepRow:
    function: SweepFunction
    fmt: FxpFormat
    iterations: int
    metrics: ErrorMetrics
    clamped: int


def sweep_config(fmt: FxpFormat, n: int) -> RpeConfig:
    return RpeConfig(fmt=fmt, mac_stages=n, hyp_iterations=n, div_iterations=n)


_ORACLES = {
    SweepFunction.TANH: np.tanh,
    SweepFunction.SIGMOID: lambda x: 1.0 / (1.0 + np.exp(-x)),
    SweepFunction.GELU: lambda x: 0.5 * x * (1.0 + np.tanh(GELU_C2 * (x + GELU_C1 * x ** 3))),
    SweepFunction.SELU: lambda x: np.where(x > 0, SELU_LAMBDA * x,
                                           SELU_LAMBDA * SELU_ALPHA * np.expm1(x)),
    SweepFunction.SWISH: lambda x: x / (1.0 + np.exp(-x)),
    SweepFunction.EXP: np.exp,
}


def _mac_operands(spec: SweepSpec, fmt: FxpFormat):
    limit = (2 << fmt.frac_bits) - 1  # |w| < 2
    if spec.grid.kind == "exhaustive":
        xs, clamped = spec.grid.realize(fmt, spec.rounding)
        if fmt.word_bits <= EXHAUSTIVE_MAX_WORD:
            ws = np.arange(-limit, limit + 1, dtype=np.int64)
        else:
            ws = xs[np.abs(xs) <= limit]
    else:
        xs, clamped = spec.grid.realize(fmt, spec.rounding)
        over = np.abs(xs) > limit
        clamped += int(over.sum())
        ws = np.clip(xs, -limit, limit)
    x, w = np.meshgrid(xs, ws, indexing="ij")
    return x.ravel(), w.ravel(), clamped


def mac_products(x, w, fmt: FxpFormat, n: int) -> np.ndarray:
    """CORDIC products x*w (|w| < 2) as held in the never-saturating MAC accumulator."""
    acc = accumulator_format(fmt, [0])
    y, _ = mac_raw(x, w, 0, n, acc)
    return y


def _softmax_inputs(spec: SweepSpec, fmt: FxpFormat):
    codes, clamped = spec.grid.realize(fmt, spec.rounding)
    rng = np.random.default_rng(spec.seed)
    idx = rng.integers(0, codes.size, size=(spec.softmax_vectors, SOFTMAX_LENGTH))
    return codes[idx], clamped


def _evaluate(spec: SweepSpec, fmt: FxpFormat, n: int) -> SweepRow:
    fn = spec.function
    cfg = sweep_config(fmt, n)
    scale = float(fmt.one_raw)
    if fn is SweepFunction.MAC:
        x, w, clamped = _mac_operands(spec, fmt)
        out = mac_products(x, w, fmt, n) / scale
        ref = (x / scale) * (w / scale)
    elif fn is SweepFunction.SOFTMAX:
        rows, clamped = _softmax_inputs(spec, fmt)
        probs, _, _ = softmax_raw(rows, cfg)
        out = probs / scale
        real = rows / scale
        e = np.exp(real - real.max(axis=1, keepdims=True))
        ref = e / e.sum(axis=1, keepdims=True)
    else:
        a, clamped = spec.grid.realize(fmt, spec.rounding)
        if fn is SweepFunction.EXP:
            # keep e**a representable
            top = math.floor(math.log(float(fmt.max_value)) * scale)
            clamped += int((a > top).sum())
            a = np.minimum(a, top)
            out = exp_raw(a, fmt, n) / scale
        else:
            out = activate_raw(a, cfg, AfKind(fn.value)) / scale
        ref = _ORACLES[fn](a / scale)
    return SweepRow(fn, fmt, n, metrics(ref, out), clamped)


def _evaluate_args(args):
    return _evaluate(*args)


def pareto_sweep(spec: SweepSpec, jobs: int = 1) -> list[SweepRow]:
    """One row per (format, iterations), format-major. ``jobs`` only affects speed."""
    work = [(spec, fmt, n) for fmt in spec.formats for n in spec.iteration_counts()]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_evaluate_args, work))
    return [_evaluate(*w) for w in work]


def _num(v) -> str:
    return "" if v is None else format(v, ".9g")


def sweep_csv(rows: list[SweepRow], header: dict[str, str] | None = None) -> str:
    buf = io.StringIO()
    for key, value in (header or {}).items():
        buf.write(f"# {key}={value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        m = r.metrics
        writer.writerow([r.function.value, str(r.fmt), r.iterations, _num(m.mse), _num(m.mae),
                         _num(m.avg_rel_err), _num(m.std_paper), _num(m.std_conventional),
                         r.clamped, m.n])
    return buf.getvalue()


@dataclass(frozen=True)
class PlateauReport:
    maes: tuple[float, ...]
    first_iteration: int
    best_iteration: int  # n*, the first iteration reaching the minimum MAE
    worst_rise: float  # largest MAE(n+1)/MAE(n) over the sweep
    tail_spread: float  # largest relative MAE change beyond n*

    def is_monotone(self, jitter: float = 0.10) -> bool:
        return self.worst_rise <= 1.0 + jitter

    def settled_iteration(self, tol: float = 0.10) -> int:
        """First n after which more iterations cut MAE by at most ``tol``."""
        m = np.asarray(self.maes)
        for i in range(m.size):
            if m[i] <= (1.0 + tol) * m[i:].min():
                return self.first_iteration + i
        return self.first_iteration + m.size - 1

    def holds(self, max_iteration: int, tol: float = 0.10) -> bool:
        """MAE settles by ``max_iteration`` and later iterations move it by less than ``tol``."""
        n = self.settled_iteration(tol)
        m = np.asarray(self.maes)
        at = m[n - self.first_iteration]
        tail = m[n - self.first_iteration:]
        return n <= max_iteration and bool(np.all(np.abs(tail - at) <= tol * at))


def plateau(maes, first_iteration: int = 1) -> PlateauReport:
    """Where MAE stops improving along an iteration sweep."""
    m = np.asarray(maes, dtype=np.float64)
    best = int(np.argmin(m))
    rises = [m[i + 1] / m[i] if m[i] > 0 else (1.0 if m[i + 1] == 0 else math.inf)
             for i in range(m.size - 1)]
    tail = m[best:]
    spread = float(np.max(np.abs(tail - m[best])) / m[best]) if m[best] > 0 else (
        0.0 if not tail.any() else math.inf)
    return PlateauReport(tuple(float(v) for v in m), first_iteration,
                         first_iteration + best, max(rises, default=1.0), spread)


@dataclass(frozen=True)
class NormalizedMacMetrics:
    normalized_mean_error: float
    nmed: float
    mred: float
    nmax_ed: float
    normalizer: float
    n_samples: int


def mac_normalized_metrics(fmt: FxpFormat, iterations: int) -> NormalizedMacMetrics:
    """NME, NMED, MRED and NMaxED of the CORDIC multiplier, exhaustively.

    Every input code is paired with every weight code below 2 in magnitude.
    Distances are normalized by the largest exact product magnitude.
    """
    if fmt.word_bits > EXHAUSTIVE_MAX_WORD:
        raise ValueError(f"{fmt} too wide for an exhaustive sweep (max {EXHAUSTIVE_MAX_WORD} bits)")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    spec = SweepSpec(SweepFunction.MAC, (fmt,), (iterations, iterations))
    x, w, _ = _mac_operands(spec, fmt)
    scale = float(fmt.one_raw)
    out = mac_products(x, w, fmt, iterations) / scale
    exact = (x / scale) * (w / scale)
    err = out - exact
    dist = np.abs(err)
    norm = float(np.abs(exact).max())
    nz = exact != 0
    return NormalizedMacMetrics(
        normalized_mean_error=float(abs(err.mean()) / norm),
        nmed=float(dist.mean() / norm),
        mred=float(np.mean(dist[nz] / np.abs(exact[nz]))),
        nmax_ed=float(dist.max() / norm),
        normalizer=norm, n_samples=int(err.size))


PUBLISHED_MAC_METRICS = NormalizedMacMetrics(6.31e-5, 0.00783, 0.02675, 0.03131, 0.0, 0)
