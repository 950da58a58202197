"""The reconfigurable processing element (RPE).

A pipelined linear-CORDIC MAC stream followed by an activation stage built
from an iterative hyperbolic rotator and an iterative linear divider, plus
the control FSM and its cycle trace.

Activation datapath, all in the operand format:

* tanh and sigmoid work on |x| and reflect the result for negative inputs.
* |x| is split as k*ln2 + r; one hyperbolic rotation of r gives
  e**r = cosh r + sinh r and e**-r = cosh r - sinh r.
* tanh = (e**r - e**-r * 2**-2k) / (e**r + e**-r * 2**-2k), i.e. sinh/cosh
  scaled jointly by 2**-k.
* sigmoid = 1 / (1 + e**-r * 2**-k).
* The divider starts at index 1 (quotients lie in [0, 1]), so each
  iteration yields one quotient bit.
* softmax subtracts the row maximum, stores e**a_j in a FIFO summed on
  store, and then divides each entry by the sum.

Trace signals, in export order: hyp_select, Div_select, sel_sig/sof (1 when
the divider serves softmax, 0 for sigmoid), sel_tan, Relu/other (1 on the
ReLU bypass), sel_all (2-bit output mux: 0 bypass, 1 divider, 2 multiply
pass, 3 SELU scaler) and RPE_done.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .cordic import (divide_raw, exp_raw, hyperbolic_raw, mac_directions, mac_raw, prescale_shift,
                     reduce_ln2, scaled_shift)
from .fxp import (Q8_4, FxpFormat, FxpValue, RoundingMode, add, clip_raw, quantize, requantize,
                  shift_right, shift_right_each)

GELU_C1 = 0.044715
GELU_C2 = 0.7978845608
SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


class AfKind(Enum):
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"
    GELU = "gelu"
    SELU = "selu"
    SWISH = "swish"
    NONE = "none"

    @classmethod
    def parse(cls, text: str) -> "AfKind":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown activation {text!r}") from None


@dataclass(frozen=True)
class RpeConfig:
    fmt: FxpFormat = Q8_4
    mac_stages: int = 5
    hyp_iterations: int = 5
    div_iterations: int = 4
    af: AfKind = AfKind.RELU
    softmax_len: int = 1

    def __post_init__(self):
        if self.mac_stages < 1:
            raise ValueError("mac_stages must be >= 1")
        if self.hyp_iterations < 1 or self.div_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.softmax_len < 1:
            raise ValueError("softmax_len must be >= 1")
        if self.af not in (AfKind.RELU, AfKind.NONE) and self.fmt.int_bits < 2:
            raise ValueError(f"{self.fmt} has fewer than 2 integer bits; "
                             f"the {self.af.value} datapath needs range beyond ±2")

    def with_af(self, af: AfKind, softmax_len: int | None = None) -> "RpeConfig":
        return replace(self, af=af, softmax_len=softmax_len or self.softmax_len)


def accumulator_format(fmt: FxpFormat, prescale_k) -> FxpFormat:
    """Widened format in which a MAC stream can never overflow.

    A CORDIC product with a (pre-scaled) weight below 2**(k+1) is bounded by
    2**(k+1) times the input magnitude, so the stream plus bias is bounded by
    (1 + 2 * sum 2**k) input-sized words.
    """
    bound = 1 + 2 * sum(1 << int(k) for k in np.asarray(prescale_k).ravel())
    return fmt.widened((bound - 1).bit_length())


def af_cycles(cfg: RpeConfig, af: AfKind | None = None, n: int | None = None) -> int:
    af = cfg.af if af is None else af
    h, d, s = cfg.hyp_iterations, cfg.div_iterations, cfg.mac_stages
    if af is AfKind.SOFTMAX:
        n = cfg.softmax_len if n is None else n
        return n * h + n * d
    return {
        AfKind.RELU: 1,
        AfKind.NONE: 0,
        AfKind.TANH: h + d,
        AfKind.SIGMOID: h + d,
        AfKind.SELU: h + 2,
        AfKind.SWISH: h + d + s,
        AfKind.GELU: h + d + 4 * s,
    }[af]


def mac_cycles(length: int, cfg: RpeConfig) -> int:
    return length + cfg.mac_stages - 1


# ---------------------------------------------------------------------------
# activation datapath on raw arrays

def _const(value: float, fmt: FxpFormat) -> int:
    return quantize(value, fmt, RoundingMode.NEAREST_EVEN).raw


def _unit_divide(num, den, den_fmt: FxpFormat, cfg: RpeConfig):
    return divide_raw(num, den, den_fmt, cfg.div_iterations, first_index=1, out_fmt=cfg.fmt)


def _magnitude(a, fmt: FxpFormat):
    neg = a < 0
    return neg, np.where(neg, clip_raw(-a, fmt), a)


def tanh_raw(a, cfg: RpeConfig):
    fmt = cfg.fmt
    a = np.asarray(a, dtype=fmt.dtype)
    neg, u = _magnitude(a, fmt)
    k, r = reduce_ln2(u, fmt)
    c, s, _ = hyperbolic_raw(r, fmt, cfg.hyp_iterations)
    ep, em = clip_raw(c + s, fmt), clip_raw(c - s, fmt)
    em = shift_right_each(em, 2 * k)
    q = _unit_divide(clip_raw(ep - em, fmt), clip_raw(ep + em, fmt), fmt, cfg)
    return np.where(neg, -q, q)


def sigmoid_raw(a, cfg: RpeConfig):
    fmt = cfg.fmt
    a = np.asarray(a, dtype=fmt.dtype)
    one = fmt.one_raw
    neg, u = _magnitude(a, fmt)
    k, r = reduce_ln2(u, fmt)
    c, s, _ = hyperbolic_raw(r, fmt, cfg.hyp_iterations)
    e_neg = shift_right_each(clip_raw(c - s, fmt), k)
    den = clip_raw(one + e_neg, fmt)
    q = _unit_divide(np.full(den.shape, one, dtype=den.dtype), den, fmt, cfg)
    return np.where(neg, one - q, q)


def multiply_raw(a, b, cfg: RpeConfig):
    """One linear-CORDIC multiply pass: ``a`` on x, ``b`` on z (pre-scaled if needed).

    The y register carries guard bits and saturates once on writeback.
    """
    fmt = cfg.fmt
    wide = fmt.widened(fmt.int_bits + 2)
    y, _ = mac_raw(a, b, 0, cfg.mac_stages, wide, prescale=True)
    return clip_raw(y, fmt)


def gelu_raw(a, cfg: RpeConfig):
    fmt = cfg.fmt
    a = np.asarray(a, dtype=fmt.dtype)
    sq = multiply_raw(a, a, cfg)
    cubic = multiply_raw(sq, _const(GELU_C1 * GELU_C2, fmt), cfg)
    inner = multiply_raw(a, clip_raw(cubic + _const(GELU_C2, fmt), fmt), cfg)
    half = shift_right(clip_raw(tanh_raw(inner, cfg) + fmt.one_raw, fmt), 1)
    return multiply_raw(a, half, cfg)


def _constant_multiply(v, c_raw: int, fmt: FxpFormat):
    # hard-wired shift-add multiplier: exact product, truncated once
    return clip_raw(shift_right(v * c_raw, fmt.frac_bits), fmt)


def selu_raw(a, cfg: RpeConfig):
    fmt = cfg.fmt
    a = np.asarray(a, dtype=fmt.dtype)
    e = exp_raw(a, fmt, cfg.hyp_iterations)
    neg_branch = _constant_multiply(clip_raw(e - fmt.one_raw, fmt),
                                    _const(SELU_LAMBDA * SELU_ALPHA, fmt), fmt)
    pos_branch = _constant_multiply(a, _const(SELU_LAMBDA, fmt), fmt)
    return np.where(a > 0, pos_branch, neg_branch)


def swish_raw(a, cfg: RpeConfig):
    a = np.asarray(a, dtype=cfg.fmt.dtype)
    return multiply_raw(a, sigmoid_raw(a, cfg), cfg)


def relu_raw(a, cfg: RpeConfig):
    return np.maximum(np.asarray(a, dtype=cfg.fmt.dtype), 0)


_AF_RAW = {
    AfKind.RELU: relu_raw,
    AfKind.TANH: tanh_raw,
    AfKind.SIGMOID: sigmoid_raw,
    AfKind.GELU: gelu_raw,
    AfKind.SELU: selu_raw,
    AfKind.SWISH: swish_raw,
    AfKind.NONE: lambda a, cfg: np.asarray(a, dtype=cfg.fmt.dtype),
}


def activate_raw(a, cfg: RpeConfig, af: AfKind | None = None):
    af = cfg.af if af is None else af
    if af is AfKind.SOFTMAX:
        raise ValueError("softmax is vector-valued; use softmax_raw")
    return _AF_RAW[af](a, cfg)


def softmax_raw(rows, cfg: RpeConfig):
    """Row-wise softmax of a 2-D raw array. Returns (probs, sums, sum format)."""
    fmt = cfg.fmt
    rows = np.atleast_2d(np.asarray(rows, dtype=fmt.dtype))
    n = rows.shape[1]
    shifted = clip_raw(rows - rows.max(axis=1, keepdims=True), fmt)
    e = exp_raw(shifted, fmt, cfg.hyp_iterations)
    sum_fmt = fmt.widened(max(1, (n - 1).bit_length()))
    sums = e.astype(sum_fmt.dtype).sum(axis=1)
    if np.any(sums == 0):
        bad = [int(i) for i in np.flatnonzero(sums == 0)]
        raise ValueError(f"degenerate softmax: every exponential underflowed in rows {bad}")
    probs = _unit_divide(e.astype(sum_fmt.dtype), sums[:, None], sum_fmt, cfg)
    return probs, sums, sum_fmt


# ---------------------------------------------------------------------------
# scalar operations

def _check_fmt(values, fmt: FxpFormat):
    for v in values:
        if v.fmt != fmt:
            raise TypeError(f"value in {v.fmt}, configuration expects {fmt}")


def mac_stream(inputs, weights, bias: FxpValue, cfg: RpeConfig) -> tuple[FxpValue, int]:
    """Left fold of CORDIC products into a widened accumulator, requantized once.

    Each product is a ``cfg.mac_stages``-step linear rotation (one step per
    pipeline stage). Zero weights are skipped. Weights with |w| >= 2 take the
    pre-scaled path.
    """
    inputs, weights = list(inputs), list(weights)
    if not inputs or len(inputs) != len(weights):
        raise ValueError(f"need equal nonempty streams, got {len(inputs)} inputs "
                         f"and {len(weights)} weights")
    fmt = cfg.fmt
    _check_fmt(inputs + weights + [bias], fmt)
    w = np.array([v.raw for v in weights], dtype=fmt.dtype)
    k = prescale_shift(w, fmt.frac_bits)
    acc_fmt = accumulator_format(fmt, k)
    dirs = mac_directions(w, cfg.mac_stages, fmt.frac_bits, k)
    y = bias.raw
    sticky = bias.saturated
    for j, x in enumerate(inputs):
        sticky = sticky or x.saturated or weights[j].saturated
        kj = int(k[j])
        for i in range(cfg.mac_stages):
            d = int(dirs[i, j])
            if d:
                y, sat = acc_fmt.saturate(y + d * scaled_shift(x.raw, i - kj))
                sticky = sticky or sat
    raw, sat = fmt.saturate(y)
    return FxpValue(raw, fmt, sat or sticky), mac_cycles(len(inputs), cfg)


def mac_stream_raw(x, w, bias, cfg: RpeConfig):
    """Batched mac_stream over the last axis; bit-identical to the scalar fold."""
    fmt = cfg.fmt
    x = np.asarray(x, dtype=fmt.dtype)
    w = np.asarray(w, dtype=fmt.dtype)
    k = prescale_shift(w, fmt.frac_bits)
    dirs = mac_directions(w, cfg.mac_stages, fmt.frac_bits, k)
    acc = np.asarray(bias, dtype=object if fmt.word_bits > 40 else np.int64).copy()
    xs = x.astype(acc.dtype)
    for i in range(cfg.mac_stages):
        term = np.zeros(np.broadcast_shapes(x.shape, w.shape), dtype=acc.dtype)
        for kk in np.unique(k):
            term = np.where(k == kk, scaled_shift(xs, i - int(kk)), term)
        acc = acc + (dirs[i].astype(acc.dtype) * term).sum(axis=-1)
    return clip_raw(acc, fmt)


def activate(acc: FxpValue, cfg: RpeConfig) -> tuple[FxpValue, int]:
    if cfg.af is AfKind.SOFTMAX:
        raise ValueError("softmax is vector-valued; use softmax()")
    _check_fmt([acc], cfg.fmt)
    out = int(activate_raw(np.array([acc.raw], dtype=cfg.fmt.dtype), cfg)[0])
    return FxpValue(out, cfg.fmt, acc.saturated), af_cycles(cfg)


@dataclass
class SoftmaxFifo:
    """Exponentials queued for the division phase, summed as they are stored."""

    fmt: FxpFormat
    entries: list[FxpValue] = field(default_factory=list)
    running_sum: FxpValue | None = None

    def push(self, e: FxpValue):
        self.entries.append(e)
        wide = requantize(e, self.fmt)
        self.running_sum = wide if self.running_sum is None else add(self.running_sum, wide)

    def __len__(self) -> int:
        return len(self.entries)


def softmax(vec, cfg: RpeConfig) -> tuple[list[FxpValue], int]:
    vec = list(vec)
    if not vec:
        raise ValueError("softmax of an empty vector")
    fmt = cfg.fmt
    _check_fmt(vec, fmt)
    raw = np.array([v.raw for v in vec], dtype=fmt.dtype)
    shifted = clip_raw(raw - raw.max(), fmt)
    e = exp_raw(shifted, fmt, cfg.hyp_iterations)
    fifo = SoftmaxFifo(fmt.widened(max(1, (len(vec) - 1).bit_length())))
    for v in e:
        fifo.push(FxpValue(int(v), fmt))
    total = fifo.running_sum
    if total.raw == 0:
        under = [j for j, v in enumerate(fifo.entries) if v.raw == 0]
        raise ValueError(f"degenerate softmax: exponentials of inputs {under} underflowed to 0")
    num = np.array([v.raw for v in fifo.entries], dtype=fifo.fmt.dtype)
    probs = _unit_divide(num, total.raw, fifo.fmt, cfg)
    sticky = any(v.saturated for v in vec)
    return [FxpValue(int(p), fmt, sticky) for p in probs], af_cycles(cfg, AfKind.SOFTMAX, len(vec))


# ---------------------------------------------------------------------------
# control FSM and trace

class RpeFsmState(Enum):
    IDLE = "IDLE"
    INIT = "INIT"
    MAC_STREAM = "MAC_STREAM"
    HYP = "HYP"
    DIV = "DIV"
    SOFTMAX_DIV = "SOFTMAX_DIV"
    RELU = "RELU"
    AF_MUL = "AF_MUL"
    SCALE = "SCALE"
    DONE = "DONE"


_S = RpeFsmState
LEGAL_TRANSITIONS = frozenset({
    (_S.IDLE, _S.INIT), (_S.IDLE, _S.MAC_STREAM), (_S.INIT, _S.MAC_STREAM),
    (_S.MAC_STREAM, _S.HYP), (_S.MAC_STREAM, _S.RELU), (_S.MAC_STREAM, _S.AF_MUL),
    (_S.MAC_STREAM, _S.DONE),
    (_S.HYP, _S.DIV), (_S.HYP, _S.SOFTMAX_DIV), (_S.HYP, _S.SCALE),
    (_S.DIV, _S.DONE), (_S.DIV, _S.AF_MUL), (_S.AF_MUL, _S.HYP), (_S.AF_MUL, _S.DONE),
    (_S.SOFTMAX_DIV, _S.DONE), (_S.RELU, _S.DONE), (_S.SCALE, _S.DONE), (_S.DONE, _S.IDLE),
})
SIGNAL_ORDER = ("hyp_select", "Div_select", "sel_sig/sof", "sel_tan", "Relu/other", "sel_all",
                "RPE_done")
_OUTPUT_MUX = {AfKind.RELU: 0, AfKind.NONE: 0, AfKind.TANH: 1, AfKind.SIGMOID: 1,
               AfKind.SOFTMAX: 1, AfKind.GELU: 2, AfKind.SWISH: 2, AfKind.SELU: 3}


@dataclass(frozen=True)
class TraceRecord:
    cycle: int
    state: RpeFsmState
    hyp_select: int = 0
    div_select: int = 0
    sel_sig_sof: int = 0
    sel_tan: int = 0
    relu_other: int = 0
    sel_all: int = 0
    rpe_done: int = 0
    products: int = 0  # MAC results retired so far

    def signal_bits(self) -> str:
        return (f"{self.hyp_select}{self.div_select}{self.sel_sig_sof}{self.sel_tan}"
                f"{self.relu_other}{self.sel_all:02b}{self.rpe_done}")


@dataclass
class RpeTrace:
    records: list[TraceRecord]

    @property
    def busy_cycles(self) -> int:
        return sum(r.state not in (_S.IDLE, _S.DONE) for r in self.records)

    @property
    def first_output_cycle(self) -> int:
        """Cycle on which the activation result is available."""
        return next(r.cycle for r in self.records if r.rpe_done) - 1

    def state_sequence(self) -> list[RpeFsmState]:
        seq: list[RpeFsmState] = []
        for r in self.records:
            if not seq or seq[-1] is not r.state:
                seq.append(r.state)
        return seq

    def cycles_in(self, state: RpeFsmState) -> int:
        return sum(r.state is state for r in self.records)

    def violations(self) -> list[str]:
        problems = []
        cycles = [r.cycle for r in self.records]
        if any(b <= a for a, b in zip(cycles, cycles[1:])):
            problems.append("cycle numbers not strictly increasing")
        seq = self.state_sequence()
        if not seq or seq[0] is not _S.IDLE:
            problems.append("trace does not start in IDLE")
        if seq and seq[-1] is not _S.DONE:
            problems.append("trace does not end in DONE")
        for a, b in zip(seq, seq[1:]):
            if (a, b) not in LEGAL_TRANSITIONS:
                problems.append(f"illegal transition {a.value} -> {b.value}")
        done = sum(r.rpe_done for r in self.records)
        if done != 1:
            problems.append(f"RPE_done asserted {done} times")
        return problems

    def is_legal(self) -> bool:
        return not self.violations()

    def to_text(self) -> str:
        lines = ["# cycle,state,signal_bits  signals: hyp_select,Div_select,sel_sig/sof,sel_tan,"
                 "Relu/other,sel_all[1:0],RPE_done"]
        lines += [f"{r.cycle},{r.state.value},{r.signal_bits()}" for r in self.records]
        return "\n".join(lines) + "\n"


def _af_phases(cfg: RpeConfig, n: int) -> list[tuple[RpeFsmState, int]]:
    h, d, s = cfg.hyp_iterations, cfg.div_iterations, cfg.mac_stages
    return {
        AfKind.RELU: [(_S.RELU, 1)],
        AfKind.NONE: [],
        AfKind.TANH: [(_S.HYP, h), (_S.DIV, d)],
        AfKind.SIGMOID: [(_S.HYP, h), (_S.DIV, d)],
        AfKind.SOFTMAX: [(_S.HYP, n * h), (_S.SOFTMAX_DIV, n * d)],
        AfKind.GELU: [(_S.AF_MUL, 3 * s), (_S.HYP, h), (_S.DIV, d), (_S.AF_MUL, s)],
        AfKind.SWISH: [(_S.HYP, h), (_S.DIV, d), (_S.AF_MUL, s)],
        AfKind.SELU: [(_S.HYP, h), (_S.SCALE, 2)],
    }[cfg.af]


def build_trace(cfg: RpeConfig, stream_len: int, n_elements: int = 1) -> RpeTrace:
    """Cycle trace of one program. Depends only on the configuration and lengths."""
    af = cfg.af
    records = [TraceRecord(0, _S.IDLE)]
    cycle = 0
    for _ in range(cfg.mac_stages - 1):
        cycle += 1
        records.append(TraceRecord(cycle, _S.INIT))
    for p in range(n_elements * stream_len):
        cycle += 1
        records.append(TraceRecord(cycle, _S.MAC_STREAM, products=p + 1))
    retired = n_elements * stream_len
    mux = _OUTPUT_MUX[af]
    for state, count in _af_phases(cfg, n_elements):
        for _ in range(count):
            cycle += 1
            records.append(TraceRecord(
                cycle, state,
                hyp_select=int(state is _S.HYP),
                div_select=int(state in (_S.DIV, _S.SOFTMAX_DIV)),
                sel_sig_sof=int(af is AfKind.SOFTMAX),
                sel_tan=int(af in (AfKind.TANH, AfKind.GELU)),
                relu_other=int(state is _S.RELU),
                sel_all=mux, products=retired))
    records.append(TraceRecord(cycle + 1, _S.DONE, sel_all=mux, rpe_done=1, products=retired))
    return RpeTrace(records)


def run_program(inputs, weights, bias, cfg: RpeConfig):
    """Run one neuron program (MAC stream plus activation) through the FSM.

    For softmax programs ``inputs``, ``weights`` and ``bias`` hold one entry
    per output element, and the result is a list of probabilities.
    """
    if cfg.af is AfKind.SOFTMAX:
        rows_x, rows_w, biases = list(inputs), list(weights), list(bias)
        n = len(rows_x)
        if n != cfg.softmax_len or len(rows_w) != n or len(biases) != n:
            raise ValueError(f"softmax program needs {cfg.softmax_len} element streams, "
                             f"got {n} inputs, {len(rows_w)} weights, {len(biases)} biases")
        lengths = {len(r) for r in rows_x} | {len(r) for r in rows_w}
        if len(lengths) != 1:
            raise ValueError("softmax element streams must share one length")
        accs = [mac_stream(x, w, b, cfg)[0] for x, w, b in zip(rows_x, rows_w, biases)]
        out, af_c = softmax(accs, cfg)
        length = lengths.pop()
        mac_c = n * length + cfg.mac_stages - 1
    else:
        inputs, weights = list(inputs), list(weights)
        n, length = 1, len(inputs)
        acc, mac_c = mac_stream(inputs, weights, bias, cfg)
        out, af_c = activate(acc, cfg)
    trace = build_trace(cfg, length, n)
    assert trace.busy_cycles == mac_c + af_c
    return out, trace
