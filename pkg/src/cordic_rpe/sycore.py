"""Output-stationary systolic array of RPEs and its layer scheduler.

The array is rows x cols RPEs grouped into square sub-blocks. Each active
RPE owns one output value and receives one product per cycle. A conv layer
maps its output plane onto the array once per copy, and several output
channels run side by side when the plane is small. FC layers spread their
outputs over a power-of-four region of RPEs. Pool and flatten run on the
host and take no array cycles.
"""
from __future__ import annotations

import csv
import heapq
import io
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np

from .rpe import AfKind, RpeConfig

SIMULATION_BUDGET = 10_000_000


class LayerKind(Enum):
    CONV = "conv"
    FC = "fc"
    POOL = "pool"
    FLATTEN = "flatten"


@dataclass(frozen=True)
class LayerSpec:
    """One network layer. ``h`` and ``w`` are the input spatial size."""

    name: str
    kind: LayerKind
    k: int = 1
    cin: int = 1
    cout: int = 1
    h: int = 1
    w: int = 1
    stride: int = 1
    pad: int = 0
    af: AfKind = AfKind.NONE

    def __post_init__(self):
        for attr in ("k", "cin", "cout", "h", "w", "stride"):
            if getattr(self, attr) < 1:
                raise ValueError(f"layer {self.name}: {attr} must be >= 1")
        if self.pad < 0:
            raise ValueError(f"layer {self.name}: pad must be >= 0")
        if self.kind in (LayerKind.CONV, LayerKind.POOL) and (self.out_h < 1 or self.out_w < 1):
            raise ValueError(f"layer {self.name}: kernel {self.k} does not fit a "
                             f"{self.h}x{self.w} input with pad {self.pad}")

    @property
    def out_h(self) -> int:
        if self.kind in (LayerKind.FC, LayerKind.FLATTEN):
            return 1
        return (self.h + 2 * self.pad - self.k) // self.stride + 1

    @property
    def out_w(self) -> int:
        if self.kind in (LayerKind.FC, LayerKind.FLATTEN):
            return 1
        return (self.w + 2 * self.pad - self.k) // self.stride + 1

    @property
    def on_array(self) -> bool:
        return self.kind in (LayerKind.CONV, LayerKind.FC)

    @property
    def reduction_len(self) -> int:
        """Products accumulated per output value."""
        if self.kind is LayerKind.CONV:
            return self.k * self.k * self.cin
        if self.kind is LayerKind.FC:
            return self.cin
        return 0

    @property
    def outputs(self) -> int:
        if self.kind is LayerKind.CONV:
            return self.out_h * self.out_w * self.cout
        if self.kind is LayerKind.FC:
            return self.cout
        return 0

    @property
    def macs(self) -> int:
        return self.reduction_len * self.outputs

    @property
    def kmac_ops(self) -> int:
        """MAC count in the K-MAC column sense: K*K*Cin*Cout for conv, Cout for fc."""
        if self.kind is LayerKind.CONV:
            return self.k * self.k * self.cin * self.cout
        if self.kind is LayerKind.FC:
            return self.cout
        return 0

    def describe(self) -> str:
        if self.kind is LayerKind.CONV:
            return f"({self.k}x{self.k})x{self.cin}x{self.cout}x({self.out_h}x{self.out_w})"
        if self.kind is LayerKind.FC:
            return f"{self.cin}x{self.cout}"
        if self.kind is LayerKind.POOL:
            return f"max-pool ({self.k}x{self.k}) s={self.stride}"
        return "-"


@dataclass(frozen=True)
class ArrayConfig:
    rows: int = 32
    cols: int = 32
    subblock_rows: int = 4
    subblock_cols: int = 4
    rpe: RpeConfig = field(default_factory=RpeConfig)

    def __post_init__(self):
        if min(self.rows, self.cols, self.subblock_rows, self.subblock_cols) < 1:
            raise ValueError("array and sub-block dimensions must be >= 1")
        if self.rows % self.subblock_rows or self.cols % self.subblock_cols:
            raise ValueError(f"{self.rows}x{self.cols} array is not divisible into "
                             f"{self.subblock_rows}x{self.subblock_cols} sub-blocks")

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def subblock_size(self) -> int:
        return self.subblock_rows * self.subblock_cols

    @property
    def n_subblocks(self) -> int:
        return self.size // self.subblock_size

    def subblock_of(self, rpe: np.ndarray) -> np.ndarray:
        """Sub-block index of row-major RPE ids."""
        r, c = np.divmod(np.asarray(rpe), self.cols)
        per_row = self.cols // self.subblock_cols
        return (r // self.subblock_rows) * per_row + c // self.subblock_cols


@dataclass(frozen=True)
class PruningSpec:
    """Fraction of weights zeroed, as an exact rational."""

    fraction: Fraction = Fraction(0)
    label: str = "0"
    granularity: str = "weight-block"

    def __post_init__(self):
        if not 0 <= self.fraction < 1:
            raise ValueError(f"pruned fraction {self.fraction} outside [0, 1)")

    @classmethod
    def parse(cls, text: str) -> "PruningSpec":
        """``a:b`` prunes a of every b weights, ``p%`` prunes p percent, a bare number is a fraction."""
        t = text.strip()
        try:
            if ":" in t:
                a, b = t.split(":")
                frac = Fraction(int(a), int(b))
            elif t.endswith("%"):
                frac = Fraction(t[:-1]) / 100
            else:
                frac = Fraction(t)
        except (ValueError, ZeroDivisionError):
            raise ValueError(f"bad pruning spec {text!r}; use a:b, p% or a fraction") from None
        return cls(frac, t)

    def kept(self, n: int) -> int:
        """Weights surviving out of n: ceil(n * (1 - fraction))."""
        return math.ceil(n * (1 - self.fraction))


NO_PRUNING = PruningSpec()


@dataclass(frozen=True)
class ScheduleEntry:
    layer: LayerSpec
    mapped_grid: tuple[int, int] | None
    kmac_ops: int
    op_cycles: int
    utilization_pct: float | None
    occupancy_pct: float | None  # active RPEs over array RPEs, averaged over passes
    parallel_copies: int
    pruned_fraction: Fraction
    macs: int  # scheduled, after pruning
    passes: int
    active_rpes: int  # RPEs busy in a full pass
    calibration: str = ""

    @property
    def host(self) -> bool:
        return not self.layer.on_array

    def grid_label(self) -> str:
        if self.mapped_grid is None:
            return "-"
        m, n = self.mapped_grid
        return str(m * n) if self.layer.kind is LayerKind.FC else f"{m}x{n}"


CALIBRATION_SUBBLOCK = ("tile smaller than a sub-block, copies capped at one per sub-block: "
                        "utilization = P/(S-P) x used sub-blocks/all sub-blocks")
CALIBRATION_FC = "fc region underfilled: utilization = ceil(occupancy percent)"


def _power_of_four_region(n: int, array: ArrayConfig) -> tuple[int, int]:
    side = 1
    while side * side < n and side * 2 <= min(array.rows, array.cols):
        side *= 2
    if side * side >= n:
        return side, side
    return array.rows, array.cols


def _conv_tiling(layer: LayerSpec, array: ArrayConfig):
    """(copies, strips, rows per strip, sub-block capped) for a conv layer."""
    oh, ow = layer.out_h, layer.out_w
    plane = oh * ow
    if plane <= array.size:
        by_space = array.size // plane
        copies = min(by_space, layer.cout)
        capped = False
        if plane < array.subblock_size and copies > array.n_subblocks:
            copies = array.n_subblocks
            capped = True
        return copies, 1, oh, capped
    if ow <= array.size:
        rows_per_strip = array.size // ow
        return 1, math.ceil(oh / rows_per_strip), rows_per_strip, False
    # a single output row wider than the array: split rows into array-sized runs
    return 1, oh * math.ceil(ow / array.size), 1, False


def map_layer(layer: LayerSpec, array: ArrayConfig = ArrayConfig(),
              pruning: PruningSpec = NO_PRUNING) -> ScheduleEntry:
    """Place one layer on the array and count its cycles."""
    if not layer.on_array:
        return ScheduleEntry(layer, None, 0, 0, None, None, 0, pruning.fraction, 0, 0, 0,
                             "host-delegated")
    workload = pruning.kept(layer.reduction_len)
    if layer.kind is LayerKind.FC:
        grid = _power_of_four_region(layer.cout, array)
        region = grid[0] * grid[1]
        passes = math.ceil(layer.cout / region)
        occupancy = 100.0 * layer.cout / (passes * region)
        util = float(math.ceil(round(occupancy, 9)))
        calib = CALIBRATION_FC if util != occupancy else ""
        return ScheduleEntry(layer, grid, layer.kmac_ops, workload * passes, min(util, 100.0),
                             occupancy, 1, pruning.fraction, workload * layer.outputs, passes,
                             min(layer.cout, region), calib)
    copies, strips, strip_rows, capped = _conv_tiling(layer, array)
    plane = layer.out_h * layer.out_w
    groups = math.ceil(layer.cout / copies)
    passes = groups * strips
    if strips == 1:
        grid = (layer.out_h, layer.out_w)
        active = plane * copies
    else:
        grid = (min(strip_rows, layer.out_h), min(layer.out_w, array.size))
        active = grid[0] * grid[1]
    # average over passes of active RPEs / array RPEs
    occupancy = 100.0 * plane * layer.cout / (passes * array.size)
    if capped:
        per_block = plane / (array.subblock_size - plane)
        util = 100.0 * per_block * copies / array.n_subblocks
        calib = CALIBRATION_SUBBLOCK
    else:
        util, calib = occupancy, ""
    return ScheduleEntry(layer, grid, layer.kmac_ops, workload * passes, min(util, 100.0),
                         occupancy, copies, pruning.fraction, workload * layer.outputs, passes,
                         active, calib)


@dataclass
class ScheduleReport:
    entries: list[ScheduleEntry]
    array: ArrayConfig
    pruning: PruningSpec
    baseline_op_cycles: int
    baseline_macs: int

    def array_entries(self) -> list[ScheduleEntry]:
        return [e for e in self.entries if not e.host]

    @property
    def total_op_cycles(self) -> int:
        return sum(e.op_cycles for e in self.entries)

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def mean_utilization(self) -> float:
        """Unweighted mean over array layers (the per-layer average)."""
        es = self.array_entries()
        return sum(e.utilization_pct for e in es) / len(es)

    @property
    def weighted_utilization(self) -> float:
        """MAC-weighted mean over array layers."""
        es = self.array_entries()
        total = sum(e.macs for e in es)
        return sum(e.utilization_pct * e.macs for e in es) / total

    @property
    def mac_ratio(self) -> Fraction:
        return Fraction(self.total_macs, self.baseline_macs)

    @property
    def cycle_ratio(self) -> float:
        return self.baseline_op_cycles / self.total_op_cycles

    def to_dict(self) -> dict:
        rows = []
        for e in self.entries:
            lay = e.layer
            rows.append({
                "layer": lay.name, "kind": lay.kind.value, "spec": lay.describe(),
                "host": e.host, "mapped_grid": list(e.mapped_grid) if e.mapped_grid else None,
                "kmac_ops": e.kmac_ops, "op_cycles": e.op_cycles,
                "utilization_pct": e.utilization_pct, "occupancy_pct": e.occupancy_pct,
                "parallel_copies": e.parallel_copies, "passes": e.passes,
                "macs": e.macs, "pruned_fraction": str(e.pruned_fraction),
                "calibration": e.calibration,
            })
        a = self.array
        return {
            "array": {"rows": a.rows, "cols": a.cols, "subblock": [a.subblock_rows, a.subblock_cols],
                      "mac_stages": a.rpe.mac_stages},
            "pruning": {"spec": self.pruning.label, "fraction": str(self.pruning.fraction),
                        "granularity": self.pruning.granularity},
            "layers": rows,
            "totals": {
                "op_cycles": self.total_op_cycles, "macs": self.total_macs,
                "utilization_mean_pct": self.mean_utilization,
                "utilization_mac_weighted_pct": self.weighted_utilization,
                "baseline_op_cycles": self.baseline_op_cycles,
                "baseline_macs": self.baseline_macs,
                "mac_ratio": str(self.mac_ratio), "cycle_speedup": self.cycle_ratio,
            },
            "calibration_rules": [CALIBRATION_SUBBLOCK, CALIBRATION_FC],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "spec", "sycore", "kmac_ops", "op_cycles", "utilization_pct",
                    "occupancy_pct", "parallel_copies", "macs"])
        for e in self.entries:
            util = "-" if e.utilization_pct is None else f"{e.utilization_pct:.2f}"
            occ = "-" if e.occupancy_pct is None else f"{e.occupancy_pct:.2f}"
            w.writerow([e.layer.name, e.layer.describe(), e.grid_label(),
                        e.kmac_ops if not e.host else "-", e.op_cycles, util, occ,
                        e.parallel_copies, e.macs])
        w.writerow(["total", "", "", "", self.total_op_cycles, f"{self.mean_utilization:.2f}",
                    "", "", self.total_macs])
        return buf.getvalue()


def schedule_network(layers: list[LayerSpec], array: ArrayConfig = ArrayConfig(),
                     pruning: PruningSpec | None = None) -> ScheduleReport:
    if not layers:
        raise ValueError("empty network")
    if not any(l.on_array for l in layers):
        raise ValueError("network has no conv or fc layer to schedule")
    pruning = pruning or NO_PRUNING
    entries = [map_layer(l, array, pruning) for l in layers]
    base = entries if pruning.fraction == 0 else [map_layer(l, array) for l in layers]
    return ScheduleReport(entries, array, pruning,
                          sum(e.op_cycles for e in base), sum(e.macs for e in base))


# ---------------------------------------------------------------------------
# network description files

class NetworkFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<network>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


_FIELD_RE = re.compile(r"^([A-Za-z_]+)=(\S+)$")
_FIELDS = {"k": "k", "cin": "cin", "cout": "cout", "h": "h", "w": "w", "stride": "stride",
           "pad": "pad", "af": "af"}


def parse_network(text: str, path: str | None = None) -> list[LayerSpec]:
    """Parse the line format ``NAME KIND key=value ...``; ``#`` starts a comment.

    Keys: K, Cin, Cout, H, W (input size), stride, pad, af. Pool layers and
    flatten may omit shapes; they inherit them from the previous layer.
    """
    layers: list[LayerSpec] = []
    prev: LayerSpec | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise NetworkFormatError(f"expected 'NAME KIND key=value ...', got {line!r}",
                                     lineno, path)
        name, kind_text = parts[0], parts[1].lower()
        try:
            kind = LayerKind(kind_text)
        except ValueError:
            raise NetworkFormatError(f"unknown layer kind {parts[1]!r}", lineno, path) from None
        kw: dict = {}
        for tok in parts[2:]:
            m = _FIELD_RE.match(tok)
            key = _FIELDS.get(m.group(1).lower()) if m else None
            if key is None:
                raise NetworkFormatError(f"bad field {tok!r}", lineno, path)
            try:
                kw[key] = AfKind.parse(m.group(2)) if key == "af" else int(m.group(2))
            except ValueError as exc:
                raise NetworkFormatError(str(exc), lineno, path) from None
        if kind in (LayerKind.POOL, LayerKind.FLATTEN) and prev is not None:
            kw.setdefault("h", prev.out_h)
            kw.setdefault("w", prev.out_w)
            kw.setdefault("cin", prev.cout)
            kw.setdefault("cout", kw["cin"])
        if kind is LayerKind.POOL:
            kw.setdefault("k", 2)
            kw.setdefault("stride", kw["k"])
        missing = {LayerKind.CONV: ("k", "cin", "cout", "h", "w"),
                   LayerKind.FC: ("cin", "cout")}.get(kind, ())
        absent = [k for k in missing if k not in kw]
        if absent:
            raise NetworkFormatError(f"{kind.value} layer {name} needs {', '.join(absent)}",
                                     lineno, path)
        try:
            layer = LayerSpec(name, kind, **kw)
        except ValueError as exc:
            raise NetworkFormatError(str(exc), lineno, path) from None
        layers.append(layer)
        prev = layer
    if not layers:
        raise NetworkFormatError("no layers found", None, path)
    return layers


def load_network(path) -> list[LayerSpec]:
    p = Path(path)
    return parse_network(p.read_text(), str(p))


# ---------------------------------------------------------------------------
# event-driven cross-check

@dataclass
class SimulationResult:
    measured_cycles: int
    analytic_cycles: int
    active_histogram: np.ndarray  # active RPEs per cycle
    subblock_events: np.ndarray  # stream starts per sub-block
    products_issued: int

    @property
    def overhead(self) -> int:
        return self.measured_cycles - self.analytic_cycles


def _assignments(layer: LayerSpec, array: ArrayConfig, entry: ScheduleEntry):
    """Yield (pass index, RPE ids) for every pass of the mapping."""
    if layer.kind is LayerKind.FC:
        region = entry.mapped_grid[0] * entry.mapped_grid[1]
        side = entry.mapped_grid[1]
        for p in range(entry.passes):
            n = min(region, layer.cout - p * region)
            local = np.arange(n)
            yield p, (local // side) * array.cols + local % side
        return
    copies, strips, strip_rows, capped = _conv_tiling(layer, array)
    oh, ow = layer.out_h, layer.out_w
    p = 0
    for group in range(math.ceil(layer.cout / copies)):
        n_copies = min(copies, layer.cout - group * copies)
        for strip in range(strips):
            if strips == 1:
                pixels = oh * ow
            elif ow <= array.size:
                pixels = min(strip_rows, oh - strip * strip_rows) * ow
            else:
                pixels = min(array.size, ow - (strip % math.ceil(ow / array.size)) * array.size)
            local = np.arange(pixels)
            if capped:
                # one copy per sub-block
                per_row = array.cols // array.subblock_cols
                ids = []
                for c in range(n_copies):
                    br, bc = divmod(c, per_row)
                    r = br * array.subblock_rows + local // array.subblock_cols
                    col = bc * array.subblock_cols + local % array.subblock_cols
                    ids.append(r * array.cols + col)
                yield p, np.concatenate(ids)
            else:
                yield p, np.arange(n_copies * pixels)
            p += 1


def simulate_cycles(layer: LayerSpec, array: ArrayConfig = ArrayConfig(),
                    pruning: PruningSpec = NO_PRUNING,
                    budget: int = SIMULATION_BUDGET) -> SimulationResult:
    """Replay the mapping with one virtual RPE per mapped output.

    Each RPE issues one product per cycle, starts its next stream as soon
    as the previous one has issued (the accumulator switches channel
    without draining), and drains ``mac_stages - 1`` cycles after its last
    stream.
    """
    if not layer.on_array:
        raise ValueError(f"layer {layer.name} runs on the host; nothing to simulate")
    if layer.macs > budget:
        raise ValueError(f"layer {layer.name} has {layer.macs} MAC events, over the "
                         f"simulation budget of {budget}")
    entry = map_layer(layer, array, pruning)
    length = pruning.kept(layer.reduction_len)
    fill = array.rpe.mac_stages - 1
    queues: dict[int, int] = {}
    for _, ids in _assignments(layer, array, entry):
        for rpe in ids.tolist():
            queues[rpe] = queues.get(rpe, 0) + 1
    # events: (cycle, rpe) when an RPE is free to start its next stream
    events = [(0, rpe) for rpe in sorted(queues)]
    heapq.heapify(events)
    finish = 0
    diff: dict[int, int] = {}
    starts = np.zeros(array.n_subblocks, dtype=np.int64)
    block = dict(zip(sorted(queues), array.subblock_of(np.array(sorted(queues))).tolist()))
    issued = 0
    while events:
        t, rpe = heapq.heappop(events)
        queues[rpe] -= 1
        starts[block[rpe]] += 1
        issued += length
        end = t + length
        if queues[rpe]:
            heapq.heappush(events, (end, rpe))
        else:
            end += fill
        diff[t] = diff.get(t, 0) + 1
        diff[end] = diff.get(end, 0) - 1
        finish = max(finish, end)
    hist = np.zeros(finish + 1, dtype=np.int64)
    for t, d in diff.items():
        hist[t] += d
    hist = np.cumsum(hist)[:finish]
    return SimulationResult(finish, entry.op_cycles, hist, starts, issued)
