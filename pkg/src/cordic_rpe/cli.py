"""Command-line front end: ``cordic-rpe <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 input-format error, 4 numeric or
range error.
"""
from __future__ import annotations

import argparse
import json
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import analysis, netrun, rpe, sycore
from .fxp import FxpFormat, FxpValue, RoundingMode, quantize, quantize_array

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4


class InputFormatError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _arg(parse):
    """Wrap a parser so argparse reports errors against the flag."""
    def convert(text):
        try:
            return parse(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    convert.__name__ = getattr(parse, "__name__", "value")
    return convert


def _formats(text: str) -> tuple[FxpFormat, ...]:
    return tuple(FxpFormat.parse(t) for t in text.split(",") if t.strip())


def _iter_range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition("..")
    lo_i = int(lo)
    hi_i = int(hi) if sep else lo_i
    if lo_i < 1 or hi_i < lo_i:
        raise ValueError(f"bad iteration range {text!r}; use N or A..B with 1 <= A <= B")
    return lo_i, hi_i


def _dims(text: str) -> tuple[int, int]:
    a, sep, b = text.lower().partition("x")
    if not sep:
        raise ValueError(f"expected RxC, got {text!r}")
    return int(a), int(b)


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise ValueError(f"must be >= 1, got {v}")
    return v


def _write(text: str, out: str | None):
    if out and out != "-":
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _header_lines(cfg: dict) -> str:
    return "".join(f"# {k}={v}\n" for k, v in cfg.items())


# ---------------------------------------------------------------------------
# commands

def cmd_pareto(args) -> int:
    spec = analysis.SweepSpec(
        function=analysis.SweepFunction.parse(args.fn), formats=args.formats,
        iterations=args.iters, grid=args.grid, rounding=args.rounding, seed=args.seed,
        softmax_vectors=args.softmax_vectors)
    rows = analysis.pareto_sweep(spec, jobs=args.jobs)
    header = {"command": "pareto", "version": _version(), **spec.header()}
    _write(analysis.sweep_csv(rows, header), args.out)
    return 0


def _rpe_config(args, af=rpe.AfKind.RELU, softmax_len=1) -> rpe.RpeConfig:
    hyp = args.hyp if args.hyp is not None else args.iters
    div = args.div if args.div is not None else max(1, args.iters - 1)
    return rpe.RpeConfig(fmt=args.format, mac_stages=args.iters, hyp_iterations=hyp,
                         div_iterations=div, af=af, softmax_len=softmax_len)


def cmd_af_eval(args) -> int:
    af = rpe.AfKind.parse(args.fn)
    values = args.x
    fmt = args.format
    cfg = _rpe_config(args, af, softmax_len=len(values))
    inputs = [quantize(v, fmt, args.rounding) for v in values]
    print(_header_lines({"command": "af-eval", "function": af.value, "format": fmt,
                         "mac_stages": cfg.mac_stages, "hyp_iterations": cfg.hyp_iterations,
                         "div_iterations": cfg.div_iterations,
                         "rounding": args.rounding.value}), end="")
    print("x,output,reference,abs_error,cycles")
    real = np.array([float(v) for v in inputs])
    if af is rpe.AfKind.SOFTMAX:
        outs, cycles = rpe.softmax(inputs, cfg)
        e = np.exp(real - real.max())
        refs = e / e.sum()
    else:
        outs, refs = [], []
        cycles = rpe.af_cycles(cfg)
        for v in inputs:
            outs.append(rpe.activate(v, cfg)[0])
        refs = netrun._reference_af(real, af)
    for v, o, r in zip(inputs, outs, refs):
        print(f"{float(v):.9g},{float(o):.9g},{float(r):.9g},{abs(float(o) - r):.9g},{cycles}")
    return 0


def cmd_mac_eval(args) -> int:
    fmt = args.format
    if args.x is not None or args.w is not None:
        if args.x is None or args.w is None or len(args.x) != len(args.w):
            raise argparse.ArgumentTypeError("--x and --w must list the same number of values")
        cfg = rpe.RpeConfig(fmt=fmt, mac_stages=args.iters)
        xs = [quantize(v, fmt, args.rounding) for v in args.x]
        ws = [quantize(v, fmt, args.rounding) for v in args.w]
        bias = quantize(args.bias, fmt, args.rounding)
        out, cycles = rpe.mac_stream(xs, ws, bias, cfg)
        exact = float(bias) + sum(float(a) * float(b) for a, b in zip(xs, ws))
        print(_header_lines({"command": "mac-eval", "format": fmt, "mac_stages": args.iters}), end="")
        print(f"result={float(out):.9g} exact={exact:.9g} error={float(out) - exact:.9g} "
              f"cycles={cycles} saturated={int(out.saturated)}")
        return 0
    m = analysis.mac_normalized_metrics(fmt, args.iters)
    p = analysis.PUBLISHED_MAC_METRICS
    print(_header_lines({"command": "mac-eval", "format": fmt, "iterations": args.iters,
                         "domain": "all inputs x all weights with |w| < 2, bias 0",
                         "normalizer": f"{m.normalizer:g}"}), end="")
    print("metric,value,published")
    for name, v, ref in (("nme", m.normalized_mean_error, p.normalized_mean_error),
                         ("nmed", m.nmed, p.nmed), ("mred", m.mred, p.mred),
                         ("nmaxed", m.nmax_ed, p.nmax_ed)):
        print(f"{name},{v:.9g},{ref:.9g}")
    return 0


def _load_network(path: str) -> list[sycore.LayerSpec]:
    try:
        return sycore.load_network(path)
    except FileNotFoundError:
        raise InputFormatError(f"network file not found: {path}") from None
    except sycore.NetworkFormatError as exc:
        raise InputFormatError(str(exc)) from None


def _array(args) -> sycore.ArrayConfig:
    rows, cols = args.array
    sr, sc = args.subblock
    return sycore.ArrayConfig(rows, cols, sr, sc, rpe.RpeConfig(mac_stages=args.mac_stages))


def cmd_schedule(args) -> int:
    layers = _load_network(args.network)
    array = _array(args)
    report = sycore.schedule_network(layers, array, args.prune)
    header = {"command": "schedule", "network": args.network,
              "array": f"{array.rows}x{array.cols}",
              "subblock": f"{array.subblock_rows}x{array.subblock_cols}",
              "prune": args.prune.label if args.prune else "0",
              "utilization_mac_weighted": f"{report.weighted_utilization:.2f}",
              "mac_ratio": str(report.mac_ratio), "cycle_speedup": f"{report.cycle_ratio:.4f}"}
    _write(_header_lines(header) + report.to_csv(), args.out)
    if args.json:
        doc = report.to_dict()
        doc["config"] = header
        Path(args.json).write_text(json.dumps(doc, indent=2) + "\n")
    return 0


def cmd_simulate(args) -> int:
    layers = [l for l in _load_network(args.network) if l.on_array]
    if args.layer:
        wanted = set(args.layer)
        missing = wanted - {l.name for l in layers}
        if missing:
            raise InputFormatError(f"no array layer named {', '.join(sorted(missing))} "
                                   f"in {args.network}")
        layers = [l for l in layers if l.name in wanted]
    array = _array(args)
    print(_header_lines({"command": "simulate", "network": args.network,
                         "array": f"{array.rows}x{array.cols}", "mac_stages": args.mac_stages,
                         "prune": args.prune.label if args.prune else "0"}), end="")
    print("layer,analytic_cycles,measured_cycles,overhead,peak_active_rpes,active_subblocks")
    prune = args.prune or sycore.NO_PRUNING
    for layer in layers:
        res = sycore.simulate_cycles(layer, array, prune, budget=args.budget)
        print(f"{layer.name},{res.analytic_cycles},{res.measured_cycles},{res.overhead},"
              f"{int(res.active_histogram.max(initial=0))},{int((res.subblock_events > 0).sum())}")
    return 0


def cmd_infer(args) -> int:
    try:
        model = netrun.load_model(args.model)
        images, labels = netrun.load_mnist(*args.data)
    except FileNotFoundError as exc:
        raise InputFormatError(str(exc)) from None
    if args.prune:
        model = netrun.prune_model(model, args.prune)
    if args.limit and args.limit < len(images):
        idx = np.sort(np.random.default_rng(args.seed).choice(len(images), args.limit, replace=False))
        images, labels = images[idx], labels[idx]
    cfg = _rpe_config(args)
    _, report = netrun.infer(model, images, labels, engine=args.engine, cfg=cfg,
                             rounding=args.rounding, batch_size=args.batch_size, jobs=args.jobs)
    report.config.update({"seed": args.seed, "limit": args.limit or len(images),
                          "data": [str(p) for p in args.data]})
    print(report.summary())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cordic-rpe",
                                 description="CORDIC processing-element model and tools")
    ap.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True, jobs=True):
        if seed:
            p.add_argument("--seed", type=int, default=42, help="seed for all randomness")
        if jobs:
            p.add_argument("--jobs", type=_arg(_positive), default=1,
                           help="worker processes; output does not depend on it")

    def rounding(p):
        p.add_argument("--rounding", type=_arg(RoundingMode.parse), default=RoundingMode.TRUNCATE,
                       help="input quantization: truncate or nearest-even")

    p = sub.add_parser("pareto", help="error sweep over formats and iteration counts")
    p.add_argument("--fn", required=True, type=_arg(lambda t: analysis.SweepFunction.parse(t).value),
                   help="mac, tanh, sigmoid, softmax, gelu, selu, swish or exp")
    p.add_argument("--formats", type=_arg(_formats), default=(FxpFormat(8, 4),),
                   help="comma list, e.g. Q8.4,Q16.8")
    p.add_argument("--iters", type=_arg(_iter_range), default=(1, 16), help="A..B inclusive")
    p.add_argument("--grid", type=_arg(analysis.InputGrid.parse), default=analysis.InputGrid(),
                   help="exhaustive, uniform:LO:HI:STEPS or list:V1,V2,...")
    p.add_argument("--softmax-vectors", type=_arg(_positive), default=200)
    p.add_argument("--out", help="CSV path (default stdout)")
    rounding(p)
    common(p)
    p.set_defaults(func=cmd_pareto)

    def rpe_flags(p):
        p.add_argument("--format", type=_arg(FxpFormat.parse), default=FxpFormat(8, 4))
        p.add_argument("--iters", type=_arg(_positive), default=5, help="MAC pipeline stages")
        p.add_argument("--hyp", type=_arg(_positive), help="hyperbolic iterations (default --iters)")
        p.add_argument("--div", type=_arg(_positive), help="division iterations (default --iters - 1)")

    p = sub.add_parser("af-eval", help="evaluate one activation function")
    p.add_argument("--fn", required=True, type=_arg(lambda t: rpe.AfKind.parse(t).value))
    p.add_argument("--x", required=True, type=float, nargs="+",
                   help="input values (the whole vector for softmax)")
    rpe_flags(p)
    rounding(p)
    p.set_defaults(func=cmd_af_eval)

    p = sub.add_parser("mac-eval", help="MAC error metrics or a single MAC stream")
    p.add_argument("--format", type=_arg(FxpFormat.parse), default=FxpFormat(8, 4))
    p.add_argument("--iters", type=_arg(_positive), default=5)
    p.add_argument("--x", type=float, nargs="+", help="input stream")
    p.add_argument("--w", type=float, nargs="+", help="weight stream")
    p.add_argument("--bias", type=float, default=0.0)
    rounding(p)
    p.set_defaults(func=cmd_mac_eval)

    def array_flags(p):
        p.add_argument("--network", required=True, help="network description file")
        p.add_argument("--array", type=_arg(_dims), default=(32, 32))
        p.add_argument("--subblock", type=_arg(_dims), default=(4, 4))
        p.add_argument("--mac-stages", type=_arg(_positive), default=5)
        p.add_argument("--prune", type=_arg(sycore.PruningSpec.parse),
                       help="a:b, p%% or a fraction")

    p = sub.add_parser("schedule", help="map a network onto the array")
    array_flags(p)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.add_argument("--json", help="also write the structured report here")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", help="event-driven cycle check of array layers")
    array_flags(p)
    p.add_argument("--layer", nargs="+", help="layer names (default: every array layer)")
    p.add_argument("--budget", type=_arg(_positive), default=sycore.SIMULATION_BUDGET)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("infer", help="classify MNIST-style IDX data")
    p.add_argument("--model", required=True, help="model manifest (JSON)")
    p.add_argument("--data", required=True, nargs=2, metavar=("IMAGES", "LABELS"))
    p.add_argument("--engine", choices=("cordic", "reference"), default="cordic")
    p.add_argument("--prune", type=_arg(sycore.PruningSpec.parse))
    p.add_argument("--limit", type=_arg(_positive), help="classify a seeded random subset")
    p.add_argument("--batch-size", type=_arg(_positive), default=500)
    p.add_argument("--out", help="write the JSON report here")
    rpe_flags(p)
    rounding(p)
    common(p)
    p.set_defaults(func=cmd_infer)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        parser.error(str(exc))
    except (InputFormatError, netrun.ModelFormatError, sycore.NetworkFormatError) as exc:
        print(f"cordic-rpe: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"cordic-rpe: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, ZeroDivisionError, OverflowError, ArithmeticError) as exc:
        print(f"cordic-rpe: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
