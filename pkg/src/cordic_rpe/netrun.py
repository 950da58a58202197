"""Fixed-point network inference through the RPE datapath.

Models are a JSON manifest plus a little-endian float32 blob. The
``reference`` engine runs in float64 with the stored weights. The
``cordic`` engine quantizes weights, biases and inputs to the operand
format and evaluates every neuron as a CORDIC MAC stream followed by the
layer's activation, with values requantized to the operand format between
layers.

The cordic engine is vectorized but bit-identical to calling
:func:`cordic_rpe.rpe.mac_stream` per output value: a stream's result is
bias + sum over stages i and taps j of d_ij * floor(x_j * 2**(k_j - i)), where
d_ij are the weight's direction bits. Because the accumulator never
saturates, that sum can be formed in any order, so each stage becomes one
integer matrix product.
"""
from __future__ import annotations

import gzip
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cordic import mac_directions, prescale_shift, scaled_shift
from .fxp import FxpFormat, RoundingMode, clip_raw, quantize_array
from .rpe import AfKind, RpeConfig, activate_raw, softmax_raw
from .sycore import LayerKind, LayerSpec, PruningSpec

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
EXACT_FLOAT_LIMIT = 1 << 53


class ModelFormatError(ValueError):
    """Malformed dataset or model file."""


# ---------------------------------------------------------------------------
# IDX ingestion

def _read_bytes(path) -> bytes:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    data = p.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _parse_idx(data: bytes, magic: int, ndim: int, path) -> np.ndarray:
    if len(data) < 4 + 4 * ndim:
        raise ModelFormatError(f"{path}: header needs {4 + 4 * ndim} bytes, file has {len(data)}")
    got = int.from_bytes(data[0:4], "big")
    if got != magic:
        raise ModelFormatError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    dims = [int.from_bytes(data[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    for i, d in enumerate(dims):
        if d == 0:
            raise ModelFormatError(f"{path}: zero dimension at offset {4 + 4 * i}")
    start = 4 + 4 * ndim
    expected = start + math.prod(dims)
    if len(data) != expected:
        raise ModelFormatError(f"{path}: expected {expected} bytes for dims {dims}, "
                               f"got {len(data)} (payload starts at offset {start})")
    return np.frombuffer(data, dtype=np.uint8, offset=start).reshape(dims)


def load_mnist(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """IDX images and labels (optionally gzipped). Images come back as float64 in [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ModelFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.max(initial=0) > 9:
        raise ModelFormatError(f"{labels_path}: label {int(labels.max())} outside 0..9")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(path, array: np.ndarray, magic: int):
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    header = magic.to_bytes(4, "big") + b"".join(d.to_bytes(4, "big") for d in arr.shape)
    data = header + arr.tobytes()
    p = Path(path)
    p.write_bytes(gzip.compress(data, mtime=0) if p.suffix == ".gz" else data)


# ---------------------------------------------------------------------------
# models

@dataclass
class ModelLayer:
    spec: LayerSpec
    weight: np.ndarray | None = None  # conv: (cout, cin, k, k); fc: (cout, cin)
    bias: np.ndarray | None = None


@dataclass
class Model:
    name: str
    input_shape: tuple[int, int, int]  # (channels, height, width)
    layers: list[ModelLayer]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        c, h, w = self.input_shape
        flat = None
        for layer in self.layers:
            s = layer.spec
            if s.kind in (LayerKind.CONV, LayerKind.POOL):
                if flat is not None:
                    raise ModelFormatError(f"{s.name}: spatial layer after flatten")
                if (s.cin, s.h, s.w) != (c, h, w):
                    raise ModelFormatError(f"{s.name}: expects input {s.cin}x{s.h}x{s.w}, "
                                           f"previous layer gives {c}x{h}x{w}")
                c, h, w = (s.cout if s.kind is LayerKind.CONV else c), s.out_h, s.out_w
            elif s.kind is LayerKind.FLATTEN:
                flat = c * h * w
            else:
                size = flat if flat is not None else c * h * w
                if s.cin != size:
                    raise ModelFormatError(f"{s.name}: expects {s.cin} inputs, previous layer gives {size}")
                flat = s.cout
            if s.kind in (LayerKind.CONV, LayerKind.FC):
                want = ((s.cout, s.cin, s.k, s.k) if s.kind is LayerKind.CONV else (s.cout, s.cin))
                if layer.weight is None or layer.weight.shape != want:
                    got = None if layer.weight is None else layer.weight.shape
                    raise ModelFormatError(f"{s.name}: weight shape {got}, expected {want}")
                if layer.bias is None or layer.bias.shape != (s.cout,):
                    raise ModelFormatError(f"{s.name}: bias shape must be ({s.cout},)")
                if not (np.isfinite(layer.weight).all() and np.isfinite(layer.bias).all()):
                    raise ModelFormatError(f"{s.name}: non-finite weights")

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].spec.cout


def _layer_to_json(spec: LayerSpec) -> dict:
    return {"name": spec.name, "kind": spec.kind.value, "k": spec.k, "cin": spec.cin,
            "cout": spec.cout, "h": spec.h, "w": spec.w, "stride": spec.stride,
            "pad": spec.pad, "af": spec.af.value}


def save_model(model: Model, manifest_path, blob_name: str | None = None):
    """Write ``manifest.json`` and its float32 blob next to it."""
    manifest_path = Path(manifest_path)
    blob_name = blob_name or manifest_path.with_suffix(".bin").name
    chunks, offset, layers = [], 0, []
    for layer in model.layers:
        entry = _layer_to_json(layer.spec)
        for key in ("weight", "bias"):
            t = getattr(layer, key)
            if t is None:
                continue
            data = np.ascontiguousarray(t, dtype="<f4").tobytes()
            entry[key] = {"offset": offset, "shape": list(t.shape)}
            chunks.append(data)
            offset += len(data)
        layers.append(entry)
    doc = {"name": model.name, "input_shape": list(model.input_shape), "blob": blob_name,
           "dtype": "float32-le", "layers": layers, **model.meta}
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n")
    (manifest_path.parent / blob_name).write_bytes(b"".join(chunks))


def load_model(manifest_path) -> Model:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"no such model manifest: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{manifest_path}: {exc}") from None
    try:
        blob_path = manifest_path.parent / doc["blob"]
        if not blob_path.exists():
            raise FileNotFoundError(f"model blob not found: {blob_path}")
        blob = blob_path.read_bytes()

        def tensor(ref, what):
            shape = tuple(int(v) for v in ref["shape"])
            start = int(ref["offset"])
            end = start + 4 * math.prod(shape)
            if start < 0 or end > len(blob):
                raise ModelFormatError(f"{what}: bytes {start}..{end} outside blob of {len(blob)} bytes")
            return np.frombuffer(blob, dtype="<f4", count=math.prod(shape),
                                 offset=start).astype(np.float64).reshape(shape)

        layers = []
        for e in doc["layers"]:
            spec = LayerSpec(e["name"], LayerKind(e["kind"]), k=e.get("k", 1), cin=e.get("cin", 1),
                             cout=e.get("cout", 1), h=e.get("h", 1), w=e.get("w", 1),
                             stride=e.get("stride", 1), pad=e.get("pad", 0),
                             af=AfKind.parse(e.get("af", "none")))
            w = tensor(e["weight"], f"{spec.name}.weight") if "weight" in e else None
            b = tensor(e["bias"], f"{spec.name}.bias") if "bias" in e else None
            layers.append(ModelLayer(spec, w, b))
        meta = {k: v for k, v in doc.items()
                if k not in ("name", "input_shape", "blob", "dtype", "layers")}
        return Model(doc["name"], tuple(doc["input_shape"]), layers, meta)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{manifest_path}: {exc}") from None


# ---------------------------------------------------------------------------
# quantization and pruning

@dataclass(frozen=True)
class LayerQuantization:
    name: str
    weight_saturated: int
    bias_saturated: int
    prescaled: int  # weights with |w| >= 2, routed through the pre-scaling path


@dataclass
class QuantizedModel:
    model: Model
    fmt: FxpFormat
    rounding: RoundingMode
    weights: list[np.ndarray | None]
    biases: list[np.ndarray | None]
    report: list[LayerQuantization]

    @property
    def saturated(self) -> int:
        return sum(r.weight_saturated + r.bias_saturated for r in self.report)


def quantize_model(model: Model, fmt: FxpFormat,
                   mode: RoundingMode = RoundingMode.TRUNCATE) -> QuantizedModel:
    weights, biases, report = [], [], []
    two = 2 << fmt.frac_bits
    for layer in model.layers:
        if layer.weight is None:
            weights.append(None)
            biases.append(None)
            continue
        w, ws = quantize_array(layer.weight, fmt, mode)
        b, bs = quantize_array(layer.bias, fmt, mode)
        weights.append(w)
        biases.append(b)
        report.append(LayerQuantization(layer.spec.name, ws, bs, int((np.abs(w) >= two).sum())))
    return QuantizedModel(model, fmt, mode, weights, biases, report)


def prune_weights(w: np.ndarray, fraction) -> np.ndarray:
    """Zero the floor(fraction * size) smallest-magnitude entries; ties go to the lower index."""
    flat = np.asarray(w, dtype=np.float64).ravel().copy()
    n_zero = math.floor(flat.size * fraction)
    if n_zero:
        order = np.argsort(np.abs(flat), kind="stable")
        flat[order[:n_zero]] = 0.0
    return flat.reshape(np.shape(w))


def prune_model(model: Model, spec: PruningSpec) -> Model:
    """Per-layer magnitude pruning of conv and fc weights (biases are kept)."""
    if spec.fraction == 0:
        return model
    layers = [ModelLayer(l.spec, prune_weights(l.weight, spec.fraction), l.bias)
              if l.weight is not None else l for l in model.layers]
    meta = dict(model.meta, pruning=spec.label)
    return Model(model.name, model.input_shape, layers, meta)


# ---------------------------------------------------------------------------
# engines

def _im2col(x: np.ndarray, spec: LayerSpec) -> np.ndarray:
    """(N, C, H, W) -> (N, out_h * out_w, C * k * k) in (c, ky, kx) tap order."""
    p = spec.pad
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(x, (spec.k, spec.k), axis=(2, 3))
    win = win[:, :, ::spec.stride, ::spec.stride][:, :, :spec.out_h, :spec.out_w]
    n, c = x.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, spec.out_h * spec.out_w, c * spec.k * spec.k)


def _maxpool(x: np.ndarray, spec: LayerSpec) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (spec.k, spec.k), axis=(2, 3))
    win = win[:, :, ::spec.stride, ::spec.stride][:, :, :spec.out_h, :spec.out_w]
    return win.max(axis=(4, 5))


def _reference_af(v: np.ndarray, af: AfKind) -> np.ndarray:
    if af is AfKind.RELU:
        return np.maximum(v, 0.0)
    if af is AfKind.TANH:
        return np.tanh(v)
    if af is AfKind.SIGMOID:
        return 1.0 / (1.0 + np.exp(-v))
    if af is AfKind.SOFTMAX:
        e = np.exp(v - v.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    if af is AfKind.GELU:
        return 0.5 * v * (1.0 + np.tanh(0.7978845608 * (v + 0.044715 * v ** 3)))
    if af is AfKind.SELU:
        return np.where(v > 0, 1.0507009873554805 * v,
                        1.0507009873554805 * 1.6732632423543772 * np.expm1(v))
    if af is AfKind.SWISH:
        return v / (1.0 + np.exp(-v))
    return v


def _linear_af_shape(out: np.ndarray, spec: LayerSpec, n: int) -> np.ndarray:
    """(N, positions, cout) -> NCHW for conv, (N, cout) for fc."""
    if spec.kind is LayerKind.CONV:
        return out.reshape(n, spec.out_h, spec.out_w, spec.cout).transpose(0, 3, 1, 2)
    return out.reshape(n, spec.cout)


def reference_forward(model: Model, images: np.ndarray) -> list[np.ndarray]:
    """Float64 activations after every layer."""
    x = np.asarray(images, dtype=np.float64).reshape((-1,) + tuple(model.input_shape))
    outs = []
    for layer in model.layers:
        s = layer.spec
        n = x.shape[0]
        if s.kind is LayerKind.CONV:
            cols = _im2col(x, s)
            y = cols @ layer.weight.reshape(s.cout, -1).T + layer.bias
            x = _apply_ref_af(_linear_af_shape(y, s, n), s.af)
        elif s.kind is LayerKind.FC:
            x = x.reshape(n, -1) @ layer.weight.T + layer.bias
            x = _apply_ref_af(x, s.af)
        elif s.kind is LayerKind.POOL:
            x = _maxpool(x, s)
        else:
            x = x.reshape(n, -1)
        outs.append(x)
    return outs


def _apply_ref_af(x: np.ndarray, af: AfKind) -> np.ndarray:
    if af is AfKind.SOFTMAX:
        return _reference_af(x.reshape(x.shape[0], -1), af).reshape(x.shape)
    return _reference_af(x, af)


@dataclass
class _StageDigits:
    """Per-(stage, pre-scale group) direction matrices of one layer."""

    terms: list[tuple[int, np.ndarray]]  # (shift i - k, digits of shape (taps, cout))


def _stage_digits(w_raw: np.ndarray, cfg: RpeConfig) -> _StageDigits:
    w2 = w_raw.reshape(w_raw.shape[0], -1)  # (cout, taps)
    k = prescale_shift(w2, cfg.fmt.frac_bits)
    dirs = mac_directions(w2, cfg.mac_stages, cfg.fmt.frac_bits, k)  # (n, cout, taps)
    terms = []
    for kk in np.unique(k):
        sel = k == int(kk)
        for i in range(cfg.mac_stages):
            d = np.where(sel, dirs[i], 0)
            if d.any():
                terms.append((i - int(kk), d.T.astype(np.float64)))
    return _StageDigits(terms)


def _exact_matmul(x: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Integer x @ {-1, 0, 1} digits, exactly."""
    bound = int(np.abs(x).max(initial=0)) * d.shape[0]
    if bound < EXACT_FLOAT_LIMIT:
        return (x.astype(np.float64) @ d).astype(np.int64)
    if x.dtype == object or bound >= 1 << 62:
        return np.dot(x.astype(object), d.astype(np.int64).astype(object))
    return x @ d.astype(np.int64)


def _cordic_linear(cols: np.ndarray, digits: _StageDigits, bias_raw: np.ndarray,
                   fmt: FxpFormat) -> np.ndarray:
    acc_dtype = object if fmt.word_bits > 48 else np.int64
    acc = np.zeros(cols.shape[:-1] + (bias_raw.size,), dtype=acc_dtype) + bias_raw.astype(acc_dtype)
    for s, d in digits.terms:
        acc = acc + _exact_matmul(scaled_shift(cols, s), d)
    return clip_raw(acc, fmt).astype(fmt.dtype)


def _cordic_af(raw: np.ndarray, af: AfKind, cfg: RpeConfig) -> np.ndarray:
    if af is AfKind.SOFTMAX:
        shape = raw.shape
        probs, _, _ = softmax_raw(raw.reshape(shape[0], -1), cfg)
        return probs.reshape(shape)
    return activate_raw(raw, cfg, af)


def cordic_forward(qmodel: QuantizedModel, images: np.ndarray, cfg: RpeConfig,
                   digits: list[_StageDigits | None] | None = None) -> list[np.ndarray]:
    """Raw fixed-point activations after every layer."""
    model, fmt = qmodel.model, qmodel.fmt
    if cfg.fmt != fmt:
        raise ValueError(f"model quantized to {fmt}, engine configured for {cfg.fmt}")
    if digits is None:
        digits = [None if w is None else _stage_digits(w, cfg) for w in qmodel.weights]
    x, _ = quantize_array(np.asarray(images, dtype=np.float64), fmt, qmodel.rounding)
    x = x.reshape((-1,) + tuple(model.input_shape))
    outs = []
    for layer, dg, b in zip(model.layers, digits, qmodel.biases):
        s = layer.spec
        n = x.shape[0]
        if s.kind is LayerKind.CONV:
            y = _cordic_linear(_im2col(x, s), dg, b, fmt)
            x = _cordic_af(_linear_af_shape(y, s, n), s.af, cfg)
        elif s.kind is LayerKind.FC:
            y = _cordic_linear(x.reshape(n, -1), dg, b, fmt)
            x = _cordic_af(y, s.af, cfg)
        elif s.kind is LayerKind.POOL:
            x = _maxpool(x, s)
        else:
            x = x.reshape(n, -1)
        outs.append(x)
    return outs


@dataclass(frozen=True)
class LayerDeviation:
    name: str
    max_abs: float
    mean_abs: float


@dataclass
class InferenceReport:
    engine: str
    accuracy: float | None
    n_samples: int
    layer_deviation: list[LayerDeviation]
    config: dict
    agreement: float | None = None  # fraction of predictions equal to the reference engine's

    def summary(self) -> str:
        acc = "n/a" if self.accuracy is None else f"{self.accuracy:.4f}"
        return f"engine={self.engine} top1={acc} n={self.n_samples}"

    def to_dict(self) -> dict:
        return {"engine": self.engine, "top1": self.accuracy, "n": self.n_samples,
                "agreement_with_reference": self.agreement, "config": self.config,
                "layers": [{"name": d.name, "max_abs_dev": d.max_abs, "mean_abs_dev": d.mean_abs}
                           for d in self.layer_deviation]}


def _run_batch(args):
    model, qmodel, cfg, digits, batch = args
    ref = reference_forward(model, batch)
    if qmodel is None:
        return ref[-1].argmax(axis=1), None, None
    outs = cordic_forward(qmodel, batch, cfg, digits)
    scale = float(cfg.fmt.one_raw)
    dev = [(float(np.abs(o / scale - r).max(initial=0.0)), float(np.abs(o / scale - r).sum()),
            o.size) for o, r in zip(outs, ref)]
    return outs[-1].argmax(axis=1), ref[-1].argmax(axis=1), dev


def infer(model: Model, images: np.ndarray, labels: np.ndarray | None = None,
          engine: str = "cordic", cfg: RpeConfig | None = None,
          rounding: RoundingMode = RoundingMode.TRUNCATE, batch_size: int = 500,
          jobs: int = 1) -> tuple[np.ndarray, InferenceReport]:
    """Classify ``images`` (N x C x H x W or N x H x W, reals in [0, 1]).

    Ties in the final scores go to the lowest class index.
    """
    if engine not in ("reference", "cordic"):
        raise ValueError(f"unknown engine {engine!r}; use reference or cordic")
    cfg = cfg or RpeConfig()
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    if n == 0:
        raise ValueError("no images to classify")
    if math.prod(images.shape[1:]) != math.prod(model.input_shape):
        raise ModelFormatError(f"images of shape {images.shape[1:]} do not match model input "
                               f"{tuple(model.input_shape)}")
    qmodel = digits = None
    if engine == "cordic":
        qmodel = quantize_model(model, cfg.fmt, rounding)
        digits = [None if w is None else _stage_digits(w, cfg) for w in qmodel.weights]
    work = [(model, qmodel, cfg, digits, images[i:i + batch_size])
            for i in range(0, n, batch_size)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_batch, work))
    else:
        results = [_run_batch(w) for w in work]
    preds = np.concatenate([r[0] for r in results])
    config = {"engine": engine, "format": str(cfg.fmt), "mac_stages": cfg.mac_stages,
              "hyp_iterations": cfg.hyp_iterations, "div_iterations": cfg.div_iterations,
              "rounding": rounding.value, "model": model.name,
              "pruning": model.meta.get("pruning", "0")}
    deviations, agreement = [], None
    if engine == "cordic":
        ref_preds = np.concatenate([r[1] for r in results])
        agreement = float((preds == ref_preds).mean())
        for j, layer in enumerate(model.layers):
            mx = max(r[2][j][0] for r in results)
            total = sum(r[2][j][1] for r in results)
            count = sum(r[2][j][2] for r in results)
            deviations.append(LayerDeviation(layer.spec.name, mx, total / count))
        config["saturated_weights"] = qmodel.saturated
    acc = None if labels is None else float((preds == np.asarray(labels)[:n]).mean())
    return preds, InferenceReport(engine, acc, n, deviations, config, agreement)
