"""Post-training INT8 quantization and an integer-arithmetic inference path.

Weights are symmetric per output channel, activations asymmetric per
tensor with min/max calibration. Batch norm is folded into the preceding
convolution. Integer accumulation is emulated with float64 matmuls over
integer-valued arrays, which is exact far beyond the int32 range checked here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .bev import BevConfig
from .model import TinyCenterSpeed
from .nn import CheckpointError, _scatter_windows, _windows

QMIN, QMAX = -128, 127
WEIGHT_QMAX = 127
SCALE_FLOOR = 1e-8
INT32_MAX = 2**31 - 1
MIN_CALIBRATION = 16


class CalibrationError(ValueError):
    pass


class EmptyCalibrationSet(CalibrationError):
    pass


class NotCalibrated(RuntimeError):
    pass


class AccumulatorOverflow(OverflowError):
    pass


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    observed_min: float
    observed_max: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not QMIN <= self.zero_point <= QMAX:
            raise ValueError("zero_point outside int8")

    @classmethod
    def from_range(cls, lo: float, hi: float) -> "QuantParams":
        # zero must be representable exactly so that padding and ReLU stay exact
        lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
        scale = max((hi - lo) / (QMAX - QMIN), SCALE_FLOOR)
        zp = int(np.clip(round_half_away(-lo / scale) + QMIN, QMIN, QMAX))
        return cls(scale, zp, lo, hi)

    def as_array(self) -> np.ndarray:
        return np.array([self.scale, self.zero_point, self.observed_min, self.observed_max])


def quantize_tensor(x, qp: QuantParams) -> np.ndarray:
    q = round_half_away(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def dequantize_tensor(q, qp: QuantParams) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) - qp.zero_point) * qp.scale


def quantize_weights(w: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric per-channel int8 weights along ``axis``; returns (q, scales)."""
    moved = np.moveaxis(np.asarray(w, dtype=np.float64), axis, 0)
    amax = np.abs(moved.reshape(moved.shape[0], -1)).max(axis=1)
    scales = np.maximum(amax / WEIGHT_QMAX, SCALE_FLOOR)
    shape = [1] * moved.ndim
    shape[0] = -1
    q = np.clip(round_half_away(moved / scales.reshape(shape)), -WEIGHT_QMAX, WEIGHT_QMAX)
    return np.moveaxis(q, 0, axis).astype(np.int8), scales


# --- float ops shared by calibration and the integer path -------------------

def conv3x3s2(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _windows(xp, h // 2, wd // 2).reshape(n, c * 9, -1)
    return np.matmul(w.reshape(w.shape[0], -1), cols).reshape(n, w.shape[0], h // 2, wd // 2)


def tconv3x3s2(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, c, h, wd = x.shape
    o = w.shape[1]
    taps = np.matmul(w.reshape(c, -1).T, x.reshape(n, c, -1)).reshape(n, o, 3, 3, h, wd)
    return _scatter_windows(taps, 2 * h + 2, 2 * wd + 2)[:, :, 1:2 * h + 1, 1:2 * wd + 1]


def conv1x1(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("oc,nchw->nohw", w, x, optimize=True)


_OPS = {"conv": conv3x3s2, "tconv": tconv3x3s2, "proj": conv1x1}
# output-channel axis of each weight layout
_OUT_AXIS = {"conv": 0, "tconv": 1, "proj": 0}


@dataclass
class FoldedLayer:
    kind: str
    weight: np.ndarray
    bias: np.ndarray

    def __call__(self, x):
        return _OPS[self.kind](x, self.weight) + self.bias[None, :, None, None]


def fold(model: TinyCenterSpeed) -> dict[str, FoldedLayer]:
    """Float layers with batch norm absorbed into the preceding convolution."""
    out = {}
    for conv, bn in ((model.enc1, model.bn1), (model.enc2, model.bn2)):
        g = bn.gamma.data / np.sqrt(bn.running_var + bn.eps)
        w = conv.weight.data * g[:, None, None, None]
        b = (conv.bias.data - bn.running_mean) * g + bn.beta.data
        out[conv.weight.name.split(".")[0]] = FoldedLayer("conv", w, b)
    out["dec1"] = FoldedLayer("tconv", model.dec1.weight.data.copy(), model.dec1.bias.data.copy())
    out["dec2"] = FoldedLayer("tconv", model.dec2.weight.data.copy(), model.dec2.bias.data.copy())
    for name in ("skip1", "skip2"):
        layer = getattr(model, name)
        if layer is not None:
            out[name] = FoldedLayer("proj", layer.weight.data.copy(), layer.bias.data.copy())
    return out


OCCUPANCY = TinyCenterSpeed.OCCUPANCY


def folded_forward(layers: dict[str, FoldedLayer], x: np.ndarray, record: dict | None = None) -> np.ndarray:
    """Float forward over folded layers; optionally records every quantized activation."""
    acts = {"input": x}
    acts["enc1"] = np.maximum(layers["enc1"](x), 0.0)
    acts["enc2"] = np.maximum(layers["enc2"](acts["enc1"]), 0.0)
    acts["dec1"] = layers["dec1"](acts["enc2"])
    merged = acts["dec1"]
    if "skip1" in layers:
        acts["skip1"] = layers["skip1"](acts["enc1"])
        merged = merged + acts["skip1"]
    acts["merge1"] = np.maximum(merged, 0.0)
    acts["dec2"] = layers["dec2"](acts["merge1"])
    out = acts["dec2"]
    if "skip2" in layers:
        acts["skip2"] = layers["skip2"](x[:, OCCUPANCY])
        out = out + acts["skip2"]
    out = out.copy()
    out[:, 0] = np.maximum(out[:, 0], 0.0)
    acts["output"] = out
    if record is not None:
        for name, a in acts.items():
            record.setdefault(name, []).append(a)
    return out


# --- quantized model ---------------------------------------------------------

@dataclass
class QuantLayer:
    kind: str
    weight: np.ndarray  # int8
    w_scale: np.ndarray  # per output channel
    bias: np.ndarray  # int32, in units of input_scale * w_scale
    input: str  # name of the activation feeding this layer


@dataclass
class QuantModel:
    layers: dict[str, QuantLayer]
    activations: dict[str, QuantParams]
    widths: tuple
    residuals: int
    bev: BevConfig = field(default_factory=BevConfig)

    @property
    def calibrated(self) -> bool:
        return "input" in self.activations


_INPUTS = {"enc1": "input", "enc2": "enc1", "dec1": "enc2", "skip1": "enc1", "dec2": "merge1", "skip2": "input"}


def _collect(model: TinyCenterSpeed, calibration_set: Sequence[np.ndarray], batch: int = 32):
    if len(calibration_set) == 0:
        raise EmptyCalibrationSet("calibration needs samples")
    if len(calibration_set) < MIN_CALIBRATION:
        raise CalibrationError(f"calibration needs at least {MIN_CALIBRATION} samples, got {len(calibration_set)}")
    layers = fold(model)
    record: dict[str, list] = {}
    data = np.asarray(calibration_set, dtype=np.float64)
    if data.ndim != 4:
        raise CalibrationError(f"calibration inputs must be (6, k, k) arrays, got {data.shape[1:]}")
    for i in range(0, len(data), batch):
        folded_forward(layers, data[i:i + batch], record)
    return layers, record


def calibrate(model: TinyCenterSpeed, calibration_set: Sequence[np.ndarray],
              percentile: float | None = None) -> dict[str, QuantParams]:
    """Activation ranges over the calibration set: min/max, or symmetric percentiles when given."""
    _, record = _collect(model, calibration_set)
    return _ranges(record, percentile)


def _ranges(record, percentile):
    out = {}
    for name, chunks in record.items():
        values = np.concatenate([c.ravel() for c in chunks])
        if percentile is None:
            lo, hi = values.min(), values.max()
        else:
            lo, hi = np.percentile(values, [100.0 - percentile, percentile])
        out[name] = QuantParams.from_range(lo, hi)
    return out


def quantize_model(model: TinyCenterSpeed, calibration_set: Sequence[np.ndarray], bev: BevConfig = BevConfig(),
                   percentile: float | None = None) -> QuantModel:
    layers, record = _collect(model, calibration_set)
    acts = _ranges(record, percentile)
    qlayers = {}
    for name, fl in layers.items():
        q, s = quantize_weights(fl.weight, _OUT_AXIS[fl.kind])
        s_in = acts[_INPUTS[name]].scale
        bias = np.clip(round_half_away(fl.bias / (s_in * s)), -INT32_MAX, INT32_MAX).astype(np.int32)
        qlayers[name] = QuantLayer(fl.kind, q, s, bias, _INPUTS[name])
    return QuantModel(qlayers, acts, model.cfg.widths, model.cfg.residuals, bev)


def accumulator_bound(qm: QuantModel) -> int:
    """Worst-case |accumulator| over all layers, independent of the grid size.

    Each output value sums at most in_ch * taps products of a centred
    activation (|q - zp| <= 255) and a weight (|w| <= 127), plus the bias.
    """
    worst = 0
    for layer in qm.layers.values():
        taps = 1 if layer.kind == "proj" else 9
        in_ch = layer.weight.shape[0] if layer.kind == "tconv" else layer.weight.shape[1]
        worst = max(worst, in_ch * taps * (QMAX - QMIN) * WEIGHT_QMAX + int(np.abs(layer.bias.astype(np.int64)).max()))
    return worst


def _accumulate(layer: QuantLayer, centred: np.ndarray) -> np.ndarray:
    acc = _OPS[layer.kind](centred, layer.weight.astype(np.float64)) + layer.bias[None, :, None, None]
    if np.abs(acc).max(initial=0) > INT32_MAX:
        raise AccumulatorOverflow("int32 accumulator overflow")
    return acc


def _requantize(acc: np.ndarray, layer: QuantLayer, s_in: float, qp: QuantParams, relu: bool = False):
    real = acc * (s_in * layer.w_scale)[None, :, None, None]
    if relu:
        real = np.maximum(real, 0.0)
    return quantize_tensor(real, qp)


def _centred(q: np.ndarray, qp: QuantParams) -> np.ndarray:
    return q.astype(np.float64) - qp.zero_point


def quantized_forward(qm: QuantModel, x: np.ndarray) -> np.ndarray:
    """Integer inference; returns dequantized (N, 4, k, k) heatmaps (or (4, k, k) for one input)."""
    if not qm.calibrated:
        raise NotCalibrated("quantized model has no activation ranges")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    A, L = qm.activations, qm.layers
    q_in = quantize_tensor(x, A["input"])
    c_in = _centred(q_in, A["input"])
    q1 = _requantize(_accumulate(L["enc1"], c_in), L["enc1"], A["input"].scale, A["enc1"], relu=True)
    c1 = _centred(q1, A["enc1"])
    q2 = _requantize(_accumulate(L["enc2"], c1), L["enc2"], A["enc1"].scale, A["enc2"], relu=True)
    qd1 = _requantize(_accumulate(L["dec1"], _centred(q2, A["enc2"])), L["dec1"], A["enc2"].scale, A["dec1"])
    merged = dequantize_tensor(qd1, A["dec1"])
    if "skip1" in L:
        qs1 = _requantize(_accumulate(L["skip1"], c1), L["skip1"], A["enc1"].scale, A["skip1"])
        merged = merged + dequantize_tensor(qs1, A["skip1"])
    qm1 = quantize_tensor(np.maximum(merged, 0.0), A["merge1"])
    qd2 = _requantize(_accumulate(L["dec2"], _centred(qm1, A["merge1"])), L["dec2"], A["merge1"].scale, A["dec2"])
    out = dequantize_tensor(qd2, A["dec2"])
    if "skip2" in L:
        qs2 = _requantize(_accumulate(L["skip2"], c_in[:, OCCUPANCY]), L["skip2"], A["input"].scale, A["skip2"])
        out = out + dequantize_tensor(qs2, A["skip2"])
    out[:, 0] = np.maximum(out[:, 0], 0.0)
    out = dequantize_tensor(quantize_tensor(out, A["output"]), A["output"])
    return out[0] if single else out


# --- checkpoint file ---------------------------------------------------------

QUANT_MAGIC = b"TCSQ"
QUANT_VERSION = 1
_KINDS = {0: "<f4", 1: "i1", 2: "<i4", 3: "<f8"}
_KIND_OF = {np.dtype("float32"): 0, np.dtype("int8"): 1, np.dtype("int32"): 2, np.dtype("float64"): 3}


def write_quant_tensors(fh: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    """Magic, u32 version, then records: u32 name length, name, u8 dtype kind, u32 rank, dims, payload."""
    fh.write(QUANT_MAGIC)
    fh.write(struct.pack("<I", QUANT_VERSION))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        kind = _KIND_OF[arr.dtype]
        raw = name.encode()
        fh.write(struct.pack("<I", len(raw)) + raw + struct.pack("<BI", kind, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=_KINDS[kind]).tobytes())


def read_quant_tensors(fh: BinaryIO) -> dict[str, np.ndarray]:
    if fh.read(4) != QUANT_MAGIC:
        raise CheckpointError("not a TCSQ checkpoint")
    head = fh.read(4)
    if len(head) != 4 or struct.unpack("<I", head)[0] != QUANT_VERSION:
        raise CheckpointError("unsupported quantized checkpoint version")

    def exact(n):
        data = fh.read(n)
        if len(data) != n:
            raise CheckpointError("truncated checkpoint")
        return data

    out = {}
    while True:
        head = fh.read(4)
        if not head:
            return out
        if len(head) != 4:
            raise CheckpointError("truncated checkpoint")
        name = exact(struct.unpack("<I", head)[0]).decode()
        kind, rank = struct.unpack("<BI", exact(5))
        if kind not in _KINDS:
            raise CheckpointError(f"unknown tensor kind {kind}")
        dims = struct.unpack(f"<{rank}I", exact(4 * rank))
        dtype = np.dtype(_KINDS[kind])
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(exact(dtype.itemsize * count), dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def save_quant(qm: QuantModel, path) -> None:
    tensors = {
        "meta.widths": np.array(qm.widths, dtype=np.float64),
        "meta.residuals": np.array([qm.residuals], dtype=np.float64),
        "meta.bev": np.array([qm.bev.k, qm.bev.p, qm.bev.sigma_gt], dtype=np.float64),
    }
    for name, layer in qm.layers.items():
        tensors[f"{name}.weight"] = layer.weight
        tensors[f"{name}.w_scale"] = layer.w_scale
        tensors[f"{name}.bias"] = layer.bias
    for name, qp in qm.activations.items():
        tensors[f"act.{name}"] = qp.as_array()
    with open(path, "wb") as fh:
        write_quant_tensors(fh, tensors)


_KIND_BY_LAYER = {"enc1": "conv", "enc2": "conv", "dec1": "tconv", "dec2": "tconv", "skip1": "proj", "skip2": "proj"}


def load_quant(path) -> QuantModel:
    with open(path, "rb") as fh:
        t = read_quant_tensors(fh)
    try:
        widths = tuple(int(v) for v in t["meta.widths"])
        residuals = int(t["meta.residuals"][0])
        k, p, sigma = t["meta.bev"]
        layers = {}
        for name, kind in _KIND_BY_LAYER.items():
            if f"{name}.weight" in t:
                layers[name] = QuantLayer(kind, t[f"{name}.weight"], t[f"{name}.w_scale"], t[f"{name}.bias"],
                                          _INPUTS[name])
        acts = {}
        for key, v in t.items():
            if key.startswith("act."):
                acts[key[4:]] = QuantParams(float(v[0]), int(v[1]), float(v[2]), float(v[3]))
    except KeyError as exc:
        raise CheckpointError(f"quantized checkpoint lacks {exc}") from None
    return QuantModel(layers, acts, widths, residuals, BevConfig(int(k), float(p), float(sigma)))
