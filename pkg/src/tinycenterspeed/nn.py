"""Hand-wired layers with explicit forward/backward passes and Adam.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Parameter.grad``. Convolutions use
cross-correlation, a 3x3 kernel, stride 2 and padding 1; the transposed
convolution additionally uses output padding 1 so that it exactly
doubles the spatial size.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np


class ShapeMismatch(ValueError):
    pass


class MissingForwardCache(RuntimeError):
    pass


class DegenerateBatch(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class Parameter:
    """A named array with a same-shaped gradient buffer."""

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def he_uniform(rng: np.random.Generator, shape, fan_in: int, a: float = math.sqrt(5.0)) -> np.ndarray:
    """Kaiming-uniform draw for a leaky-ReLU slope ``a``.

    The default slope gives the bound 1/sqrt(fan_in) used by common deep
    learning frameworks; ``a=0`` gives the plain ReLU bound sqrt(6/fan_in).
    """
    gain = math.sqrt(2.0 / (1.0 + a * a))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _windows(xp: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Stride-2 3x3 patches of a padded input as a read-only (N, C, 3, 3, Ho, Wo) view."""
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, 3, 3, out_h, out_w), strides=(s0, s1, s2, s3, 2 * s2, 2 * s3), writeable=False
    )


def _scatter_windows(taps: np.ndarray, hp: int, wp: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum (N, C, 3, 3, Ho, Wo) patches into an (N, C, hp, wp) map."""
    n, c, _, _, ho, wo = taps.shape
    out = np.zeros((n, c, hp, wp), dtype=taps.dtype)
    for di in range(3):
        for dj in range(3):
            out[:, :, di:di + 2 * ho:2, dj:dj + 2 * wo:2] += taps[:, :, di, dj]
    return out


class Layer:
    def parameters(self) -> list[Parameter]:
        return []

    def _cached(self, name):
        value = getattr(self, name, None)
        if value is None:
            raise MissingForwardCache(f"{type(self).__name__}.backward called before forward")
        return value


class Conv2d(Layer):
    """3x3 convolution, stride 2, padding 1: (N, C, H, W) -> (N, O, H/2, W/2)."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, name: str = "conv"):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = Parameter(f"{name}.weight", he_uniform(rng, (out_ch, in_ch, 3, 3), in_ch * 9))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch))
        self._cols = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.in_ch or h % 2 or w % 2:
            raise ShapeMismatch(f"conv expects (N, {self.in_ch}, even, even), got {x.shape}")
        ho, wo = h // 2, w // 2
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = _windows(xp, ho, wo).reshape(n, c * 9, ho * wo)
        self._cols, self._xshape = cols, x.shape
        out = np.matmul(self.weight.data.reshape(self.out_ch, -1), cols) + self.bias.data[:, None]
        return out.reshape(n, self.out_ch, ho, wo)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        cols = self._cached("_cols")
        n, c, h, w = self._xshape
        dmat = dout.reshape(n, self.out_ch, -1)
        self.weight.grad += np.tensordot(dmat, cols, axes=([0, 2], [0, 2])).reshape(self.weight.shape)
        self.bias.grad += dmat.sum(axis=(0, 2))
        dcols = np.matmul(self.weight.data.reshape(self.out_ch, -1).T, dmat)
        dxp = _scatter_windows(dcols.reshape(n, c, 3, 3, h // 2, w // 2), h + 2, w + 2)
        return dxp[:, :, 1:-1, 1:-1]


class ConvTranspose2d(Layer):
    """3x3 transposed convolution, stride 2, padding 1, output padding 1: H -> 2H."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, name: str = "tconv"):
        self.in_ch, self.out_ch = in_ch, out_ch
        # each output pixel receives on average in_ch * 9 / 4 contributions
        self.weight = Parameter(f"{name}.weight", he_uniform(rng, (in_ch, out_ch, 3, 3), max(1, in_ch * 9 // 4)))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch))
        self._xmat = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise ShapeMismatch(f"tconv expects {self.in_ch} channels, got {x.shape}")
        xmat = x.reshape(n, c, h * w)
        self._xmat, self._xshape = xmat, x.shape
        taps = np.matmul(self.weight.data.reshape(c, -1).T, xmat).reshape(n, self.out_ch, 3, 3, h, w)
        full = _scatter_windows(taps, 2 * h + 2, 2 * w + 2)
        return full[:, :, 1:2 * h + 1, 1:2 * w + 1] + self.bias.data[None, :, None, None]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xmat = self._cached("_xmat")
        n, c, h, w = self._xshape
        self.bias.grad += dout.sum(axis=(0, 2, 3))
        dfull = np.zeros((n, self.out_ch, 2 * h + 2, 2 * w + 2), dtype=dout.dtype)
        dfull[:, :, 1:2 * h + 1, 1:2 * w + 1] = dout
        dcols = _windows(dfull, h, w).reshape(n, self.out_ch * 9, h * w)
        self.weight.grad += np.tensordot(xmat, dcols, axes=([0, 2], [0, 2])).reshape(self.weight.shape)
        dx = np.matmul(self.weight.data.reshape(c, -1), dcols)
        return dx.reshape(n, c, h, w)


class Conv1x1(Layer):
    """Pointwise channel projection used by the residual connections."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, name: str = "proj"):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = Parameter(f"{name}.weight", he_uniform(rng, (out_ch, in_ch), in_ch))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch))
        self._x = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.in_ch:
            raise ShapeMismatch(f"projection expects {self.in_ch} channels, got {x.shape}")
        self._x = x
        return np.einsum("oc,nchw->nohw", self.weight.data, x, optimize=True) + self.bias.data[None, :, None, None]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x = self._cached("_x")
        self.weight.grad += np.einsum("nohw,nchw->oc", dout, x, optimize=True)
        self.bias.grad += dout.sum(axis=(0, 2, 3))
        return np.einsum("oc,nohw->nchw", self.weight.data, dout, optimize=True)


class BatchNorm2d(Layer):
    def __init__(self, ch: int, name: str = "bn", eps: float = 1e-5, momentum: float = 0.1):
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(f"{name}.gamma", np.ones(ch))
        self.beta = Parameter(f"{name}.beta", np.zeros(ch))
        self.running_mean = np.zeros(ch)
        self.running_var = np.ones(ch)
        self.name = name
        self.training = True
        self._xhat = None

    def parameters(self):
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray) -> np.ndarray:
        g = self.gamma.data[None, :, None, None]
        b = self.beta.data[None, :, None, None]
        if not self.training:
            self._xhat = None
            mean = self.running_mean[None, :, None, None]
            var = self.running_var[None, :, None, None]
            return g * (x - mean) / np.sqrt(var + self.eps) + b
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise DegenerateBatch("batchnorm needs at least 2 values per channel in train mode")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._xhat, self._inv_std = xhat, inv_std
        self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
        self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var * m / (m - 1)
        return g * xhat + b

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat = self._cached("_xhat")
        self.gamma.grad += (dout * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.gamma.data[None, :, None, None]
        mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (dxhat - mean_d - xhat * mean_dx) * self._inv_std[None, :, None, None]


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return np.where(self._cached("_mask"), dout, 0.0)


@dataclass
class Adam:
    params: list
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad.shape != p.data.shape:
                raise ShapeMismatch(f"gradient of {p.name} has shape {p.grad.shape}")
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad**2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# --- checkpoint file -------------------------------------------------------

WEIGHTS_MAGIC = b"TCSW"
WEIGHTS_VERSION = 1


def write_tensors(fh: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    """Weight checkpoint: magic, u32 version, then one record per tensor.

    Record layout (little endian): u32 name length, name bytes, u32 rank,
    rank x u32 dims, float32 payload in C order.
    """
    fh.write(WEIGHTS_MAGIC)
    fh.write(struct.pack("<I", WEIGHTS_VERSION))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode()
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def read_tensors(fh: BinaryIO) -> dict[str, np.ndarray]:
    if fh.read(4) != WEIGHTS_MAGIC:
        raise CheckpointError("not a TCSW checkpoint")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version != WEIGHTS_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    while True:
        head = fh.read(4)
        if not head:
            return out
        if len(head) != 4:
            raise CheckpointError("truncated checkpoint")
        (name_len,) = struct.unpack("<I", head)
        name = _read_exact(fh, name_len).decode()
        (rank,) = struct.unpack("<I", _read_exact(fh, 4))
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
        out[name] = payload.reshape(dims).astype(np.float64)

