"""Dense tensors, layer shapes, the reference convolution, and gradient checking.

Everything downstream (pruning, codecs, the sparse executor) is validated
against `conv_dense`, so this module stays deliberately simple: channel-major
layout, no padding, no dilation, float64 accumulation with float32 storage.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Tensor dimensions do not line up."""


@dataclass(frozen=True)
class LayerShape:
    """Static geometry of one convolution layer."""

    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int
    input_h: int
    input_w: int

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "in_channels", "out_channels",
                     "stride", "input_h", "input_w"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ShapeError(f"{name} must be a positive integer, got {value!r}")
        if self.output_h < 1 or self.output_w < 1:
            raise ShapeError(
                f"kernel {self.kernel_h}x{self.kernel_w} with stride {self.stride} "
                f"does not fit input {self.input_h}x{self.input_w}")

    @property
    def output_h(self) -> int:
        return (self.input_h - self.kernel_h) // self.stride + 1

    @property
    def output_w(self) -> int:
        return (self.input_w - self.kernel_w) // self.stride + 1

    @property
    def kernel_count(self) -> int:
        """Number of (out_channel, in_channel) kernels in the layer."""
        return self.in_channels * self.out_channels


def _frozen_f32(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float32, copy=True)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class WeightTensor:
    """Dense 4-D CONV weights indexed [out_channel][in_channel][row][col]."""

    shape: LayerShape
    data: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        s = self.shape
        expected = (s.out_channels, s.in_channels, s.kernel_h, s.kernel_w)
        data = _frozen_f32(self.data, "weights")
        if data.shape != expected:
            raise ShapeError(f"weight data has shape {data.shape}, expected {expected}")
        bias = _frozen_f32(self.bias, "bias")
        if bias.shape != (s.out_channels,):
            raise ShapeError(f"bias has shape {bias.shape}, expected ({s.out_channels},)")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "bias", bias)

    @classmethod
    def zero_bias(cls, shape: LayerShape, data) -> "WeightTensor":
        return cls(shape, data, np.zeros(shape.out_channels, dtype=np.float32))


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense activation tensor indexed [channel][row][col]."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen_f32(self.data, "feature map")
        if data.ndim != 3:
            raise ShapeError(f"feature map must be 3-D, got ndim={data.ndim}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def conv_dense(input: FeatureMap, weights: WeightTensor) -> FeatureMap:
    """Reference cross-correlation: output channel j comes from filter j.

    Accumulates in float64 and stores float32, so optimized executors can be
    compared against it at rel 1e-5.
    """
    s = weights.shape
    if input.channels != s.in_channels:
        raise ShapeError(
            f"input has {input.channels} channels, weights expect {s.in_channels}")
    if input.height != s.input_h or input.width != s.input_w:
        raise ShapeError(
            f"input is {input.height}x{input.width}, layer expects "
            f"{s.input_h}x{s.input_w}")
    windows = sliding_window_view(
        input.data.astype(np.float64), (s.kernel_h, s.kernel_w), axis=(1, 2))
    windows = windows[:, ::s.stride, ::s.stride]
    out = np.einsum("chwpq,jcpq->jhw", windows, weights.data.astype(np.float64),
                    optimize=True)
    out += weights.bias.astype(np.float64)[:, None, None]
    return FeatureMap(out.astype(np.float32))


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray,
                       eps: float) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = float(fn(x))
    if not np.isfinite(base):
        raise ValueError("loss is not finite at the evaluation point")
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.astype(np.float64).ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        saved = flat[i]
        probe = flat.copy()
        probe[i] = saved + eps
        plus = float(fn(probe.reshape(x.shape)))
        probe[i] = saved - eps
        minus = float(fn(probe.reshape(x.shape)))
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise ValueError(f"loss is not finite near element {i}")
        gflat[i] = (plus - minus) / (2.0 * eps)
    return grad


def finite_diff_grad(loss_fn: Callable[[WeightTensor], float],
                     weights: WeightTensor, eps: float) -> np.ndarray:
    """Central-difference gradient of a scalar loss w.r.t. the weight data.

    Weights live in float32, so the divisor is the step that actually
    materialized after rounding, not the nominal 2*eps.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = float(loss_fn(weights))
    if not np.isfinite(base):
        raise ValueError("loss is not finite at the evaluation point")
    flat = weights.data.ravel()
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] = np.float32(float(plus[i]) + eps)
        minus = flat.copy()
        minus[i] = np.float32(float(minus[i]) - eps)
        denom = float(plus[i]) - float(minus[i])
        f_plus = float(loss_fn(WeightTensor(weights.shape,
                                            plus.reshape(weights.data.shape),
                                            weights.bias)))
        f_minus = float(loss_fn(WeightTensor(weights.shape,
                                             minus.reshape(weights.data.shape),
                                             weights.bias)))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"loss is not finite near element {i}")
        grad[i] = (f_plus - f_minus) / denom
    return grad.reshape(weights.data.shape)


# Flat binary tensor files: magic "PTK0", a kind word, u32 little-endian dims,
# then f32 little-endian payload in the documented index order.
PTK_MAGIC = b"PTK0"
_KIND_FEATURE = 0
_KIND_WEIGHT = 1


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path: str, tensor: Union[FeatureMap, WeightTensor]) -> None:
    parts = [PTK_MAGIC]
    if isinstance(tensor, FeatureMap):
        parts.append(struct.pack("<I", _KIND_FEATURE))
        parts.append(struct.pack("<3I", tensor.channels, tensor.height, tensor.width))
        parts.append(tensor.data.astype("<f4").tobytes())
    elif isinstance(tensor, WeightTensor):
        s = tensor.shape
        parts.append(struct.pack("<I", _KIND_WEIGHT))
        parts.append(struct.pack("<7I", s.kernel_h, s.kernel_w, s.in_channels,
                                 s.out_channels, s.stride, s.input_h, s.input_w))
        parts.append(tensor.data.astype("<f4").tobytes())
        parts.append(tensor.bias.astype("<f4").tobytes())
    else:
        raise TypeError(f"cannot serialize {type(tensor).__name__}")
    _atomic_write(path, b"".join(parts))


class _Cursor:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError(f"{self.path}: truncated tensor file")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()


def read_tensor(path: str) -> Union[FeatureMap, WeightTensor]:
    with open(path, "rb") as handle:
        cur = _Cursor(handle.read(), path)
    if cur.take(4) != PTK_MAGIC:
        raise ValueError(f"{path}: bad magic, not a PTK0 tensor file")
    kind = cur.u32()
    if kind == _KIND_FEATURE:
        c, h, w = cur.u32(3)
        data = cur.f32(c * h * w).reshape(c, h, w)
        return FeatureMap(data)
    if kind == _KIND_WEIGHT:
        kh, kw, cin, cout, stride, ih, iw = cur.u32(7)
        shape = LayerShape(kh, kw, cin, cout, stride, ih, iw)
        data = cur.f32(cout * cin * kh * kw).reshape(cout, cin, kh, kw)
        bias = cur.f32(cout)
        return WeightTensor(shape, data, bias)
    raise ValueError(f"{path}: unknown tensor kind {kind}")
