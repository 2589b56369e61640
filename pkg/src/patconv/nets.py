"""Small CONV+ReLU(+FC) networks with hand-written backprop and ADAM.

Parameters live in float64 so analytic gradients can be checked against
central differences tightly. Conv layers are bias-free, which keeps the
compressed execution path exactly equivalent to the training-time network;
the FC head carries a bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .tensors import LayerShape, ShapeError, WeightTensor


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def conv_forward_batch(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Batched valid cross-correlation: x [N,C,H,W], w [OC,C,KH,KW]."""
    n, c, h, width = x.shape
    oc, ic, kh, kw = w.shape
    if c != ic:
        raise ShapeError(f"input has {c} channels, kernel expects {ic}")
    oh = (h - kh) // stride + 1
    ow = (width - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{width}")
    out = np.zeros((n, oc, oh, ow), dtype=np.float64)
    for p in range(kh):
        for q in range(kw):
            patch = x[:, :, p:p + stride * oh:stride, q:q + stride * ow:stride]
            out += np.einsum("nchw,jc->njhw", patch, w[:, :, p, q])
    return out


def conv_backward_batch(x: np.ndarray, w: np.ndarray, stride: int,
                        dout: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients (dx, dw) of the batched convolution above."""
    n, c, h, width = x.shape
    oc, ic, kh, kw = w.shape
    oh, ow = dout.shape[2], dout.shape[3]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for p in range(kh):
        for q in range(kw):
            patch = x[:, :, p:p + stride * oh:stride, q:q + stride * ow:stride]
            dw[:, :, p, q] = np.einsum("njhw,nchw->jc", dout, patch)
            dx[:, :, p:p + stride * oh:stride, q:q + stride * ow:stride] += (
                np.einsum("njhw,jc->nchw", dout, w[:, :, p, q]))
    return dx, dw


@dataclass
class ConvLayer:
    """Bias-free 2-D convolution followed by ReLU."""

    weights: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ShapeError("conv weights must be [oc, ic, kh, kw]")


@dataclass
class DenseLayer:
    """Fully connected head producing logits (or regression outputs)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)


class TinyNet:
    """CONV 3x3 + ReLU stack with an optional FC head.

    loss_kind is "softmax_ce" (labels are int class ids) or "mse"
    (targets match the output shape).
    """

    def __init__(self, convs: Sequence[ConvLayer], fc: Optional[DenseLayer],
                 input_shape: Tuple[int, int, int], loss_kind: str = "softmax_ce"):
        if loss_kind not in ("softmax_ce", "mse"):
            raise ValueError(f"unknown loss kind {loss_kind!r}")
        self.convs = list(convs)
        self.fc = fc
        self.input_shape = tuple(input_shape)
        self.loss_kind = loss_kind
        self._check_chaining()

    def _check_chaining(self):
        c, h, w = self.input_shape
        for i, layer in enumerate(self.convs):
            oc, ic, kh, kw = layer.weights.shape
            if ic != c:
                raise ShapeError(f"conv {i} expects {ic} channels, got {c}")
            h = (h - kh) // layer.stride + 1
            w = (w - kw) // layer.stride + 1
            if h < 1 or w < 1:
                raise ShapeError(f"conv {i} output collapses to zero size")
            c = oc
        self.feature_size = c * h * w
        if self.fc is not None and self.fc.weights.shape[1] != self.feature_size:
            raise ShapeError(
                f"fc expects {self.fc.weights.shape[1]} features, "
                f"convs produce {self.feature_size}")

    def clone(self) -> "TinyNet":
        convs = [ConvLayer(l.weights.copy(), l.stride) for l in self.convs]
        fc = None
        if self.fc is not None:
            fc = DenseLayer(self.fc.weights.copy(), self.fc.bias.copy())
        return TinyNet(convs, fc, self.input_shape, self.loss_kind)

    def parameters(self) -> List[np.ndarray]:
        params = [l.weights for l in self.convs]
        if self.fc is not None:
            params.extend([self.fc.weights, self.fc.bias])
        return params

    def forward(self, x: np.ndarray):
        """Returns (output, cache) where cache holds pre/post activations."""
        x = np.asarray(x, dtype=np.float64)
        pre, post = [], []
        a = x
        for layer in self.convs:
            z = conv_forward_batch(a, layer.weights, layer.stride)
            a = relu(z)
            pre.append(z)
            post.append(a)
        flat = a.reshape(a.shape[0], -1)
        out = flat if self.fc is None else flat @ self.fc.weights.T + self.fc.bias
        return out, (x, pre, post, flat)

    def predict(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward(x)
        return np.argmax(out, axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))

    def _loss_and_dout(self, out: np.ndarray, y) -> Tuple[float, np.ndarray]:
        n = out.shape[0]
        if self.loss_kind == "softmax_ce":
            y = np.asarray(y, dtype=np.int64)
            shifted = out - out.max(axis=1, keepdims=True)
            logsumexp = np.log(np.sum(np.exp(shifted), axis=1))
            loss = float(np.mean(logsumexp - shifted[np.arange(n), y]))
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            dout = probs
            dout[np.arange(n), y] -= 1.0
            dout /= n
            return loss, dout
        target = np.asarray(y, dtype=np.float64).reshape(out.shape)
        diff = out - target
        loss = float(np.mean(diff * diff))
        return loss, 2.0 * diff / diff.size

    def loss(self, x: np.ndarray, y) -> float:
        out, _ = self.forward(x)
        return self._loss_and_dout(out, y)[0]

    def loss_and_grads(self, x: np.ndarray, y):
        """Full backprop. Returns (loss, grads aligned with parameters())."""
        out, (x0, pre, post, flat) = self.forward(x)
        loss, dout = self._loss_and_dout(out, y)
        if not np.isfinite(loss):
            raise FloatingPointError("loss diverged to a non-finite value")
        fc_grads = []
        if self.fc is not None:
            fc_grads = [dout.T @ flat, dout.sum(axis=0)]
            dflat = dout @ self.fc.weights
        else:
            dflat = dout
        da = dflat.reshape(post[-1].shape)
        conv_grads: List[np.ndarray] = [None] * len(self.convs)
        for i in range(len(self.convs) - 1, -1, -1):
            dz = da * (pre[i] > 0.0)
            below = x0 if i == 0 else post[i - 1]
            dx, dw = conv_backward_batch(below, self.convs[i].weights,
                                         self.convs[i].stride, dz)
            conv_grads[i] = dw
            da = dx
        return loss, conv_grads + fc_grads

    def conv_layer_shapes(self) -> List[LayerShape]:
        """LayerShape per conv, chaining spatial dims from the net input."""
        shapes = []
        c, h, w = self.input_shape
        for layer in self.convs:
            oc, ic, kh, kw = layer.weights.shape
            shapes.append(LayerShape(kh, kw, ic, oc, layer.stride, h, w))
            h = (h - kh) // layer.stride + 1
            w = (w - kw) // layer.stride + 1
            c = oc
        return shapes

    def to_weight_tensors(self) -> List[WeightTensor]:
        return [WeightTensor.zero_bias(shape, layer.weights.astype(np.float32))
                for shape, layer in zip(self.conv_layer_shapes(), self.convs)]


class Adam:
    """Standard ADAM over a fixed list of parameter arrays (updated in place)."""

    def __init__(self, params: List[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: List[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Seeded shuffled index batches covering 0..n-1 once."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train(net: TinyNet, x: np.ndarray, y: np.ndarray, epochs: int,
          lr: float = 1e-3, batch_size: int = 32,
          seed: int = 0, grad_mask=None) -> List[float]:
    """Plain ADAM training; grad_mask (per-parameter arrays or None entries)
    freezes masked-out weights, which keeps pruned positions at zero."""
    rng = np.random.default_rng(seed)
    opt = Adam(net.parameters(), lr=lr)
    history = []
    for _ in range(epochs):
        epoch_loss = 0.0
        count = 0
        for idx in minibatches(len(x), batch_size, rng):
            loss, grads = net.loss_and_grads(x[idx], y[idx])
            if grad_mask is not None:
                grads = [g if m is None else g * m
                         for g, m in zip(grads, grad_mask)]
            opt.step(grads)
            epoch_loss += loss * len(idx)
            count += len(idx)
        history.append(epoch_loss / count)
    return history
