"""Constrained pruning via ADMM.

The training problem is: minimize the network loss subject to, per conv
layer, (a) every 3x3 kernel's support lying on one pattern from a candidate
set, and (b) at most alpha kernels being nonzero. The loop alternates a
gradient step on the penalized loss, Euclidean projections onto each
constraint, and dual updates, then finishes with a hard projection plus
masked fine-tuning so the result is exactly feasible.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .nets import Adam, TinyNet, minibatches, train
from .patterns import (ConnectivityMask, PatternSet, project_connectivity,
                       project_pattern_layer)
from .tensors import WeightTensor


class DivergenceError(FloatingPointError):
    """Training loss left the realm of finite numbers."""


@dataclass
class PruneConfig:
    pattern_set: PatternSet
    connectivity_rate: float = 3.6
    first_layer_rate: float = 1.0
    admm_iterations: int = 10
    epochs_per_iteration: int = 4
    learning_rate: float = 1e-3
    rho: float = 1e-2
    seed: int = 0
    batch_size: int = 32
    fine_tune_epochs: int = 10
    reassign_patterns: bool = True

    def __post_init__(self):
        if self.connectivity_rate < 1 or self.first_layer_rate < 1:
            raise ValueError("pruning rates must be >= 1")
        if self.admm_iterations < 1 or self.epochs_per_iteration < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.rho <= 0 or self.learning_rate <= 0:
            raise ValueError("rho and learning_rate must be positive")


@dataclass
class LayerVars:
    """Auxiliary (Z pattern, Y connectivity) and dual (U, V) tensors."""

    Z: np.ndarray
    Y: np.ndarray
    U: np.ndarray
    V: np.ndarray


@dataclass
class AdmmState:
    layers: List[LayerVars]
    rho: float

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        for i, lv in enumerate(self.layers):
            shapes = {lv.Z.shape, lv.Y.shape, lv.U.shape, lv.V.shape}
            if len(shapes) != 1:
                raise ValueError(f"layer {i}: Z/Y/U/V shapes differ")


@dataclass
class TraceRow:
    iteration: int
    loss: float
    pattern_residual: float
    connectivity_residual: float


@dataclass
class PruneResult:
    net: TinyNet
    pattern_set: PatternSet
    assignments: List[np.ndarray]
    masks: List[ConnectivityMask]
    trace: List[TraceRow]


def layer_alpha(shape, layer_index: int, cfg: PruneConfig) -> int:
    """Kernel budget: ceil(total kernels / rate); first layer has its own rate."""
    rate = cfg.first_layer_rate if layer_index == 0 else cfg.connectivity_rate
    return min(shape.kernel_count,
               max(1, math.ceil(shape.kernel_count / rate)))


def init_state(net: TinyNet, cfg: PruneConfig) -> AdmmState:
    """Z and Y start at the projection of W; duals start at zero."""
    layers = []
    shapes = net.conv_layer_shapes()
    for i, conv in enumerate(net.convs):
        w = conv.weights
        _, z = project_pattern_layer(w, cfg.pattern_set)
        mask = _connectivity_mask(w, layer_alpha(shapes[i], i, cfg))
        layers.append(LayerVars(Z=z, Y=w * mask[:, :, None, None],
                                U=np.zeros_like(w), V=np.zeros_like(w)))
    return AdmmState(layers, cfg.rho)


def _connectivity_mask(w: np.ndarray, alpha: int) -> np.ndarray:
    norms = np.sqrt(np.sum(w * w, axis=(2, 3)))
    oc, ic = norms.shape
    order = sorted(((o, i) for o in range(oc) for i in range(ic)),
                   key=lambda p: (-norms[p], p))
    mask = np.zeros((oc, ic), dtype=np.float64)
    for o, i in order[:alpha]:
        mask[o, i] = 1.0
    return mask


def augmented_grads(net: TinyNet, state: AdmmState, x, y,
                    loss_and_grads=None):
    """Loss gradients plus the two quadratic penalty terms per conv layer."""
    fn = loss_and_grads if loss_and_grads is not None else net.loss_and_grads
    loss, grads = fn(x, y)
    for i, (conv, lv) in enumerate(zip(net.convs, state.layers)):
        w = conv.weights
        grads[i] = grads[i] + state.rho * (w - lv.Z + lv.U) \
                            + state.rho * (w - lv.Y + lv.V)
    return loss, grads


def admm_step_primal(state: AdmmState, net: TinyNet, batch, cfg: PruneConfig,
                     rng: np.random.Generator, opt: Optional[Adam] = None,
                     loss_and_grads=None) -> float:
    """ADAM epochs on loss + (rho/2)||W-Z+U||^2 + (rho/2)||W-Y+V||^2.

    Returns the mean plain-loss value over the last epoch. Raises
    DivergenceError naming the first layer whose weights go non-finite.
    """
    x, y = batch
    if len(x) == 0:
        raise ValueError("primal step needs a nonempty batch")
    if opt is None:
        opt = Adam(net.parameters(), lr=cfg.learning_rate)
    last_epoch_loss = 0.0
    for _ in range(cfg.epochs_per_iteration):
        total, count = 0.0, 0
        for idx in minibatches(len(x), cfg.batch_size, rng):
            try:
                loss, grads = augmented_grads(net, state, x[idx], y[idx],
                                              loss_and_grads)
            except FloatingPointError:
                raise DivergenceError(
                    _divergent_layer_message(net, x[idx])) from None
            opt.step(grads)
            total += loss * len(idx)
            count += len(idx)
        last_epoch_loss = total / count
    for i, conv in enumerate(net.convs):
        if not np.all(np.isfinite(conv.weights)):
            raise DivergenceError(f"conv layer {i} diverged during the primal step")
    if not np.isfinite(last_epoch_loss):
        raise DivergenceError("training loss diverged during the primal step")
    return last_epoch_loss


def _divergent_layer_message(net: TinyNet, x: np.ndarray) -> str:
    for i, conv in enumerate(net.convs):
        if not np.all(np.isfinite(conv.weights)):
            return f"conv layer {i} diverged during the primal step"
    with np.errstate(all="ignore"):
        _, (_, pre, _, _) = net.forward(x)
    for i, z in enumerate(pre):
        if not np.all(np.isfinite(z)):
            return f"conv layer {i} produced non-finite activations"
    return "training loss diverged during the primal step"


def admm_step_auxiliary(state: AdmmState, net: TinyNet, cfg: PruneConfig) -> None:
    """Z <- pattern projection of W+U; Y <- connectivity projection of W+V."""
    shapes = net.conv_layer_shapes()
    for i, (conv, lv) in enumerate(zip(net.convs, state.layers)):
        wu = conv.weights + lv.U
        _, lv.Z = project_pattern_layer(wu, cfg.pattern_set)
        wv = conv.weights + lv.V
        mask = _connectivity_mask(wv, layer_alpha(shapes[i], i, cfg))
        lv.Y = wv * mask[:, :, None, None]


def admm_step_dual(state: AdmmState, net: TinyNet) -> None:
    """U <- U + (W - Z); V <- V + (W - Y)."""
    for conv, lv in zip(net.convs, state.layers):
        lv.U = lv.U + (conv.weights - lv.Z)
        lv.V = lv.V + (conv.weights - lv.Y)


def hard_project(net: TinyNet, cfg: PruneConfig):
    """Project W exactly onto both constraints.

    Patterns first (they fix each kernel's retained mass), then the kernel
    budget on the projected norms. Returns (assignments, masks, grad_masks);
    assignments hold -1 for pruned kernels.
    """
    assignments, masks, grad_masks = [], [], []
    shapes = net.conv_layer_shapes()
    for i, conv in enumerate(net.convs):
        ids, projected = project_pattern_layer(conv.weights, cfg.pattern_set)
        alpha = layer_alpha(shapes[i], i, cfg)
        tensor = WeightTensor.zero_bias(shapes[i], projected.astype(np.float32))
        cmask = project_connectivity(tensor, alpha)
        keep = cmask.kept.astype(np.float64)[:, :, None, None]
        full_mask = keep * cfg.pattern_set.masks()[ids - 1]
        conv.weights[...] = projected * keep
        assignments.append(np.where(cmask.kept, ids, -1))
        masks.append(cmask)
        grad_masks.append(full_mask)
    return assignments, masks, grad_masks


def prune(net: TinyNet, data, cfg: PruneConfig) -> PruneResult:
    """Run the full ADMM loop, hard-project, then fine-tune surviving weights.

    `data` is the labeled training set (x, y). The returned network satisfies
    both constraints exactly; the trace records loss and the Frobenius
    residuals ||W-Z|| and ||W-Y|| per iteration.
    """
    x, y = data
    rng = np.random.default_rng(cfg.seed)
    state = init_state(net, cfg)
    opt = Adam(net.parameters(), lr=cfg.learning_rate)
    trace: List[TraceRow] = []
    for it in range(cfg.admm_iterations):
        loss = admm_step_primal(state, net, (x, y), cfg, rng, opt=opt)
        if cfg.reassign_patterns or it == 0:
            admm_step_auxiliary(state, net, cfg)
        else:
            _frozen_auxiliary(state, net, cfg)
        admm_step_dual(state, net)
        wz = math.sqrt(sum(float(np.sum((c.weights - lv.Z) ** 2))
                           for c, lv in zip(net.convs, state.layers)))
        wy = math.sqrt(sum(float(np.sum((c.weights - lv.Y) ** 2))
                           for c, lv in zip(net.convs, state.layers)))
        trace.append(TraceRow(it, loss, wz, wy))
    assignments, masks, grad_masks = hard_project(net, cfg)
    if cfg.fine_tune_epochs > 0:
        pad = [None] * (len(net.parameters()) - len(grad_masks))
        train(net, x, y, cfg.fine_tune_epochs, lr=cfg.learning_rate,
              batch_size=cfg.batch_size, seed=cfg.seed + 1,
              grad_mask=grad_masks + pad)
    return PruneResult(net, cfg.pattern_set, assignments, masks, trace)


def _frozen_auxiliary(state: AdmmState, net: TinyNet, cfg: PruneConfig) -> None:
    """Keep each kernel's first pattern assignment, re-project values only."""
    shapes = net.conv_layer_shapes()
    pat_masks = cfg.pattern_set.masks()
    for i, (conv, lv) in enumerate(zip(net.convs, state.layers)):
        support = np.abs(lv.Z) > 0
        kernel_live = support.any(axis=(2, 3))
        ids = np.ones(kernel_live.shape, dtype=np.int64)
        for p in cfg.pattern_set:
            match = (support == p.mask()).all(axis=(2, 3))
            ids[match & kernel_live] = p.id
        lv.Z = (conv.weights + lv.U) * pat_masks[ids - 1]
        wv = conv.weights + lv.V
        mask = _connectivity_mask(wv, layer_alpha(shapes[i], i, cfg))
        lv.Y = wv * mask[:, :, None, None]


def check_feasibility(net: TinyNet, cfg: PruneConfig) -> List[Tuple[int, int]]:
    """(nonzero kernel count, alpha) per conv layer; raises if infeasible."""
    report = []
    shapes = net.conv_layer_shapes()
    for i, conv in enumerate(net.convs):
        alpha = layer_alpha(shapes[i], i, cfg)
        nonzero = 0
        for oc in range(conv.weights.shape[0]):
            for ic in range(conv.weights.shape[1]):
                kernel = conv.weights[oc, ic]
                support = [tuple(p) for p in np.argwhere(kernel != 0)]
                if not support:
                    continue
                nonzero += 1
                ok = any(set(support) <= set(p.kept_positions)
                         for p in cfg.pattern_set)
                if not ok:
                    raise AssertionError(
                        f"layer {i} kernel ({oc},{ic}) support off-pattern")
        if nonzero > alpha:
            raise AssertionError(
                f"layer {i} keeps {nonzero} kernels, budget is {alpha}")
        report.append((nonzero, alpha))
    return report


def write_trace_csv(path: str, trace: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iteration", "loss", "pattern_residual",
                         "connectivity_residual"])
        for row in trace:
            writer.writerow([row.iteration, repr(row.loss),
                             repr(row.pattern_residual),
                             repr(row.connectivity_residual)])
