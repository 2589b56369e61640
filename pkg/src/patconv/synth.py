"""Synthetic inputs: the two-blob toy task and generated sparse layers.

Everything here is seeded and generated in-process so the test suite and the
CLI never touch external datasets.
"""

from __future__ import annotations

import math
from typing import List, Tuple

import numpy as np

from .nets import ConvLayer, DenseLayer, TinyNet
from .patterns import ALL_PATTERNS, PatternSet
from .reorder import (ReorderPlan, SparseKernel, SparseLayer,
                      boundaries_from_lengths, reorder)
from .tensors import FeatureMap, LayerShape


def two_blob_dataset(n: int, seed: int, size: int = 8):
    """Two-class images: a Gaussian blob in one of two corners, plus noise."""
    rng = np.random.default_rng(seed)
    centers = {0: (2.5, 2.5), 1: (size - 3.5, size - 3.5)}
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = rng.integers(0, 2, size=n)
    images = np.zeros((n, 1, size, size), dtype=np.float64)
    for i, label in enumerate(labels):
        cy, cx = centers[int(label)]
        cy += rng.uniform(-0.75, 0.75)
        cx += rng.uniform(-0.75, 0.75)
        blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * 1.1 ** 2))
        images[i, 0] = blob + rng.normal(0.0, 0.08, size=(size, size))
    return images, labels.astype(np.int64)


def build_toy_net(seed: int, channels: Tuple[int, int] = (6, 8),
                  size: int = 8, classes: int = 2) -> TinyNet:
    """Two 3x3 CONV+ReLU layers and an FC head on a 1-channel square input."""
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    w1 = rng.normal(0.0, math.sqrt(2.0 / 9), size=(c1, 1, 3, 3))
    w2 = rng.normal(0.0, math.sqrt(2.0 / (9 * c1)), size=(c2, c1, 3, 3))
    feat = c2 * (size - 4) ** 2
    wf = rng.normal(0.0, math.sqrt(1.0 / feat), size=(classes, feat))
    return TinyNet([ConvLayer(w1), ConvLayer(w2)],
                   DenseLayer(wf, np.zeros(classes)),
                   input_shape=(1, size, size), loss_kind="softmax_ce")


def random_feature_map(shape: LayerShape, rng: np.random.Generator) -> FeatureMap:
    data = rng.normal(0.0, 1.0, size=(shape.in_channels, shape.input_h,
                                      shape.input_w))
    return FeatureMap(data.astype(np.float32))


def random_pattern_set(k: int, rng: np.random.Generator) -> PatternSet:
    picks = rng.choice(len(ALL_PATTERNS), size=k, replace=False)
    return PatternSet(tuple(ALL_PATTERNS[i] for i in sorted(picks)))


def random_sparse_layer(shape: LayerShape, pattern_set: PatternSet,
                        rng: np.random.Generator,
                        keep_probability: float = 0.6) -> SparseLayer:
    """Unordered sparse layer with random kernels; feed through reorder()."""
    filters = []
    for _ in range(shape.out_channels):
        kernels = []
        for ic in range(shape.in_channels):
            if rng.random() >= keep_probability:
                continue
            pid = int(rng.integers(1, pattern_set.k + 1))
            values = tuple(float(v) for v in rng.normal(0.0, 1.0, size=4))
            kernels.append(SparseKernel(ic, pid, values))
        filters.append(tuple(kernels))
    return SparseLayer(shape, tuple(filters), pattern_set)


def reordered_random_layer(shape: LayerShape, pattern_set: PatternSet,
                           rng: np.random.Generator,
                           keep_probability: float = 0.6):
    layer = random_sparse_layer(shape, pattern_set, rng, keep_probability)
    return reorder(layer)


def synthetic_pruned_layer(c_in: int, c_out: int, k: int, kernels_kept: int,
                           seed: int, input_h: int = 16, input_w: int = 16,
                           similar_pairs: bool = False):
    """Reordered sparse layer with an exact surviving-kernel budget.

    Kernels are spread round-robin over filters; with similar_pairs, even
    filters duplicate the (pattern, channel) structure of their successor so
    filter-level load sharing has something to eliminate.
    """
    rng = np.random.default_rng(seed)
    shape = LayerShape(3, 3, c_in, c_out, 1, input_h, input_w)
    if kernels_kept > shape.kernel_count:
        raise ValueError("kernel budget exceeds the layer's kernel count")
    pattern_set = random_pattern_set(k, rng)
    per_filter = [kernels_kept // c_out] * c_out
    for i in range(kernels_kept % c_out):
        per_filter[i] += 1
    filters = []
    for oc in range(c_out):
        count = per_filter[oc]
        channels = sorted(rng.choice(c_in, size=count, replace=False).tolist())
        pids = sorted(int(rng.integers(1, k + 1)) for _ in range(count))
        kernels = tuple(
            SparseKernel(ic, pid, tuple(float(v)
                                        for v in rng.normal(0.0, 1.0, size=4)))
            for pid, ic in sorted(zip(pids, channels)))
        filters.append(kernels)
    if similar_pairs:
        for oc in range(0, c_out - 1, 2):
            filters[oc] = tuple(
                SparseKernel(k2.in_channel, k2.pattern_id,
                             tuple(float(v) for v in rng.normal(0.0, 1.0, size=4)))
                for k2 in filters[oc + 1])
    layer = SparseLayer(shape, tuple(filters), pattern_set)
    return reorder(layer)


def vgg_like_desk_layer(seed: int = 0, k: int = 8):
    """Desk-scale stand-in for a mid-network 3x3 VGG layer."""
    c_in, c_out = 16, 32
    kept = math.ceil(c_in * c_out / 3.6)
    return synthetic_pruned_layer(c_in, c_out, k, kept, seed,
                                  input_h=16, input_w=16, similar_pairs=True)


def big_pruned_layer(pruning_rate: float, seed: int = 0, k: int = 8,
                     c_in: int = 512, c_out: int = 512):
    """512x512x3x3-scale layer at a target overall weight reduction.

    Structure arrays only need the right sizes, so construction stays fast:
    kernels are laid out directly in sorted order with an identity-style
    plan instead of running the greedy reorder.
    """
    rng = np.random.default_rng(seed)
    shape = LayerShape(3, 3, c_in, c_out, 1, 16, 16)
    total_weights = c_in * c_out * 9
    kernels_kept = max(c_out, int(round(total_weights / pruning_rate / 4)))
    base, extra = divmod(kernels_kept, c_out)
    pattern_set = random_pattern_set(k, rng)
    filters = []
    for oc in range(c_out):
        count = base + (1 if oc < extra else 0)
        channels = np.sort(rng.choice(c_in, size=count, replace=False))
        pids = np.sort(rng.integers(1, k + 1, size=count))
        kernels = tuple(SparseKernel(int(ic), int(pid), (0.5, -0.25, 0.75, 1.0))
                        for pid, ic in sorted(zip(pids.tolist(), channels.tolist())))
        filters.append(kernels)
    order = sorted(range(c_out), key=lambda f: (-len(filters[f]), f))
    lengths = [len(filters[f]) for f in order]
    plan = ReorderPlan(tuple(order), boundaries_from_lengths(lengths))
    layer = SparseLayer(shape, tuple(filters[f] for f in order), pattern_set)
    return layer, plan
