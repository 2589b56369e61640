"""Filter kernel reorder: group filters by length and similarity, sort kernels.

Two phases. Filters are first grouped by non-empty kernel count (longest
group first, empty filters last) and ordered inside each group by a greedy
similarity walk; then each filter's kernels are sorted by (pattern id,
input channel). The output-channel permutation needed to undo the filter
shuffle is recorded in a ReorderPlan.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .patterns import PatternSet, natural_pattern
from .tensors import FeatureMap, LayerShape, ShapeError, WeightTensor


@dataclass(frozen=True)
class SparseKernel:
    in_channel: int
    pattern_id: int
    weights: tuple  # 4 retained values, in sorted-position order

    def __post_init__(self):
        # weights are float32 throughout the toolchain; coercing here keeps
        # encode/decode exact
        object.__setattr__(self, "weights",
                           tuple(float(np.float32(w)) for w in self.weights))
        if len(self.weights) != 4:
            raise ValueError("pattern kernels carry exactly 4 weights")


@dataclass(frozen=True, eq=False)
class SparseLayer:
    """Pattern-pruned layer: per filter, a list of surviving kernels."""

    shape: LayerShape
    filters: tuple  # tuple of filters; each filter is a tuple of SparseKernel
    pattern_set: PatternSet

    def __post_init__(self):
        filters = tuple(tuple(f) for f in self.filters)
        if len(filters) != self.shape.out_channels:
            raise ShapeError(
                f"{len(filters)} filters for {self.shape.out_channels} output channels")
        for fi, kernels in enumerate(filters):
            seen = set()
            for k in kernels:
                if not 0 <= k.in_channel < self.shape.in_channels:
                    raise ShapeError(f"filter {fi}: in_channel {k.in_channel} out of range")
                if k.in_channel in seen:
                    raise ShapeError(f"filter {fi}: duplicate in_channel {k.in_channel}")
                seen.add(k.in_channel)
                if not 1 <= k.pattern_id <= self.pattern_set.k:
                    raise ValueError(f"filter {fi}: pattern id {k.pattern_id} not in set")
                if not all(np.isfinite(k.weights)):
                    raise ValueError(f"filter {fi}: non-finite weight")
        object.__setattr__(self, "filters", filters)

    @property
    def kernel_count(self) -> int:
        return sum(len(f) for f in self.filters)

    def filter_lengths(self) -> List[int]:
        return [len(f) for f in self.filters]


@dataclass(frozen=True)
class ReorderPlan:
    """filter_permutation[i] = original output channel stored at slot i."""

    filter_permutation: tuple
    group_boundaries: tuple  # (start, end, filter_length) triples

    def __post_init__(self):
        perm = tuple(int(p) for p in self.filter_permutation)
        if sorted(perm) != list(range(len(perm))):
            raise ValueError("filter_permutation is not a permutation")
        groups = tuple((int(a), int(b), int(n)) for a, b, n in self.group_boundaries)
        cursor = 0
        for start, end, _ in groups:
            if start != cursor or end <= start:
                raise ValueError("group boundaries must partition the filter list")
            cursor = end
        if groups and cursor != len(perm):
            raise ValueError("group boundaries do not cover all filters")
        object.__setattr__(self, "filter_permutation", perm)
        object.__setattr__(self, "group_boundaries", groups)

    @classmethod
    def identity(cls, lengths: Sequence[int]) -> "ReorderPlan":
        return cls(tuple(range(len(lengths))), boundaries_from_lengths(lengths))

    def position_of(self, original_channel: int) -> int:
        return self.filter_permutation.index(original_channel)

    def to_json_dict(self) -> dict:
        return {"filter_permutation": list(self.filter_permutation),
                "group_boundaries": [list(g) for g in self.group_boundaries]}


def boundaries_from_lengths(lengths: Sequence[int]) -> tuple:
    """Maximal runs of equal filter length."""
    groups = []
    start = 0
    for i in range(1, len(lengths) + 1):
        if i == len(lengths) or lengths[i] != lengths[start]:
            groups.append((start, i, lengths[start]))
            start = i
    return tuple(groups)


def _sort_kernels(kernels) -> tuple:
    return tuple(sorted(kernels, key=lambda k: (k.pattern_id, k.in_channel)))


def _signature(kernels) -> tuple:
    return tuple((k.pattern_id, k.in_channel) for k in kernels)


def _similarity(a, b) -> int:
    """Kernels at identical positions with identical pattern ids."""
    return sum(1 for ka, kb in zip(a, b) if ka.pattern_id == kb.pattern_id)


def reorder(layer: SparseLayer) -> Tuple[SparseLayer, ReorderPlan]:
    """Filter reorder + kernel reorder; semantics preserved modulo the plan."""
    sorted_filters = [_sort_kernels(f) for f in layer.filters]
    by_length = {}
    for idx, kernels in enumerate(sorted_filters):
        by_length.setdefault(len(kernels), []).append(idx)

    permutation: List[int] = []
    boundaries = []
    for length in sorted(by_length, reverse=True):
        members = by_length[length]
        ordered = _greedy_similarity_order(members, sorted_filters)
        boundaries.append((len(permutation), len(permutation) + len(members), length))
        permutation.extend(ordered)

    plan = ReorderPlan(tuple(permutation), tuple(boundaries))
    reordered = SparseLayer(layer.shape,
                            tuple(sorted_filters[i] for i in permutation),
                            layer.pattern_set)
    return reordered, plan


def _greedy_similarity_order(members: List[int], filters) -> List[int]:
    """Seed with the smallest signature, then append the most similar filter.

    Ties fall back to the original filter index so runs are reproducible.
    """
    if len(members) <= 1:
        return list(members)
    remaining = sorted(members, key=lambda i: (_signature(filters[i]), i))
    ordered = [remaining.pop(0)]
    while remaining:
        last = filters[ordered[-1]]
        best = max(remaining, key=lambda i: (_similarity(last, filters[i]), -i))
        remaining.remove(best)
        ordered.append(best)
    return ordered


def apply_inverse_reorder(output: FeatureMap, plan: ReorderPlan) -> FeatureMap:
    """Undo the filter shuffle on an output computed in stored order."""
    if output.channels != len(plan.filter_permutation):
        raise ShapeError(
            f"output has {output.channels} channels, plan covers "
            f"{len(plan.filter_permutation)}")
    result = np.empty_like(output.data)
    for stored, original in enumerate(plan.filter_permutation):
        result[original] = output.data[stored]
    return FeatureMap(result)


def sparse_from_dense(weights: WeightTensor, pattern_set: PatternSet,
                      assignments: np.ndarray = None) -> SparseLayer:
    """Build a SparseLayer from a pruned dense tensor.

    Zero kernels are dropped. When `assignments` (pattern ids, -1 for
    pruned) is omitted, each surviving kernel must sit exactly on some
    candidate's support; the kernel's own 4 largest positions decide
    between candidates that both cover it.
    """
    s = weights.shape
    if (s.kernel_h, s.kernel_w) != (3, 3):
        raise ShapeError("pattern sparse layers require 3x3 kernels")
    filters = []
    for oc in range(s.out_channels):
        kernels = []
        for ic in range(s.in_channels):
            kernel = weights.data[oc, ic]
            if assignments is not None:
                pid = int(assignments[oc, ic])
                if pid < 0:
                    continue
                pattern = pattern_set[pid]
            else:
                if not kernel.any():
                    continue
                support = {tuple(p) for p in np.argwhere(kernel != 0)}
                pattern = pattern_set.find(
                    natural_pattern(kernel).kept_positions)
                if pattern is None or not support <= set(pattern.kept_positions):
                    pattern = next((p for p in pattern_set
                                    if support <= set(p.kept_positions)), None)
                if pattern is None:
                    raise ValueError(
                        f"kernel ({oc},{ic}) support matches no candidate pattern")
            values = tuple(float(kernel[pos]) for pos in pattern.kept_positions)
            kernels.append(SparseKernel(ic, pattern.id, values))
        filters.append(tuple(kernels))
    return SparseLayer(s, tuple(filters), pattern_set)


def dense_from_sparse(layer: SparseLayer, plan: ReorderPlan = None,
                      bias: np.ndarray = None) -> WeightTensor:
    """Masked dense tensor equivalent to the sparse layer.

    Pass the layer's ReorderPlan to place filters back on their original
    output channels; without it, filters land in stored order.
    """
    s = layer.shape
    data = np.zeros((s.out_channels, s.in_channels, 3, 3), dtype=np.float32)
    for slot, kernels in enumerate(layer.filters):
        oc = plan.filter_permutation[slot] if plan is not None else slot
        for k in kernels:
            pattern = layer.pattern_set[k.pattern_id]
            for value, (r, c) in zip(k.weights, pattern.kept_positions):
                data[oc, k.in_channel, r, c] = np.float32(value)
    if bias is None:
        bias = np.zeros(s.out_channels, dtype=np.float32)
    return WeightTensor(s, data, bias)
