"""FKW compressed weight storage and the CSR baseline.

Five arrays describe a reordered pattern-sparse layer:

  offset   cumulative non-empty kernel counts, one entry per filter plus a
           leading zero
  reorder  original output channel of each stored filter
  index    input channel of each stored kernel, in filter order
  stride   per filter, cumulative kernel counts per pattern id: entry j is
           the offset of the first kernel past pattern j, so run j holds the
           kernels using pattern j. Length is k+1 for non-empty filters and
           0 for empty ones.
  weights  4 retained values per kernel, in sorted-position order

The on-disk format ("FKW1") fixes every integer to unsigned 32-bit little
endian and weights to f32, so serialized bytes hash identically across
platforms. CSR here flattens each filter to a row over in_channel x 3 x 3
columns, storing one column index per nonzero weight.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .patterns import Pattern, PatternSet
from .reorder import (ReorderPlan, SparseKernel, SparseLayer,
                      boundaries_from_lengths)
from .tensors import LayerShape, _atomic_write

FKW_MAGIC = b"FKW1"
FKW_VERSION = 1
WEIGHTS_PER_KERNEL = 4


class FkwFormatError(ValueError):
    """Malformed FKW arrays or bytes; message names the array and position."""


@dataclass(frozen=True, eq=False)
class FkwModel:
    shape: LayerShape
    pattern_set: PatternSet
    offset: np.ndarray
    reorder: np.ndarray
    index: np.ndarray
    stride: tuple  # per-filter int arrays
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.int64))
        object.__setattr__(self, "reorder", np.asarray(self.reorder, dtype=np.int64))
        object.__setattr__(self, "index", np.asarray(self.index, dtype=np.int64))
        object.__setattr__(self, "stride",
                           tuple(np.asarray(s, dtype=np.int64) for s in self.stride))
        object.__setattr__(self, "weights",
                           np.asarray(self.weights, dtype=np.float32))
        validate_fkw(self)

    @property
    def kernel_count(self) -> int:
        return int(self.offset[-1])

    def filter_length(self, stored_filter: int) -> int:
        return int(self.offset[stored_filter + 1] - self.offset[stored_filter])

    def runs(self, stored_filter: int) -> List[Tuple[int, int, int]]:
        """Non-empty (pattern_id, start, end) runs, kernel offsets filter-local."""
        stride = self.stride[stored_filter]
        out = []
        for pid in range(1, len(stride)):
            if stride[pid] > stride[pid - 1]:
                out.append((pid, int(stride[pid - 1]), int(stride[pid])))
        return out

    def to_debug_json(self) -> str:
        payload = {
            "shape": {
                "kernel_h": self.shape.kernel_h, "kernel_w": self.shape.kernel_w,
                "in_channels": self.shape.in_channels,
                "out_channels": self.shape.out_channels,
                "stride": self.shape.stride,
                "input_h": self.shape.input_h, "input_w": self.shape.input_w,
            },
            "pattern_set": json.loads(self.pattern_set.to_json()),
            "offset": self.offset.tolist(),
            "reorder": self.reorder.tolist(),
            "index": self.index.tolist(),
            "stride": [s.tolist() for s in self.stride],
            "weights": [float(w) for w in self.weights],
        }
        return json.dumps(payload, indent=2)


def validate_fkw(model: FkwModel) -> None:
    s = model.shape
    offset, reorder, index = model.offset, model.reorder, model.index
    if offset.shape != (s.out_channels + 1,):
        raise FkwFormatError(f"offset: expected {s.out_channels + 1} entries, "
                             f"got {offset.shape}")
    if offset[0] != 0:
        raise FkwFormatError("offset[0]: must be 0")
    for i in range(1, len(offset)):
        if offset[i] < offset[i - 1]:
            raise FkwFormatError(f"offset[{i}]: decreasing value {offset[i]}")
        if offset[i] - offset[i - 1] > s.in_channels:
            raise FkwFormatError(f"offset[{i}]: filter longer than in_channels")
    total = int(offset[-1])
    if sorted(reorder.tolist()) != list(range(s.out_channels)):
        raise FkwFormatError("reorder: not a permutation of output channels")
    if index.shape != (total,):
        raise FkwFormatError(f"index: expected {total} entries, got {index.shape}")
    for i, ic in enumerate(index.tolist()):
        if not 0 <= ic < s.in_channels:
            raise FkwFormatError(f"index[{i}]: channel {ic} out of range")
    if len(model.stride) != s.out_channels:
        raise FkwFormatError("stride: need one array per stored filter")
    k = model.pattern_set.k
    for f, stride in enumerate(model.stride):
        length = model.filter_length(f)
        if length == 0:
            if len(stride) != 0:
                raise FkwFormatError(f"stride[{f}]: empty filter must have an "
                                     "empty stride array")
            continue
        if len(stride) != k + 1:
            raise FkwFormatError(f"stride[{f}]: expected {k + 1} boundaries, "
                                 f"got {len(stride)}")
        if stride[0] != 0:
            raise FkwFormatError(f"stride[{f}][0]: must be 0")
        for j in range(1, len(stride)):
            if stride[j] < stride[j - 1]:
                raise FkwFormatError(f"stride[{f}][{j}]: decreasing boundary")
        if stride[-1] != length:
            raise FkwFormatError(f"stride[{f}][{k}]: must equal filter "
                                 f"length {length}")
    if model.weights.shape != (WEIGHTS_PER_KERNEL * total,):
        raise FkwFormatError(f"weights: expected {WEIGHTS_PER_KERNEL * total} "
                             f"values, got {model.weights.shape}")
    if not np.all(np.isfinite(model.weights)):
        bad = int(np.argwhere(~np.isfinite(model.weights))[0])
        raise FkwFormatError(f"weights[{bad}]: non-finite value")
    # Kernels inside each filter must keep distinct input channels.
    for f in range(s.out_channels):
        seen = set()
        for i in range(int(offset[f]), int(offset[f + 1])):
            ic = int(index[i])
            if ic in seen:
                raise FkwFormatError(f"index[{i}]: duplicate channel {ic} in "
                                     f"filter {f}")
            seen.add(ic)


def fkw_encode(layer: SparseLayer, plan: ReorderPlan) -> FkwModel:
    """Encode an already-reordered layer; never reorders on its own."""
    s = layer.shape
    if len(plan.filter_permutation) != s.out_channels:
        raise FkwFormatError("reorder: plan does not cover all filters")
    k = layer.pattern_set.k
    offset = [0]
    index: List[int] = []
    stride: List[np.ndarray] = []
    weights: List[float] = []
    for f, kernels in enumerate(layer.filters):
        pids = [kern.pattern_id for kern in kernels]
        if any(b < a for a, b in zip(pids, pids[1:])):
            raise FkwFormatError(
                f"filter {f}: kernels not sorted by pattern id; reorder first")
        offset.append(offset[-1] + len(kernels))
        counts = np.zeros(k + 1, dtype=np.int64)
        for kern in kernels:
            index.append(kern.in_channel)
            weights.extend(kern.weights)
            counts[kern.pattern_id] += 1
        stride.append(np.cumsum(counts) if kernels else np.zeros(0, dtype=np.int64))
    return FkwModel(shape=s, pattern_set=layer.pattern_set,
                    offset=np.array(offset), reorder=np.array(plan.filter_permutation),
                    index=np.array(index, dtype=np.int64), stride=tuple(stride),
                    weights=np.array(weights, dtype=np.float32))


def fkw_decode(model: FkwModel,
               shape: LayerShape = None) -> Tuple[SparseLayer, ReorderPlan]:
    """Exact inverse of fkw_encode.

    Group boundaries are rebuilt as maximal runs of equal filter length,
    which is how every encoder in this package lays filters out.
    """
    if shape is not None and shape != model.shape:
        raise FkwFormatError(f"shape: model carries {model.shape}, caller "
                             f"passed {shape}")
    s = model.shape
    filters = []
    for f in range(s.out_channels):
        base = int(model.offset[f])
        kernels = []
        for pid, start, end in model.runs(f):
            for i in range(base + start, base + end):
                w = model.weights[4 * i:4 * i + 4]
                kernels.append(SparseKernel(int(model.index[i]), pid,
                                            tuple(float(v) for v in w)))
        filters.append(tuple(kernels))
    layer = SparseLayer(s, tuple(filters), model.pattern_set)
    plan = ReorderPlan(tuple(int(r) for r in model.reorder),
                       boundaries_from_lengths(layer.filter_lengths()))
    return layer, plan


# ---------------------------------------------------------------------------
# CSR baseline over the flattened (out_channels) x (in_channels*3*3) matrix.

@dataclass(frozen=True, eq=False)
class CsrLayer:
    shape: LayerShape
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row_ptr", np.asarray(self.row_ptr, dtype=np.int64))
        object.__setattr__(self, "col_idx", np.asarray(self.col_idx, dtype=np.int64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float32))
        s = self.shape
        cols = s.in_channels * s.kernel_h * s.kernel_w
        if self.row_ptr.shape != (s.out_channels + 1,) or self.row_ptr[0] != 0:
            raise FkwFormatError("row_ptr: bad length or leading entry")
        if np.any(np.diff(self.row_ptr) < 0):
            raise FkwFormatError("row_ptr: decreasing")
        nnz = int(self.row_ptr[-1])
        if self.col_idx.shape != (nnz,) or self.values.shape != (nnz,):
            raise FkwFormatError("col_idx/values: length mismatch with row_ptr")
        if nnz and (self.col_idx.min() < 0 or self.col_idx.max() >= cols):
            raise FkwFormatError("col_idx: column out of range")


def csr_encode(layer: SparseLayer, plan: ReorderPlan = None) -> CsrLayer:
    """CSR view of the same layer, rows in original output-channel order.

    All 4 retained weights of each kernel are stored (they are the
    structural nonzeros the format must index).
    """
    s = layer.shape
    rows: List[List[Tuple[int, float]]] = [[] for _ in range(s.out_channels)]
    for slot, kernels in enumerate(layer.filters):
        oc = plan.filter_permutation[slot] if plan is not None else slot
        for k in kernels:
            pattern = layer.pattern_set[k.pattern_id]
            for value, (r, c) in zip(k.weights, pattern.kept_positions):
                col = (k.in_channel * s.kernel_h + r) * s.kernel_w + c
                rows[oc].append((col, value))
    row_ptr = [0]
    col_idx: List[int] = []
    values: List[float] = []
    for row in rows:
        for col, value in sorted(row):
            col_idx.append(col)
            values.append(value)
        row_ptr.append(len(col_idx))
    return CsrLayer(s, np.array(row_ptr), np.array(col_idx, dtype=np.int64),
                    np.array(values, dtype=np.float32))


INT_BYTES = 4  # every structure array element is u32 on disk


def structure_overhead(model) -> int:
    """Bytes of all non-weight arrays in the given compressed layer."""
    if isinstance(model, FkwModel):
        stride_entries = sum(len(s) for s in model.stride)
        entries = (len(model.offset) + len(model.reorder) + len(model.index)
                   + stride_entries)
        return INT_BYTES * entries
    if isinstance(model, CsrLayer):
        return INT_BYTES * (len(model.row_ptr) + len(model.col_idx))
    raise TypeError(f"no structure overhead defined for {type(model).__name__}")


# ---------------------------------------------------------------------------
# FKW1 bytes.

def fkw_to_bytes(model: FkwModel) -> bytes:
    s = model.shape
    parts = [FKW_MAGIC, struct.pack("<H", FKW_VERSION)]
    parts.append(struct.pack("<7I", s.kernel_h, s.kernel_w, s.in_channels,
                             s.out_channels, s.stride, s.input_h, s.input_w))
    parts.append(struct.pack("<I", model.pattern_set.k))
    for pattern in model.pattern_set:
        for r, c in pattern.kept_positions:
            parts.append(struct.pack("<2I", r, c))
    for array in (model.offset, model.reorder, model.index):
        parts.append(struct.pack("<I", len(array)))
        parts.append(array.astype("<u4").tobytes())
    parts.append(struct.pack("<I", len(model.stride)))
    for stride in model.stride:
        parts.append(struct.pack("<I", len(stride)))
        parts.append(stride.astype("<u4").tobytes())
    parts.append(struct.pack("<I", len(model.weights)))
    parts.append(model.weights.astype("<f4").tobytes())
    return b"".join(parts)


def fkw_from_bytes(blob: bytes) -> FkwModel:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FkwFormatError(f"file: truncated at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    def u32(count: int = 1):
        vals = struct.unpack(f"<{count}I", take(4 * count))
        return vals[0] if count == 1 else vals

    if take(4) != FKW_MAGIC:
        raise FkwFormatError("file: bad magic, not an FKW1 file")
    version = struct.unpack("<H", take(2))[0]
    if version != FKW_VERSION:
        raise FkwFormatError(f"file: unsupported version {version}")
    kh, kw, cin, cout, conv_stride, ih, iw = u32(7)
    shape = LayerShape(kh, kw, cin, cout, conv_stride, ih, iw)
    k = u32()
    patterns = []
    for _ in range(k):
        positions = [tuple(u32(2)) for _ in range(WEIGHTS_PER_KERNEL)]
        patterns.append(Pattern(tuple(positions)))
    pattern_set = PatternSet(tuple(patterns))
    arrays = []
    for _ in range(3):  # offset, reorder, index
        n = u32()
        arrays.append(np.frombuffer(take(4 * n), dtype="<u4").astype(np.int64))
    n_filters = u32()
    if n_filters != cout:
        raise FkwFormatError(f"stride: {n_filters} arrays for {cout} filters")
    stride = []
    for _ in range(n_filters):
        n = u32()
        stride.append(np.frombuffer(take(4 * n), dtype="<u4").astype(np.int64))
    n = u32()
    weights = np.frombuffer(take(4 * n), dtype="<f4").copy()
    if pos != len(blob):
        raise FkwFormatError(f"file: {len(blob) - pos} trailing bytes")
    return FkwModel(shape=shape, pattern_set=pattern_set, offset=arrays[0],
                    reorder=arrays[1], index=arrays[2], stride=tuple(stride),
                    weights=weights)


def write_fkw(path: str, model: FkwModel) -> None:
    _atomic_write(path, fkw_to_bytes(model))


def read_fkw(path: str) -> FkwModel:
    with open(path, "rb") as handle:
        return fkw_from_bytes(handle.read())
