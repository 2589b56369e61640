"""Pattern-specialized execution of FKW layers with abstract load accounting.

A "register load" here is one read of an input element into the innermost
compute scope; SIMD widths are not modeled. Three regimes:

  reorder off   generic sparse execution. Kernels dispatch one by one and
                each loads its full 3x3 window per output position.
  reorder on    stride-array-driven dispatch, one specialized routine per
                pattern run. Each kernel loads only the 4 elements its
                pattern touches per output position.
  + LRE on      vertical register carry inside a row tile (an element
                already loaded for the previous output row is reused), and
                with unroll_oc >= 2 filters in the same unroll group share
                the loads of kernels with identical (pattern, in_channel).

Dispatch happens once per filter when the routine table is built, the way a
code generator would resolve it, so branch_events is independent of tiling.
The measured LoadStats must match `lre_load_model` exactly; that closed-form
model is the executor's contract.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Tuple

import numpy as np

from .fkw import FkwModel
from .tensors import FeatureMap, ShapeError

SUPPORTED_PERMUTATIONS = ("cohwci_b", "hwcico_b", "cicohw_b", "cocihw_b")


class ConfigError(ValueError):
    """Execution configuration outside the supported space."""


@dataclass(frozen=True)
class ExecConfig:
    loop_permutation: str = "cohwci_b"
    tile_h: int = 4
    tile_w: int = 4
    tile_oc: int = 4
    tile_ic: int = 4
    unroll_oc: int = 1
    unroll_iw: int = 1
    lre_enabled: bool = True
    reorder_enabled: bool = True

    def normalized(self, shape) -> "ExecConfig":
        """Clamp tiles to the layer and unrolls to their tile extents."""
        if self.loop_permutation not in SUPPORTED_PERMUTATIONS:
            raise ConfigError(
                f"loop permutation {self.loop_permutation!r} not supported; "
                f"pick one of {SUPPORTED_PERMUTATIONS}")
        for name in ("tile_h", "tile_w", "tile_oc", "tile_ic",
                     "unroll_oc", "unroll_iw"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lre_enabled and not self.reorder_enabled:
            raise ConfigError("LRE needs reordered (branch-free) execution")
        tile_h = min(self.tile_h, shape.output_h)
        tile_w = min(self.tile_w, shape.output_w)
        tile_oc = min(self.tile_oc, shape.out_channels)
        tile_ic = min(self.tile_ic, shape.in_channels)
        return replace(self, tile_h=tile_h, tile_w=tile_w, tile_oc=tile_oc,
                       tile_ic=tile_ic,
                       unroll_oc=min(self.unroll_oc, tile_oc),
                       unroll_iw=min(self.unroll_iw, tile_w))

    def to_json_dict(self) -> dict:
        return {"loop_permutation": self.loop_permutation,
                "tile": {"h": self.tile_h, "w": self.tile_w,
                         "oc": self.tile_oc, "ic": self.tile_ic},
                "unroll": {"oc": self.unroll_oc, "iw": self.unroll_iw},
                "lre_enabled": self.lre_enabled,
                "reorder_enabled": self.reorder_enabled}

    @classmethod
    def from_json_dict(cls, payload: dict) -> "ExecConfig":
        return cls(loop_permutation=payload["loop_permutation"],
                   tile_h=payload["tile"]["h"], tile_w=payload["tile"]["w"],
                   tile_oc=payload["tile"]["oc"], tile_ic=payload["tile"]["ic"],
                   unroll_oc=payload["unroll"]["oc"],
                   unroll_iw=payload["unroll"]["iw"],
                   lre_enabled=payload.get("lre_enabled", True),
                   reorder_enabled=payload.get("reorder_enabled", True))


# Conservative baseline configuration; the auto-tuner is measured against it.
DEFAULT_CONFIG = ExecConfig(loop_permutation="cohwci_b", tile_h=1, tile_w=4,
                            tile_oc=1, tile_ic=1, unroll_oc=1, unroll_iw=1,
                            lre_enabled=True, reorder_enabled=True)


@dataclass
class LoadStats:
    input_element_loads: int = 0
    weight_loads: int = 0
    branch_events: int = 0

    def __add__(self, other: "LoadStats") -> "LoadStats":
        return LoadStats(self.input_element_loads + other.input_element_loads,
                         self.weight_loads + other.weight_loads,
                         self.branch_events + other.branch_events)

    def to_json_dict(self) -> dict:
        return {"input_element_loads": self.input_element_loads,
                "weight_loads": self.weight_loads,
                "branch_events": self.branch_events}


@dataclass
class _Slot:
    """One unit of input traffic: a (pattern, in_channel) access sequence
    consumed by one or more kernels (several only under filter-level LRE)."""

    positions: tuple
    ic: int
    members: list  # (original output channel, weight vector per position)


def _grid_positions(kh: int, kw: int) -> tuple:
    return tuple((r, c) for r in range(kh) for c in range(kw))


def _unroll_segments(lengths: np.ndarray, tile_oc: int) -> List[Tuple[int, int]]:
    """Maximal filter ranges with one length, not crossing oc-tile borders."""
    segments = []
    start = 0
    for f in range(1, len(lengths) + 1):
        if (f == len(lengths) or lengths[f] != lengths[start]
                or f % tile_oc == 0):
            segments.append((start, f))
            start = f
    return segments


def _compile(model: FkwModel, cfg: ExecConfig):
    """Build per-group slot programs; counts dispatches and weight loads."""
    s = model.shape
    lengths = np.diff(model.offset)
    sharing = cfg.lre_enabled and cfg.reorder_enabled and cfg.unroll_oc >= 2
    weights64 = model.weights.astype(np.float64)
    grid = _grid_positions(s.kernel_h, s.kernel_w)
    branch_events = 0
    groups: List[List[_Slot]] = []
    for seg_start, seg_end in _unroll_segments(lengths, cfg.tile_oc):
        for start in range(seg_start, seg_end, cfg.unroll_oc):
            slots: Dict = {}
            for f in range(start, min(start + cfg.unroll_oc, seg_end)):
                oc = int(model.reorder[f])
                base = int(model.offset[f])
                runs = model.runs(f)
                if cfg.reorder_enabled:
                    branch_events += len(runs)
                else:
                    branch_events += int(lengths[f])
                for pid, run_start, run_end in runs:
                    pattern = model.pattern_set[pid]
                    for i in range(base + run_start, base + run_end):
                        ic = int(model.index[i])
                        w4 = weights64[4 * i:4 * i + 4]
                        if cfg.reorder_enabled:
                            positions = pattern.kept_positions
                            wvec = w4
                            key = (pid, ic) if sharing else ("solo", f, i)
                        else:
                            dense = np.zeros((s.kernel_h, s.kernel_w))
                            for value, (r, c) in zip(w4, pattern.kept_positions):
                                dense[r, c] = value
                            positions = grid
                            wvec = dense.ravel()
                            key = ("solo", f, i)
                        slot = slots.get(key)
                        if slot is None:
                            slot = slots[key] = _Slot(positions, ic, [])
                        slot.members.append((oc, wvec))
            groups.append(list(slots.values()))
    return groups, branch_events, 4 * model.kernel_count


def _tiles(extent: int, size: int) -> List[Tuple[int, int]]:
    return [(a, min(a + size, extent)) for a in range(0, extent, size)]


def _compute_block(slots, y0, y1, x0, x1, c0, c1, in64, out64, stride, carry):
    loads = 0
    width = x1 - x0
    for slot in slots:
        if not c0 <= slot.ic < c1:
            continue
        plane = in64[slot.ic]
        prev: Dict = {}
        for y in range(y0, y1):
            cur: Dict = {}
            for r, c in slot.positions:
                vec = prev.get((r + stride, c)) if carry else None
                if vec is None:
                    row = y * stride + r
                    start = x0 * stride + c
                    vec = plane[row, start:start + stride * width:stride]
                    loads += width
                cur[(r, c)] = vec
            for oc, wvec in slot.members:
                acc = out64[oc, y, x0:x1]
                for w, pos in zip(wvec, slot.positions):
                    if w != 0.0:
                        acc += w * cur[pos]
            prev = cur
    return loads


def _execute_groups(groups, model, cfg: ExecConfig, in64, out64) -> int:
    s = model.shape
    h_tiles = _tiles(s.output_h, cfg.tile_h)
    w_tiles = _tiles(s.output_w, cfg.tile_w)
    ic_tiles = _tiles(s.in_channels, cfg.tile_ic)
    carry = cfg.lre_enabled
    stride = s.stride
    loads = 0
    perm = cfg.loop_permutation
    if perm == "cohwci_b":
        for g in groups:
            for y0, y1 in h_tiles:
                for x0, x1 in w_tiles:
                    for c0, c1 in ic_tiles:
                        loads += _compute_block(g, y0, y1, x0, x1, c0, c1,
                                                in64, out64, stride, carry)
    elif perm == "hwcico_b":
        for y0, y1 in h_tiles:
            for x0, x1 in w_tiles:
                for c0, c1 in ic_tiles:
                    for g in groups:
                        loads += _compute_block(g, y0, y1, x0, x1, c0, c1,
                                                in64, out64, stride, carry)
    elif perm == "cicohw_b":
        for c0, c1 in ic_tiles:
            for g in groups:
                for y0, y1 in h_tiles:
                    for x0, x1 in w_tiles:
                        loads += _compute_block(g, y0, y1, x0, x1, c0, c1,
                                                in64, out64, stride, carry)
    elif perm == "cocihw_b":
        for g in groups:
            for c0, c1 in ic_tiles:
                for y0, y1 in h_tiles:
                    for x0, x1 in w_tiles:
                        loads += _compute_block(g, y0, y1, x0, x1, c0, c1,
                                                in64, out64, stride, carry)
    else:  # unreachable after normalization
        raise ConfigError(f"unknown permutation {perm!r}")
    return loads


def conv_fkw(input: FeatureMap, model: FkwModel, cfg: ExecConfig,
             threads: int = 1) -> Tuple[FeatureMap, LoadStats]:
    """Execute one FKW layer.

    Output channels land in original (pre-reorder) order; results are
    identical for every valid config and bit-identical across thread counts.
    """
    s = model.shape
    if (input.channels, input.height, input.width) != (s.in_channels,
                                                       s.input_h, s.input_w):
        raise ShapeError(
            f"input {input.channels}x{input.height}x{input.width} does not "
            f"match layer {s.in_channels}x{s.input_h}x{s.input_w}")
    eff = cfg.normalized(s)
    groups, branch_events, weight_loads = _compile(model, eff)
    in64 = input.data.astype(np.float64)
    out64 = np.zeros((s.out_channels, s.output_h, s.output_w), dtype=np.float64)
    if threads <= 1 or len(groups) <= 1:
        loads = _execute_groups(groups, model, eff, in64, out64)
    else:
        threads = min(threads, len(groups))
        chunk = math.ceil(len(groups) / threads)
        parts = [groups[i:i + chunk] for i in range(0, len(groups), chunk)]
        with ThreadPoolExecutor(max_workers=len(parts)) as pool:
            futures = [pool.submit(_execute_groups, part, model, eff, in64, out64)
                       for part in parts]
            loads = sum(f.result() for f in futures)
    stats = LoadStats(input_element_loads=loads, weight_loads=weight_loads,
                      branch_events=branch_events)
    return FeatureMap(out64.astype(np.float32)), stats


def conv_csr(input: FeatureMap, layer) -> FeatureMap:
    """Baseline sparse execution straight from CSR (timing comparison only)."""
    s = layer.shape
    if (input.channels, input.height, input.width) != (s.in_channels,
                                                       s.input_h, s.input_w):
        raise ShapeError("input does not match the CSR layer geometry")
    in64 = input.data.astype(np.float64)
    oh, ow = s.output_h, s.output_w
    out64 = np.zeros((s.out_channels, oh, ow), dtype=np.float64)
    stride = s.stride
    kh_kw = s.kernel_h * s.kernel_w
    for oc in range(s.out_channels):
        acc = out64[oc]
        for i in range(int(layer.row_ptr[oc]), int(layer.row_ptr[oc + 1])):
            col = int(layer.col_idx[i])
            ic, rc = divmod(col, kh_kw)
            r, c = divmod(rc, s.kernel_w)
            patch = in64[ic, r:r + stride * oh:stride, c:c + stride * ow:stride]
            acc += float(layer.values[i]) * patch
    return FeatureMap(out64.astype(np.float32))


def _vertical_nonshared(positions, stride: int) -> int:
    """Pattern positions whose load cannot be carried from the previous row."""
    pos = set(positions)
    return sum(1 for r, c in positions if (r + stride, c) not in pos)


def lre_load_model(model: FkwModel, cfg: ExecConfig) -> LoadStats:
    """Closed-form prediction of conv_fkw's LoadStats for this config."""
    s = model.shape
    eff = cfg.normalized(s)
    oh, ow = s.output_h, s.output_w
    total = model.kernel_count
    weight_loads = 4 * total
    if not eff.reorder_enabled:
        branch = total
        input_loads = s.kernel_h * s.kernel_w * oh * ow * total
        return LoadStats(input_loads, weight_loads, branch)
    branch = sum(len(model.runs(f)) for f in range(s.out_channels))
    if not eff.lre_enabled:
        return LoadStats(4 * oh * ow * total, weight_loads, branch)
    row_tiles = math.ceil(oh / eff.tile_h)
    sharing = eff.unroll_oc >= 2
    lengths = np.diff(model.offset)
    input_loads = 0
    for seg_start, seg_end in _unroll_segments(lengths, eff.tile_oc):
        for start in range(seg_start, seg_end, eff.unroll_oc):
            slot_keys = []
            for f in range(start, min(start + eff.unroll_oc, seg_end)):
                base = int(model.offset[f])
                for pid, run_start, run_end in model.runs(f):
                    for i in range(base + run_start, base + run_end):
                        slot_keys.append((pid, int(model.index[i])))
            if sharing:
                slot_keys = list(dict.fromkeys(slot_keys))
            for pid, _ in slot_keys:
                ns = _vertical_nonshared(
                    model.pattern_set[pid].kept_positions, s.stride)
                input_loads += ow * (4 * row_tiles + (oh - row_tiles) * ns)
    return LoadStats(input_loads, weight_loads, branch)
