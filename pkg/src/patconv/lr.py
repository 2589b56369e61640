"""Layerwise manifest: the JSON contract between pruning output and executor.

One record per layer ties together the pattern inventory, the compressed
weight file, and the tuned execution parameters. Parsing collects every
violation (with JSON paths) instead of stopping at the first; emission is
canonical (fixed key order, 2-space indent, trailing newline) so manifests
hash stably and re-emit byte-identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .executor import SUPPORTED_PERMUTATIONS, ExecConfig
from .patterns import Pattern, PatternError, PatternSet
from .tensors import LayerShape, ShapeError

LR_VERSION = "1"
_SHAPE_KEYS = ("kernel_h", "kernel_w", "in_channels", "out_channels",
               "stride", "input_h", "input_w")


class LrValidationError(ValueError):
    """Carries the full list of schema violations."""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class LayerRecord:
    name: str
    device: str
    patterns: tuple  # pattern ids present in the layer
    fkw_file: str
    loop_permutation: str
    tile: tuple      # (h, w, oc, ic)
    unroll: tuple    # (oc, iw)
    shape: LayerShape

    def exec_config(self) -> ExecConfig:
        th, tw, toc, tic = self.tile
        uoc, uiw = self.unroll
        return ExecConfig(loop_permutation=self.loop_permutation,
                          tile_h=th, tile_w=tw, tile_oc=toc, tile_ic=tic,
                          unroll_oc=uoc, unroll_iw=uiw,
                          lre_enabled=True, reorder_enabled=True)

    @classmethod
    def for_layer(cls, name: str, shape: LayerShape, fkw_file: str,
                  pattern_ids, cfg: ExecConfig, device: str = "cpu"):
        eff = cfg.normalized(shape)
        return cls(name=name, device=device,
                   patterns=tuple(sorted(set(int(p) for p in pattern_ids))),
                   fkw_file=fkw_file, loop_permutation=eff.loop_permutation,
                   tile=(eff.tile_h, eff.tile_w, eff.tile_oc, eff.tile_ic),
                   unroll=(eff.unroll_oc, eff.unroll_iw), shape=shape)


@dataclass(frozen=True)
class ModelManifest:
    version: str
    pattern_set: PatternSet
    layers: tuple

    def __post_init__(self):
        if not self.layers:
            raise LrValidationError(["/layers: manifest needs at least one layer"])


def _expect(payload, key, kind, path, violations):
    if not isinstance(payload, dict) or key not in payload:
        violations.append(f"{path}/{key}: missing")
        return None
    value = payload[key]
    if kind is int and isinstance(value, bool):
        violations.append(f"{path}/{key}: expected integer, got boolean")
        return None
    if not isinstance(value, kind):
        violations.append(f"{path}/{key}: expected {kind.__name__}, "
                          f"got {type(value).__name__}")
        return None
    return value


def lr_parse(text: str) -> ModelManifest:
    """Parse and fully validate; raises LrValidationError listing every
    violation with its JSON path."""
    violations: List[str] = []
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LrValidationError([f"/: invalid JSON ({exc.msg} at char {exc.pos})"])
    if not isinstance(payload, dict):
        raise LrValidationError(["/: manifest must be a JSON object"])

    version = _expect(payload, "version", str, "", violations)
    if version is not None and version != LR_VERSION:
        violations.append(f"/version: unsupported version {version!r}")

    pattern_set = None
    raw_patterns = _expect(payload, "pattern_set", list, "", violations)
    if raw_patterns is not None:
        try:
            pattern_set = PatternSet(tuple(
                Pattern(tuple(map(tuple, entry))) for entry in raw_patterns))
        except (PatternError, TypeError, ValueError) as exc:
            violations.append(f"/pattern_set: {exc}")

    layers: List[LayerRecord] = []
    raw_layers = _expect(payload, "layers", list, "", violations)
    if raw_layers is not None:
        if not raw_layers:
            violations.append("/layers: manifest needs at least one layer")
        for i, entry in enumerate(raw_layers):
            record = _parse_layer(entry, f"/layers/{i}", pattern_set, violations)
            if record is not None:
                layers.append(record)
        for i in range(1, len(layers)):
            prev, cur = layers[i - 1].shape, layers[i].shape
            if prev.out_channels != cur.in_channels:
                violations.append(
                    f"/layers/{i}/shape/in_channels: expected "
                    f"{prev.out_channels} to chain from layer {i - 1}, "
                    f"got {cur.in_channels}")
    if violations:
        raise LrValidationError(violations)
    return ModelManifest(version=version, pattern_set=pattern_set,
                         layers=tuple(layers))


def _parse_layer(entry, path: str, pattern_set: Optional[PatternSet],
                 violations: List[str]) -> Optional[LayerRecord]:
    if not isinstance(entry, dict):
        violations.append(f"{path}: layer record must be an object")
        return None
    before = len(violations)
    name = _expect(entry, "name", str, path, violations)
    device = _expect(entry, "device", str, path, violations)
    fkw_file = _expect(entry, "fkw_file", str, path, violations)
    perm = _expect(entry, "loop_permutation", str, path, violations)
    if perm is not None and perm not in SUPPORTED_PERMUTATIONS:
        violations.append(f"{path}/loop_permutation: {perm!r} not one of "
                          f"{list(SUPPORTED_PERMUTATIONS)}")

    shape = None
    raw_shape = _expect(entry, "shape", dict, path, violations)
    if raw_shape is not None:
        values = [_expect(raw_shape, k, int, f"{path}/shape", violations)
                  for k in _SHAPE_KEYS]
        if all(v is not None for v in values):
            try:
                shape = LayerShape(*values)
            except ShapeError as exc:
                violations.append(f"{path}/shape: {exc}")

    pattern_ids = []
    raw_ids = _expect(entry, "patterns", list, path, violations)
    if raw_ids is not None:
        for j, pid in enumerate(raw_ids):
            if not isinstance(pid, int) or isinstance(pid, bool):
                violations.append(f"{path}/patterns/{j}: expected integer id")
            elif pattern_set is not None and not 1 <= pid <= pattern_set.k:
                violations.append(f"{path}/patterns/{j}: pattern id {pid} "
                                  f"not in the model's pattern set (k={pattern_set.k})")
            else:
                pattern_ids.append(pid)

    tile = _parse_dims(entry, "tile", ("h", "w", "oc", "ic"), path, violations)
    unroll = _parse_dims(entry, "unroll", ("oc", "iw"), path, violations)
    if shape is not None and tile is not None:
        limits = (shape.output_h, shape.output_w, shape.out_channels,
                  shape.in_channels)
        for value, limit, key in zip(tile, limits, ("h", "w", "oc", "ic")):
            if not 1 <= value <= limit:
                violations.append(f"{path}/tile/{key}: {value} outside 1..{limit}")
    if tile is not None and unroll is not None:
        if not 1 <= unroll[0] <= tile[2]:
            violations.append(f"{path}/unroll/oc: {unroll[0]} outside 1..{tile[2]}")
        if not 1 <= unroll[1] <= tile[1]:
            violations.append(f"{path}/unroll/iw: {unroll[1]} outside 1..{tile[1]}")

    if len(violations) > before:
        return None
    return LayerRecord(name=name, device=device, patterns=tuple(pattern_ids),
                       fkw_file=fkw_file, loop_permutation=perm,
                       tile=tile, unroll=unroll, shape=shape)


def _parse_dims(entry, key, names, path, violations) -> Optional[tuple]:
    raw = _expect(entry, key, dict, path, violations)
    if raw is None:
        return None
    values = [_expect(raw, n, int, f"{path}/{key}", violations) for n in names]
    if any(v is None for v in values):
        return None
    return tuple(values)


def lr_emit(manifest: ModelManifest) -> str:
    """Canonical JSON text; lr_parse(lr_emit(m)) round-trips exactly."""
    payload = {
        "version": manifest.version,
        "pattern_set": json.loads(manifest.pattern_set.to_json()),
        "layers": [
            {
                "name": rec.name,
                "device": rec.device,
                "patterns": list(rec.patterns),
                "fkw_file": rec.fkw_file,
                "loop_permutation": rec.loop_permutation,
                "tile": {"h": rec.tile[0], "w": rec.tile[1],
                         "oc": rec.tile[2], "ic": rec.tile[3]},
                "unroll": {"oc": rec.unroll[0], "iw": rec.unroll[1]},
                "shape": {k: getattr(rec.shape, k) for k in _SHAPE_KEYS},
            }
            for rec in manifest.layers
        ],
    }
    return json.dumps(payload, indent=2) + "\n"
