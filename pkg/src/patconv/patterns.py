"""Kernel patterns: 4 retained positions in a 3x3 kernel, center always kept.

Includes the pattern-set builder (most frequent per-kernel patterns across a
model) and the two Euclidean projections used by the pruning loop.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensors import WeightTensor

CENTER = (1, 1)
GRID_POSITIONS = tuple((r, c) for r in range(3) for c in range(3))
PATTERN_SIZE = 4


class PatternError(ValueError):
    """Invalid pattern definition or unsupported kernel."""


@dataclass(frozen=True)
class Pattern:
    """Mask of 4 retained (row, col) positions; identity is the position set."""

    kept_positions: tuple
    id: int = field(compare=False, default=0)

    def __post_init__(self):
        positions = tuple(sorted((int(r), int(c)) for r, c in self.kept_positions))
        if len(positions) != PATTERN_SIZE or len(set(positions)) != PATTERN_SIZE:
            raise PatternError(f"pattern needs {PATTERN_SIZE} distinct positions")
        if CENTER not in positions:
            raise PatternError("pattern must keep the center position (1, 1)")
        for r, c in positions:
            if not (0 <= r < 3 and 0 <= c < 3):
                raise PatternError(f"position {(r, c)} outside the 3x3 grid")
        object.__setattr__(self, "kept_positions", positions)

    def mask(self) -> np.ndarray:
        m = np.zeros((3, 3), dtype=bool)
        for r, c in self.kept_positions:
            m[r, c] = True
        return m

    def with_id(self, new_id: int) -> "Pattern":
        return Pattern(self.kept_positions, new_id)


def _canonical_universe() -> tuple:
    """All 4-entry patterns containing the center, in canonical order."""
    others = [p for p in GRID_POSITIONS if p != CENTER]
    combos = sorted(tuple(sorted(c + (CENTER,))) for c in itertools.combinations(others, 3))
    return tuple(Pattern(positions, i + 1) for i, positions in enumerate(combos))


ALL_PATTERNS = _canonical_universe()
_UNIVERSE_INDEX = {p.kept_positions: p for p in ALL_PATTERNS}


@dataclass(frozen=True)
class PatternSet:
    """Ordered candidate patterns; ids are 1..k in list order."""

    patterns: tuple

    def __post_init__(self):
        patterns = tuple(self.patterns)
        if not 1 <= len(patterns) <= len(ALL_PATTERNS):
            raise PatternError(f"pattern set size must be 1..{len(ALL_PATTERNS)}")
        seen = set()
        renumbered = []
        for i, p in enumerate(patterns):
            if p.kept_positions in seen:
                raise PatternError(f"duplicate pattern at index {i}")
            seen.add(p.kept_positions)
            renumbered.append(p.with_id(i + 1))
        object.__setattr__(self, "patterns", tuple(renumbered))

    @property
    def k(self) -> int:
        return len(self.patterns)

    def __iter__(self):
        return iter(self.patterns)

    def __getitem__(self, pattern_id: int) -> Pattern:
        """Look up by 1-based pattern id."""
        if not 1 <= pattern_id <= self.k:
            raise PatternError(f"pattern id {pattern_id} not in 1..{self.k}")
        return self.patterns[pattern_id - 1]

    def find(self, positions) -> "Pattern | None":
        key = tuple(sorted(tuple(p) for p in positions))
        for p in self.patterns:
            if p.kept_positions == key:
                return p
        return None

    def masks(self) -> np.ndarray:
        """Stacked boolean masks, shape [k, 3, 3], ordered by id."""
        return np.stack([p.mask() for p in self.patterns])

    def to_json(self) -> str:
        """Canonical JSON: list of 4 sorted [row, col] pairs per pattern."""
        payload = [[list(pos) for pos in p.kept_positions] for p in self.patterns]
        return json.dumps(payload, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "PatternSet":
        payload = json.loads(text)
        if not isinstance(payload, list):
            raise PatternError("pattern set JSON must be a list of patterns")
        return cls(tuple(Pattern(tuple(map(tuple, entry))) for entry in payload))


@dataclass(frozen=True, eq=False)
class ConnectivityMask:
    """Which (out_channel, in_channel) kernels survive connectivity pruning."""

    kept: np.ndarray
    alpha: int

    def __post_init__(self):
        kept = np.array(self.kept, dtype=bool, copy=True)
        if kept.ndim != 2:
            raise ValueError("kept must be a 2-D [out_channel][in_channel] matrix")
        if int(kept.sum()) > self.alpha:
            raise ValueError(
                f"mask keeps {int(kept.sum())} kernels, more than alpha={self.alpha}")
        kept.setflags(write=False)
        object.__setattr__(self, "kept", kept)


def natural_pattern(kernel: np.ndarray) -> Pattern:
    """Pattern formed by the center plus the 3 largest-magnitude other weights.

    Magnitude ties break toward the lexicographically smaller (row, col).
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape != (3, 3):
        raise PatternError(f"only 3x3 kernels carry patterns, got {kernel.shape}")
    if not np.all(np.isfinite(kernel)):
        raise PatternError("kernel contains non-finite values")
    others = [p for p in GRID_POSITIONS if p != CENTER]
    ranked = sorted(others, key=lambda pos: (-abs(kernel[pos]), pos))
    positions = tuple(sorted(ranked[:3] + [CENTER]))
    return _UNIVERSE_INDEX[positions]


def build_pattern_set(model: Sequence[WeightTensor], k: int) -> PatternSet:
    """Top-k most frequent per-kernel patterns across all 3x3 kernels.

    Counting is uniform (one vote per kernel). Frequency ties, including
    patterns never observed, fall back to canonical pattern order.
    """
    if not 1 <= k <= len(ALL_PATTERNS):
        raise PatternError(f"k must be 1..{len(ALL_PATTERNS)}, got {k}")
    counts = {p.kept_positions: 0 for p in ALL_PATTERNS}
    total = 0
    for tensor in model:
        s = tensor.shape
        if (s.kernel_h, s.kernel_w) != (3, 3):
            continue
        for oc in range(s.out_channels):
            for ic in range(s.in_channels):
                counts[natural_pattern(tensor.data[oc, ic]).kept_positions] += 1
                total += 1
    if total == 0:
        raise PatternError("model has no 3x3 kernels to extract patterns from")
    ordered = sorted(ALL_PATTERNS,
                     key=lambda p: (-counts[p.kept_positions], p.kept_positions))
    return PatternSet(tuple(ordered[:k]))


def project_pattern(kernel: np.ndarray, pattern_set: PatternSet):
    """Euclidean projection of one kernel onto the pattern constraint.

    Picks the candidate keeping the most L2 mass (lowest id on ties), zeroes
    everything else, and leaves retained values untouched.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape != (3, 3):
        raise PatternError(f"expected a 3x3 kernel, got {kernel.shape}")
    squares = kernel * kernel
    best_id, best_score = 1, -1.0
    for p in pattern_set:
        score = float(sum(squares[pos] for pos in p.kept_positions))
        if score > best_score:
            best_id, best_score = p.id, score
    chosen = pattern_set[best_id]
    projected = np.where(chosen.mask(), kernel, 0.0)
    return best_id, projected


def project_pattern_layer(data: np.ndarray, pattern_set: PatternSet):
    """Vectorized per-kernel pattern projection over a [oc, ic, 3, 3] tensor.

    Returns (ids[oc, ic], projected[oc, ic, 3, 3]); same tie-break rule as
    `project_pattern` (np.argmax keeps the first, i.e. lowest-id, maximum).
    """
    data = np.asarray(data, dtype=np.float64)
    masks = pattern_set.masks().astype(np.float64)
    scores = np.einsum("oirc,krc->oik", data * data, masks)
    ids = np.argmax(scores, axis=2) + 1
    projected = data * masks[ids - 1]
    return ids.astype(np.int64), projected


def project_connectivity(weights: WeightTensor, alpha: int) -> ConnectivityMask:
    """Keep exactly the alpha kernels of largest L2 norm.

    Ties break toward ascending (out_channel, in_channel).
    """
    s = weights.shape
    if not 1 <= alpha <= s.kernel_count:
        raise ValueError(f"alpha must be 1..{s.kernel_count}, got {alpha}")
    norms = np.sqrt(np.sum(weights.data.astype(np.float64) ** 2, axis=(2, 3)))
    order = sorted(((oc, ic) for oc in range(s.out_channels)
                    for ic in range(s.in_channels)),
                   key=lambda p: (-norms[p], p))
    kept = np.zeros((s.out_channels, s.in_channels), dtype=bool)
    for oc, ic in order[:alpha]:
        kept[oc, ic] = True
    return ConnectivityMask(kept, alpha)
