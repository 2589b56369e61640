"""Genetic-algorithm search over execution configs plus a trained estimator.

The GA is small and fixed: population 16, tournament size 3, uniform
crossover, per-gene mutation 0.1, elitism 2. Fitness is the median of 3
timed runs unless a deterministic fitness function is injected (tests and
the planted-optimum harness do that). Measurements are cached per decoded
config, so re-visiting a chromosome costs nothing; every fitness lookup
still counts against the budget and lands in the history.
"""

from __future__ import annotations

import hashlib
import time
import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .executor import SUPPORTED_PERMUTATIONS, ExecConfig, conv_fkw
from .fkw import FkwModel
from .tensors import FeatureMap

POPULATION = 16
TOURNAMENT = 3
MUTATION_RATE = 0.1
ELITISM = 2
DEFAULT_BUDGET = 512  # fitness evaluations; cached repeats count
_LOG_TILE_MAX = 5          # tiles 1..32 before clamping
_UNROLL_CHOICES = (1, 2, 4)


@dataclass(frozen=True)
class Chromosome:
    """Gene vector: permutation index, log2 tiles, unroll choice indices."""

    genes: tuple  # (perm, log_th, log_tw, log_toc, log_tic, uoc_idx, uiw_idx)

    def __post_init__(self):
        genes = tuple(int(g) for g in self.genes)
        if len(genes) != 7:
            raise ValueError("chromosome has 7 genes")
        object.__setattr__(self, "genes", genes)

    def decode(self, shape, permutations: Sequence[str]) -> ExecConfig:
        """Total decode: every gene vector yields a valid clamped config."""
        perm, lth, ltw, ltoc, ltic, uoc, uiw = self.genes
        raw = ExecConfig(
            loop_permutation=permutations[perm % len(permutations)],
            tile_h=2 ** (lth % (_LOG_TILE_MAX + 1)),
            tile_w=2 ** (ltw % (_LOG_TILE_MAX + 1)),
            tile_oc=2 ** (ltoc % (_LOG_TILE_MAX + 1)),
            tile_ic=2 ** (ltic % (_LOG_TILE_MAX + 1)),
            unroll_oc=_UNROLL_CHOICES[uoc % len(_UNROLL_CHOICES)],
            unroll_iw=_UNROLL_CHOICES[uiw % len(_UNROLL_CHOICES)],
            lre_enabled=True, reorder_enabled=True)
        return raw.normalized(shape)


@dataclass
class TuneRecord:
    features: np.ndarray
    measured_time: float  # seconds
    fingerprint: str

    def __post_init__(self):
        if self.measured_time <= 0:
            raise ValueError("measured_time must be positive")


def layer_fingerprint(model: FkwModel) -> str:
    s = model.shape
    digest = hashlib.sha256()
    digest.update(repr((s.kernel_h, s.kernel_w, s.in_channels, s.out_channels,
                        s.stride, s.input_h, s.input_w)).encode())
    digest.update(model.offset.tobytes())
    return digest.hexdigest()[:12]


def config_features(cfg: ExecConfig, model: FkwModel) -> np.ndarray:
    """Fixed-width feature vector: permutation one-hot, log2 tiles, unrolls,
    layer geometry, and an intercept term."""
    s = model.shape
    onehot = [1.0 if cfg.loop_permutation == p else 0.0
              for p in SUPPORTED_PERMUTATIONS]
    return np.array(onehot + [
        np.log2(cfg.tile_h), np.log2(cfg.tile_w),
        np.log2(cfg.tile_oc), np.log2(cfg.tile_ic),
        float(cfg.unroll_oc), float(cfg.unroll_iw),
        np.log2(s.out_channels), np.log2(max(model.kernel_count, 1)),
        float(s.output_h), float(s.output_w),
        1.0,
    ], dtype=np.float64)


def _random_chromosome(rng: np.random.Generator) -> Chromosome:
    return Chromosome((int(rng.integers(0, 4)),
                       int(rng.integers(0, _LOG_TILE_MAX + 1)),
                       int(rng.integers(0, _LOG_TILE_MAX + 1)),
                       int(rng.integers(0, _LOG_TILE_MAX + 1)),
                       int(rng.integers(0, _LOG_TILE_MAX + 1)),
                       int(rng.integers(0, len(_UNROLL_CHOICES))),
                       int(rng.integers(0, len(_UNROLL_CHOICES)))))


def _crossover(a: Chromosome, b: Chromosome, rng) -> Chromosome:
    genes = tuple(ag if rng.random() < 0.5 else bg
                  for ag, bg in zip(a.genes, b.genes))
    return Chromosome(genes)


def _mutate(chrom: Chromosome, rng) -> Chromosome:
    highs = (4, _LOG_TILE_MAX + 1, _LOG_TILE_MAX + 1, _LOG_TILE_MAX + 1,
             _LOG_TILE_MAX + 1, len(_UNROLL_CHOICES), len(_UNROLL_CHOICES))
    genes = list(chrom.genes)
    for i, high in enumerate(highs):
        if rng.random() < MUTATION_RATE:
            genes[i] = int(rng.integers(0, high))
    return Chromosome(tuple(genes))


def _timed_fitness(model: FkwModel, input: FeatureMap) -> Callable[[ExecConfig], float]:
    def measure(cfg: ExecConfig) -> float:
        samples = []
        for _ in range(3):
            start = time.perf_counter()
            conv_fkw(input, model, cfg)
            samples.append(time.perf_counter() - start)
        samples.sort()
        return samples[1]
    return measure


def tune(model: FkwModel, input: FeatureMap, budget: int, seed: int,
         permutations: Optional[Sequence[str]] = None,
         fitness_fn: Optional[Callable[[ExecConfig], float]] = None,
         include_default: Optional[ExecConfig] = None,
         ) -> Tuple[ExecConfig, List[TuneRecord]]:
    """GA search; returns (best config, full evaluation history).

    The chromosome sequence is a pure function of the seed and the observed
    fitness values. `include_default` seeds the initial population with a
    baseline config so the result can never lose to it on the same
    measurement.
    """
    if budget < POPULATION:
        raise ValueError(f"budget must be at least the population size "
                         f"({POPULATION}), got {budget}")
    perms = tuple(permutations) if permutations else SUPPORTED_PERMUTATIONS
    for p in perms:
        if p not in SUPPORTED_PERMUTATIONS:
            raise ValueError(f"unknown permutation {p!r}")
    rng = np.random.default_rng(seed)
    measure = fitness_fn if fitness_fn is not None else _timed_fitness(model, input)
    fingerprint = layer_fingerprint(model)
    shape = model.shape

    population = [_random_chromosome(rng) for _ in range(POPULATION)]
    if include_default is not None:
        population[0] = _chromosome_near(include_default, perms)

    cache = {}
    history: List[TuneRecord] = []
    best: Tuple[float, ExecConfig] = (float("inf"), None)
    evaluations = 0
    scored: List[Tuple[float, Chromosome]] = []
    while evaluations < budget:
        scored = []
        for chrom in population:
            if evaluations >= budget:
                break
            cfg = chrom.decode(shape, perms)
            if cfg in cache:
                fitness = cache[cfg]
            else:
                fitness = float(measure(cfg))
                cache[cfg] = fitness
            history.append(TuneRecord(config_features(cfg, model), fitness,
                                      fingerprint))
            scored.append((fitness, chrom))
            if fitness < best[0]:
                best = (fitness, cfg)
            evaluations += 1
        if evaluations >= budget:
            break
        population = _next_generation(scored, rng)
    return best[1], history


def _chromosome_near(cfg: ExecConfig, perms) -> Chromosome:
    perm = perms.index(cfg.loop_permutation) if cfg.loop_permutation in perms else 0
    log2 = lambda v: int(np.log2(max(1, v)))
    unroll_idx = lambda v: _UNROLL_CHOICES.index(v) if v in _UNROLL_CHOICES else 0
    return Chromosome((perm, log2(cfg.tile_h), log2(cfg.tile_w),
                       log2(cfg.tile_oc), log2(cfg.tile_ic),
                       unroll_idx(cfg.unroll_oc), unroll_idx(cfg.unroll_iw)))


def _next_generation(scored, rng) -> List[Chromosome]:
    ranked = sorted(range(len(scored)), key=lambda i: (scored[i][0], i))
    population = [scored[i][1] for i in ranked[:ELITISM]]

    def pick() -> Chromosome:
        contenders = rng.integers(0, len(scored), size=TOURNAMENT)
        winner = min(contenders, key=lambda i: (scored[i][0], i))
        return scored[int(winner)][1]

    while len(population) < POPULATION:
        child = _crossover(pick(), pick(), rng)
        population.append(_mutate(child, rng))
    return population


# ---------------------------------------------------------------------------
# Performance estimator: least squares on config features -> log(time).

@dataclass
class Estimator:
    coef: np.ndarray
    rmse: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if features.shape[1] != self.coef.shape[0]:
            raise ValueError(
                f"feature dimension {features.shape[1]} does not match the "
                f"trained estimator ({self.coef.shape[0]})")
        return features @ self.coef


def fit_estimator(history: Sequence[TuneRecord]) -> Estimator:
    """Least-squares fit predicting log(measured time) from features."""
    if len(history) < 10:
        raise ValueError(f"need at least 10 records to fit, got {len(history)}")
    x = np.stack([r.features for r in history]).astype(np.float64)
    y = np.log(np.array([r.measured_time for r in history], dtype=np.float64))
    rank = np.linalg.matrix_rank(x)
    if rank < x.shape[1]:
        warnings.warn("degenerate design matrix; falling back to ridge "
                      "regression (lambda=1e-6)", RuntimeWarning, stacklevel=2)
        lam = 1e-6
        coef = np.linalg.solve(x.T @ x + lam * np.eye(x.shape[1]), x.T @ y)
    else:
        coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    residual = x @ coef - y
    rmse = float(np.sqrt(np.mean(residual ** 2)))
    return Estimator(coef=coef, rmse=rmse)


def predict_best(estimator: Estimator, configs: Sequence[ExecConfig],
                 model: FkwModel) -> List[ExecConfig]:
    """Candidates sorted by predicted time, fastest first (stable)."""
    feats = np.stack([config_features(c, model) for c in configs])
    predicted = estimator.predict(feats)
    order = sorted(range(len(configs)), key=lambda i: (predicted[i], i))
    return [configs[i] for i in order]
