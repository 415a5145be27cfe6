"""Stability selection by repeated half-sampling over a tuning grid."""

from __future__ import annotations

import json
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import (
    Dataset3D,
    ValidationError,
    abs_correlation,
    center,
    marginal_covariances,
)
from .regression import DEFAULT_LAMBDAS
from .segmentation import segment_1d, segment_3d
from .selection import CVEvaluator, default_q, greedy_search, make_folds

GRID_CASE1 = (0.02, 0.035, 0.04, 0.05, 0.06)
GRID_CASE2 = (0.0, 0.03, 0.04, 0.06, 0.08)
GRID_3D_AXIS = (0.01, 0.03)
DEFAULT_C = 0.01


@dataclass(frozen=True)
class TuningPair:
    """Segmentation penalty (scalar, or one per axis in 3D) and stopping threshold."""

    rho: Union[float, Tuple[float, float, float]]
    c: float = DEFAULT_C

    def key(self) -> str:
        rho = list(self.rho) if isinstance(self.rho, tuple) else self.rho
        return json.dumps({"rho": rho, "c": self.c}, sort_keys=True)

    def label(self) -> str:
        if isinstance(self.rho, tuple):
            rho = "/".join(f"{r:g}" for r in self.rho)
        else:
            rho = f"{self.rho:g}"
        return f"rho={rho};c={self.c:g}"

    def to_dict(self) -> dict:
        return {"rho": list(self.rho) if isinstance(self.rho, tuple) else self.rho, "c": self.c}

    @classmethod
    def from_dict(cls, d: dict) -> "TuningPair":
        rho = d["rho"]
        rho = tuple(float(r) for r in rho) if isinstance(rho, (list, tuple)) else float(rho)
        return cls(rho=rho, c=float(d.get("c", DEFAULT_C)))


def default_pairs_1d(case: int = 1, c: float = DEFAULT_C) -> List[TuningPair]:
    grid = GRID_CASE1 if case == 1 else GRID_CASE2
    return [TuningPair(r, c) for r in grid]


def default_pairs_3d(c: float = DEFAULT_C) -> List[TuningPair]:
    return [
        TuningPair((rh, rv, rz), c)
        for rh in GRID_3D_AXIS
        for rv in GRID_3D_AXIS
        for rz in GRID_3D_AXIS
    ]


@dataclass
class StabilityConfig:
    pairs: List[TuningPair] = field(default_factory=default_pairs_1d)
    reps: int = 100
    master_seed: int = 0
    fitter: str = "pwc"
    folds: int = 5
    q: Optional[float] = None
    min_seg: Optional[int] = None
    max_seg: Optional[int] = None
    lambdas: Sequence[float] = field(default_factory=lambda: DEFAULT_LAMBDAS.copy())
    threads: int = 1

    def __post_init__(self):
        if self.reps < 1:
            raise ValidationError(f"reps must be >= 1, got {self.reps}")
        if not self.pairs:
            raise ValidationError("tuning grid is empty")
        self.pairs = [p if isinstance(p, TuningPair) else TuningPair.from_dict(p) for p in self.pairs]
        for p in self.pairs:
            if not 0 <= p.c < 1:
                raise ValidationError(f"c must lie in [0, 1), got {p.c}")
            rhos = p.rho if isinstance(p.rho, tuple) else (p.rho,)
            if any(r < 0 for r in rhos):
                raise ValidationError(f"rho must be >= 0, got {p.rho}")
        if self.threads < 1:
            raise ValidationError(f"threads must be >= 1, got {self.threads}")


def _segment_defaults(is_3d: bool, min_seg, max_seg):
    if is_3d:
        return (3 if min_seg is None else min_seg), (7 if max_seg is None else max_seg)
    return (5 if min_seg is None else min_seg), (20 if max_seg is None else max_seg)


@dataclass(eq=False)
class FrequencyMap:
    """Per-pair, per-point selection counts over ``reps`` subsamples."""

    counts: np.ndarray  # (n_pairs, n_points) int64
    reps: int
    pairs: List[TuningPair]
    shape: Tuple[int, ...]  # (p,) or (H, V, Z)
    master_seed: int = 0
    n_segments: Optional[np.ndarray] = None  # (reps, n_pairs) segment counts

    @property
    def freq(self) -> np.ndarray:
        return self.counts / self.reps

    @property
    def max_freq(self) -> np.ndarray:
        return self.freq.max(axis=0)

    @property
    def is_3d(self) -> bool:
        return len(self.shape) == 3


@dataclass(eq=False)
class StableSubdomain:
    pi: float
    points: np.ndarray
    source: FrequencyMap = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"pi": self.pi, "points": self.points.tolist()}


def stable_subdomain(fmap: FrequencyMap, pi: float) -> StableSubdomain:
    """Points whose maximal selection frequency exceeds ``pi``."""
    if not 0 <= pi < 1:
        raise ValidationError(f"pi must lie in [0, 1), got {pi}")
    return StableSubdomain(pi=float(pi), points=np.flatnonzero(fmap.max_freq > pi), source=fmap)


def pair_seed(master_seed: int, rep: int, pair: TuningPair) -> np.random.SeedSequence:
    """Fold-split seed that depends only on the pair's values, not its position in the grid."""
    return np.random.SeedSequence([master_seed, rep, zlib.crc32(pair.key().encode())])


def subsample(n: int, master_seed: int, rep: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, rep]))
    return np.sort(rng.choice(n, size=math.ceil(n / 2), replace=False))


Selector = Callable[[object, TuningPair, np.random.SeedSequence], np.ndarray]


def _run_rep(data, config: StabilityConfig, rep: int, selector: Optional[Selector]):
    idx = subsample(data.n, config.master_seed, rep)
    sub = center(data.rows(idx))
    counts = np.zeros((len(config.pairs), data.n_points), dtype=np.int64)
    n_seg = np.zeros(len(config.pairs), dtype=np.int64)
    shared = {}
    for k, pair in enumerate(config.pairs):
        seed = pair_seed(config.master_seed, rep, pair)
        if selector is None:
            mask, L = _select_cached(sub, pair, seed, config, shared)
        else:
            mask, L = np.asarray(selector(sub, pair, seed), dtype=bool), 0
        counts[k] = mask
        n_seg[k] = L
    return counts, n_seg


def _select_cached(sub, pair, seed, config, shared):
    # the correlation surface depends only on the subsample
    is_3d = isinstance(sub, Dataset3D)
    if "corr" not in shared:
        shared["corr"] = marginal_covariances(sub) if is_3d else abs_correlation(sub)
    min_seg, max_seg = _segment_defaults(is_3d, config.min_seg, config.max_seg)
    if is_3d:
        segs = segment_3d(shared["corr"], pair.rho, sub.mask, sub.dims, min_seg=min_seg, max_seg=max_seg)
        labels, t = segs.labels, None
    else:
        segs = segment_1d(shared["corr"], float(pair.rho), min_seg=min_seg, max_seg=max_seg)
        labels, t = segs.labels(), sub.grid.points
    folds = make_folds(sub.n, config.folds, seed)
    ev = CVEvaluator(sub.X, sub.Y, labels, folds, config.fitter, t=t, lambdas=config.lambdas)
    q = config.q if config.q is not None else default_q("3d" if is_3d else "1d", sub.n_points, ev.n_segments)
    trace = greedy_search(ev, pair.c, q)
    return np.isin(labels, trace.selected), segs.L


_WORKER = {}


def _init_worker(data, config, selector):
    _WORKER.update(data=data, config=config, selector=selector)


def _worker_rep(rep):
    return _run_rep(_WORKER["data"], _WORKER["config"], rep, _WORKER["selector"])


def run_stability(data, config: Optional[StabilityConfig] = None, selector: Optional[Selector] = None) -> FrequencyMap:
    """Selection frequencies of every grid point over ``config.reps`` half-samples.

    Each rep draws ``ceil(n/2)`` rows without replacement from a seed derived
    from ``(master_seed, rep)``; each pair's fold split is seeded from
    ``(master_seed, rep, pair)``. Results therefore do not depend on
    ``threads`` or on the order of the tuning grid.

    ``selector(subsample, pair, seed) -> bool mask`` replaces segmentation
    and selection when given.
    """
    config = config or StabilityConfig()
    if data.Y is None:
        raise ValidationError("dataset has no response")
    if data.n < 4:
        raise ValidationError(f"need n >= 4, got {data.n}")
    is_3d = isinstance(data, Dataset3D)
    for p in config.pairs:
        if not is_3d and isinstance(p.rho, tuple):
            raise ValidationError(f"pair {p.label()} does not match the data dimension")
    reps = range(config.reps)
    if config.threads > 1 and config.reps > 1:
        workers = min(config.threads, config.reps, os.cpu_count() or 1)
    else:
        workers = 1
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(data, config, selector)) as ex:
            results = list(ex.map(_worker_rep, reps, chunksize=max(1, config.reps // (4 * workers))))
    else:
        results = [_run_rep(data, config, r, selector) for r in reps]
    counts = np.zeros((len(config.pairs), data.n_points), dtype=np.int64)
    for c, _ in results:
        counts += c
    shape = tuple(data.dims) if is_3d else (data.p,)
    return FrequencyMap(
        counts=counts,
        reps=config.reps,
        pairs=list(config.pairs),
        shape=shape,
        master_seed=config.master_seed,
        n_segments=np.array([L for _, L in results]),
    )
