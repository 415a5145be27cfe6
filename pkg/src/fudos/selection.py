"""Greedy cross-validated search over unions of segments.

Step 1 ranks every single segment by K-fold CV error. Each later step takes
the ``m = ceil(sqrt(q))`` best subsets of the previous step, evaluates all
new pairwise unions and ranks them. The search stops at step ``K`` once
the relative improvement ``(CV*_K - CV*_{K+1}) / CV*_K`` drops to ``c`` or
below, and returns the best subset of step ``K``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import Dataset1D, ValidationError
from .regression import (
    DEFAULT_LAMBDAS,
    PINV_RCOND,
    _PenalizedSystem,
    _labels_of,
    segment_features,
    segment_members,
    spline_block,
)

FITTERS = ("pwc", "pspline")
# CV* at or below this fraction of var(Y) is treated as a perfect fit
PERFECT_FIT_RTOL = 1e-12


@dataclass
class SelectionConfig:
    c: float = 0.01
    q: Optional[float] = None
    folds: int = 5
    fitter: str = "pwc"
    seed: int = 0
    lambdas: Sequence[float] = field(default_factory=lambda: DEFAULT_LAMBDAS.copy())

    def __post_init__(self):
        if not 0 <= self.c < 1:
            raise ValidationError(f"c must lie in [0, 1), got {self.c}")
        if self.q is not None and self.q < 1:
            raise ValidationError(f"q must be >= 1, got {self.q}")
        if self.folds < 2:
            raise ValidationError(f"folds must be >= 2, got {self.folds}")
        if self.fitter not in FITTERS:
            raise ValidationError(f"fitter must be one of {FITTERS}, got {self.fitter!r}")


def make_folds(n: int, k: int, rng) -> np.ndarray:
    """Random assignment of ``n`` samples to ``k`` near-equal folds."""
    rng = np.random.default_rng(rng)
    ids = np.empty(n, dtype=int)
    ids[rng.permutation(n)] = np.arange(n) % k
    return ids


class CVEvaluator:
    """K-fold CV error of segment subsets under one fixed fold split.

    Per-segment design columns are built once; a subset's design is their
    concatenation.
    """

    def __init__(
        self,
        X: np.ndarray,
        Y: np.ndarray,
        labels: np.ndarray,
        fold_ids: np.ndarray,
        fitter: str = "pwc",
        t: Optional[np.ndarray] = None,
        lambdas=DEFAULT_LAMBDAS,
    ):
        if fitter not in FITTERS:
            raise ValidationError(f"unknown fitter {fitter!r}")
        self.Y = np.asarray(Y, dtype=float).ravel()
        labels = np.asarray(labels)
        self.n_points = labels.size
        self.n_segments = int(labels.max()) + 1
        self.fitter = fitter
        self.lambdas = np.asarray(lambdas, dtype=float)
        fold_ids = np.asarray(fold_ids)
        if fold_ids.size != self.Y.size:
            raise ValidationError("fold assignment does not match the number of samples")
        self.tests = [np.flatnonzero(fold_ids == f) for f in np.unique(fold_ids)]
        if len(self.tests) < 2:
            raise ValidationError("need at least 2 folds")
        if min(t_.size for t_ in self.tests) < 2:
            raise ValidationError("a fold has fewer than 2 samples")
        self.trains = [np.flatnonzero(fold_ids != f) for f in np.unique(fold_ids)]
        members = segment_members(labels, range(self.n_segments))
        if fitter == "pwc":
            self.F = segment_features(X, members, self.n_points)
        else:
            if t is None:
                t = np.arange(1, self.n_points + 1) / self.n_points
            self.blocks = [spline_block(t, m) for m in members]
            X = np.asarray(X, dtype=float)
            self.Zseg = [X[:, b.members] @ b.basis / self.n_points for b in self.blocks]
        self.n_evaluations = 0

    def __call__(self, subset: Sequence[int]) -> float:
        subset = list(subset)
        if not subset:
            raise ValidationError("empty subset")
        self.n_evaluations += 1
        if self.fitter == "pwc":
            return self._cv_pwc(self.F[:, subset])
        return self._cv_pspline(subset)

    def _cv_pwc(self, F: np.ndarray) -> float:
        Y = self.Y
        err = 0.0
        for tr, te in zip(self.trains, self.tests):
            fm = F[tr].mean(axis=0)
            ym = Y[tr].mean()
            coef = np.linalg.lstsq(F[tr] - fm, Y[tr] - ym, rcond=PINV_RCOND)[0]
            pred = ym + (F[te] - fm) @ coef
            err += np.mean((Y[te] - pred) ** 2)
        return err / len(self.tests)

    def singletons(self) -> np.ndarray:
        """CV error of every single segment, vectorized for the pwc fitter."""
        if self.fitter != "pwc":
            return np.array([self([k]) for k in range(self.n_segments)])
        self.n_evaluations += self.n_segments
        F, Y = self.F, self.Y
        err = np.zeros(self.n_segments)
        for tr, te in zip(self.trains, self.tests):
            fm = F[tr].mean(axis=0)
            ym = Y[tr].mean()
            Fc = F[tr] - fm
            ss = np.einsum("ij,ij->j", Fc, Fc)
            scale = np.abs(Fc).max(axis=0)
            ok = ss > 0
            coef = np.zeros_like(ss)
            coef[ok] = (Fc[:, ok].T @ (Y[tr] - ym)) / ss[ok]
            # lstsq treats an all-zero column as rank 0
            coef[scale == 0] = 0.0
            pred = ym + (F[te] - fm) * coef
            err += np.mean((Y[te][:, None] - pred) ** 2, axis=0)
        return err / len(self.tests)

    def _cv_pspline(self, subset) -> float:
        Z = np.hstack([self.Zseg[k] for k in subset])
        P = _block_penalty([self.blocks[k] for k in subset])
        Y = self.Y
        err = 0.0
        for tr, te in zip(self.trains, self.tests):
            system = _PenalizedSystem(Z[tr], Y[tr], P)
            gp = system.path(self.lambdas)
            intercept, beta = system.coefs(float(gp.lambdas[gp.best]))
            pred = intercept + Z[te] @ beta
            err += np.mean((Y[te] - pred) ** 2)
        return err / len(self.tests)


def _block_penalty(blocks):
    from scipy.linalg import block_diag

    return block_diag(*[b.penalty for b in blocks])


def cv_error(data, segments, subset, folds: int = 5, fitter: str = "pwc", fold_ids=None, seed=None, lambdas=DEFAULT_LAMBDAS) -> float:
    """Mean over folds of the held-out mean squared prediction error.

    ``fold_ids`` fixes the split explicitly; otherwise one is drawn from
    ``seed``.
    """
    if data.Y is None:
        raise ValidationError("dataset has no response")
    if fold_ids is None:
        fold_ids = make_folds(data.n, folds, seed)
    t = data.grid.points if isinstance(data, Dataset1D) else None
    ev = CVEvaluator(data.X, data.Y, _labels_of(segments), fold_ids, fitter, t=t, lambdas=lambdas)
    return ev(subset)


@dataclass
class SelectionStep:
    subsets: List[Tuple[int, ...]]
    cv: List[float]

    @property
    def best(self) -> Tuple[int, ...]:
        return self.subsets[0]

    @property
    def cv_star(self) -> float:
        return self.cv[0]


@dataclass
class SelectionTrace:
    steps: List[SelectionStep]
    selected: Tuple[int, ...]
    stop_step: int  # 1-based K
    stop_reason: str
    m: int
    q: float
    c: float
    fitter: str = "pwc"

    @property
    def cv_star_path(self) -> List[float]:
        return [s.cv_star for s in self.steps]

    def to_dict(self) -> dict:
        return {
            "selected": list(self.selected),
            "stop_step": self.stop_step,
            "stop_reason": self.stop_reason,
            "m": self.m,
            "q": self.q,
            "c": self.c,
            "fitter": self.fitter,
            "cv_star_path": self.cv_star_path,
            "steps": [
                {"subsets": [list(s) for s in st.subsets], "cv": list(st.cv)} for st in self.steps
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionTrace":
        return cls(
            steps=[SelectionStep([tuple(s) for s in st["subsets"]], list(st["cv"])) for st in d["steps"]],
            selected=tuple(d["selected"]),
            stop_step=int(d["stop_step"]),
            stop_reason=d["stop_reason"],
            m=int(d["m"]),
            q=float(d["q"]),
            c=float(d["c"]),
            fitter=d.get("fitter", "pwc"),
        )


def _rank(subsets, cvs) -> SelectionStep:
    order = sorted(range(len(subsets)), key=lambda i: (cvs[i], len(subsets[i]), subsets[i]))
    return SelectionStep([subsets[i] for i in order], [float(cvs[i]) for i in order])


def default_q(data_kind: str, n_points: int, n_segments: int) -> float:
    """Truncation budget: ``p/2`` for curves, ``L/2`` for volumes."""
    return max(1.0, (n_points if data_kind == "1d" else n_segments) / 2.0)


def greedy_search(evaluator: CVEvaluator, c: float, q: float) -> SelectionTrace:
    L = evaluator.n_segments
    if L < 1:
        raise ValidationError("no segments to select from")
    m = max(1, math.ceil(math.sqrt(q) - 1e-12))
    singles = [(k,) for k in range(L)]
    steps = [_rank(singles, list(evaluator.singletons()))]
    seen = set(singles)
    var_y = float(np.var(evaluator.Y))
    K = 1
    reason = "max_steps"
    while True:
        if K >= L:
            reason = "max_steps"
            break
        top = steps[-1].subsets[:m]
        fresh = []
        for a, b in combinations(top, 2):
            u = tuple(sorted(set(a) | set(b)))
            if u == a or u == b or u in seen:
                continue
            seen.add(u)
            fresh.append(u)
        if not fresh:
            reason = "exhausted"
            break
        steps.append(_rank(fresh, [evaluator(s) for s in fresh]))
        cv_k, cv_next = steps[K - 1].cv_star, steps[K].cv_star
        if cv_k <= PERFECT_FIT_RTOL * var_y or (cv_k - cv_next) / cv_k <= c:
            reason = "threshold"
            break
        K += 1
    return SelectionTrace(
        steps=steps,
        selected=steps[K - 1].best,
        stop_step=K,
        stop_reason=reason,
        m=m,
        q=float(q),
        c=float(c),
        fitter=evaluator.fitter,
    )


def select_subset(data, segments, config: Optional[SelectionConfig] = None, fold_ids=None) -> SelectionTrace:
    """Run the greedy subset search on a dataset and a segmentation."""
    config = config or SelectionConfig()
    if data.Y is None:
        raise ValidationError("dataset has no response")
    labels = _labels_of(segments)
    if labels.size != data.n_points:
        raise ValidationError("segmentation does not match the dataset grid")
    if fold_ids is None:
        fold_ids = make_folds(data.n, config.folds, config.seed)
    is_1d = isinstance(data, Dataset1D)
    if config.fitter == "pspline" and not is_1d:
        raise ValidationError("the pspline fitter needs 1D data")
    ev = CVEvaluator(
        data.X,
        data.Y,
        labels,
        fold_ids,
        config.fitter,
        t=data.grid.points if is_1d else None,
        lambdas=config.lambdas,
    )
    q = config.q if config.q is not None else default_q("1d" if is_1d else "3d", data.n_points, ev.n_segments)
    return greedy_search(ev, config.c, q)
