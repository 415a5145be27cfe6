"""Segment-restricted linear fitters.

Every fitted model is a linear functional ``Y ~ intercept + <X, beta>`` with
``beta`` supported on the chosen segments, so predictions reduce to
``intercept + X @ beta / N`` with ``N`` the number of grid points.

Two bases are available for ``beta`` on a segment:

* ``pwc``: one constant per segment, i.e. OLS on segment integrals;
* ``pspline``: cubic B-splines with equi-spaced knots and a second
  derivative roughness penalty whose weight is chosen by GCV, shared
  across segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .core import Dataset1D, Dataset3D, ValidationError

PINV_RCOND = 1e-10
POINTS_PER_KNOT = 4
MIN_SPLINE_POINTS = 4
# ridge added to the centred Gram matrix, relative to its mean eigenvalue
GRAM_JITTER = 1e-10
DEFAULT_LAMBDAS = np.logspace(-6, 4, 30)


def segment_members(labels: np.ndarray, subset: Sequence[int]) -> List[np.ndarray]:
    labels = np.asarray(labels)
    return [np.flatnonzero(labels == k) for k in subset]


def _labels_of(segments) -> np.ndarray:
    if hasattr(segments, "labels"):
        lab = segments.labels
        return np.asarray(lab() if callable(lab) else lab)
    return np.asarray(segments)


@dataclass(eq=False)
class SegmentFeatures:
    """Riemann integrals of each sample over the chosen segments."""

    F: np.ndarray
    subset: List[int]
    members: List[np.ndarray] = field(repr=False)
    n_points: int = 0

    @property
    def sizes(self) -> List[int]:
        return [int(m.size) for m in self.members]


def segment_features(X: np.ndarray, members: Sequence[np.ndarray], n_points: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    F = np.empty((X.shape[0], len(members)))
    for k, idx in enumerate(members):
        F[:, k] = X[:, idx].sum(axis=1)
    return F / n_points


def features(data, segments, subset: Sequence[int]) -> SegmentFeatures:
    """Segment-integral design matrix for ``subset`` of the segmentation."""
    subset = [int(k) for k in subset]
    if not subset:
        raise ValidationError("empty subset")
    labels = _labels_of(segments)
    if labels.size != data.n_points:
        raise ValidationError("segmentation does not match the dataset grid")
    n_seg = int(labels.max()) + 1
    if min(subset) < 0 or max(subset) >= n_seg:
        raise ValidationError(f"subset {subset} outside segment range 0..{n_seg - 1}")
    members = segment_members(labels, subset)
    F = segment_features(data.X, members, data.n_points)
    return SegmentFeatures(F=F, subset=subset, members=members, n_points=data.n_points)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class LinearFunctionalModel:
    intercept: float
    n_points: int

    def beta_on_grid(self) -> np.ndarray:
        raise NotImplementedError

    def predict(self, X) -> np.ndarray:
        if isinstance(X, (Dataset1D, Dataset3D)):
            X = X.X
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_points:
            raise ValidationError(f"expected X with {self.n_points} columns, got shape {X.shape}")
        return self.intercept + X @ self.beta_on_grid() / self.n_points


@dataclass(eq=False)
class PwcModel(LinearFunctionalModel):
    coefs: np.ndarray = None
    subset: List[int] = field(default_factory=list)
    members: List[np.ndarray] = field(default_factory=list, repr=False)

    def beta_on_grid(self) -> np.ndarray:
        beta = np.zeros(self.n_points)
        for c, idx in zip(self.coefs, self.members):
            beta[idx] = c
        return beta

    def predict_features(self, F: np.ndarray) -> np.ndarray:
        return self.intercept + np.asarray(F) @ self.coefs

    def to_dict(self) -> dict:
        return {
            "kind": "pwc",
            "intercept": self.intercept,
            "n_points": self.n_points,
            "subset": list(self.subset),
            "coefs": [float(c) for c in self.coefs],
            "members": [m.tolist() for m in self.members],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PwcModel":
        return cls(
            intercept=float(d["intercept"]),
            n_points=int(d["n_points"]),
            coefs=np.asarray(d["coefs"], dtype=float),
            subset=list(d["subset"]),
            members=[np.asarray(m, dtype=int) for m in d["members"]],
        )


def _lstsq_with_intercept(F: np.ndarray, Y: np.ndarray):
    fm = F.mean(axis=0)
    ym = Y.mean()
    coefs = np.linalg.lstsq(F - fm, Y - ym, rcond=PINV_RCOND)[0]
    return float(ym - fm @ coefs), coefs


def fit_pwc(features, Y) -> PwcModel:
    """Least squares with intercept on segment integrals.

    Rank-deficient designs get the minimum-norm solution.
    """
    Y = np.asarray(Y, dtype=float).ravel()
    if isinstance(features, SegmentFeatures):
        F, subset, members, n_points = features.F, features.subset, features.members, features.n_points
    else:
        F = np.asarray(features, dtype=float)
        if F.ndim == 1:
            F = F[:, None]
        subset, members, n_points = list(range(F.shape[1])), [], 0
    if F.shape[0] != Y.size or Y.size == 0:
        raise ValidationError("features and Y disagree on the number of samples")
    intercept, coefs = _lstsq_with_intercept(F, Y)
    return PwcModel(intercept=intercept, n_points=n_points, coefs=coefs, subset=subset, members=members)


# ---------------------------------------------------------------------------
# Penalized B-splines
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SplineBlock:
    """Basis for ``beta`` on one segment (or one cluster of grid points)."""

    members: np.ndarray
    knots: np.ndarray
    basis: np.ndarray  # (len(members), k) values at the member points
    penalty: np.ndarray  # (k, k) integrated squared second derivatives
    constant: bool = False

    @property
    def k(self) -> int:
        return self.basis.shape[1]


def _second_derivative_gram(knots: np.ndarray, k: int) -> np.ndarray:
    d2 = BSpline(knots, np.eye(k), 3).derivative(2)
    breaks = np.unique(knots)
    # B'' is piecewise linear, so two Gauss points per interval are exact
    g, w = np.polynomial.legendre.leggauss(2)
    mid = 0.5 * (breaks[1:] + breaks[:-1])
    half = 0.5 * (breaks[1:] - breaks[:-1])
    x = (mid[:, None] + half[:, None] * g[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel()
    D = d2(x)
    return (D * wt[:, None]).T @ D


def spline_block(t: np.ndarray, members: np.ndarray, points_per_knot: int = POINTS_PER_KNOT) -> SplineBlock:
    """Cubic B-spline basis over the span of ``members`` on grid ``t``.

    Uses ``len(members) // points_per_knot`` equi-spaced interior knots;
    fewer than four points fall back to a single constant.
    """
    members = np.asarray(members, dtype=int)
    m = members.size
    tm = np.asarray(t, dtype=float)[members]
    if m < MIN_SPLINE_POINTS:
        return SplineBlock(members, np.array([]), np.ones((m, 1)), np.zeros((1, 1)), constant=True)
    lo, hi = float(tm[0]), float(tm[-1])
    n_int = m // points_per_knot
    interior = lo + (hi - lo) * np.arange(1, n_int + 1) / (n_int + 1)
    knots = np.concatenate([[lo] * 4, interior, [hi] * 4])
    k = knots.size - 4
    B = BSpline.design_matrix(np.clip(tm, lo, hi), knots, 3).toarray()
    return SplineBlock(members, knots, B, _second_derivative_gram(knots, k))


def spline_design(X: np.ndarray, blocks: Sequence[SplineBlock], n_points: int):
    """Columns ``(1/N) sum_{j in seg} X(t_j) B_k(t_j)`` and the block penalty."""
    X = np.asarray(X, dtype=float)
    Z = np.hstack([X[:, b.members] @ b.basis for b in blocks]) / n_points
    P = linalg.block_diag(*[b.penalty for b in blocks])
    return Z, P


@dataclass(eq=False)
class GCVPath:
    lambdas: np.ndarray
    gcv: np.ndarray
    rss: np.ndarray
    edf: np.ndarray
    best: int


class _PenalizedSystem:
    """Centred penalized least squares diagonalized once for a whole lambda grid.

    With ``G = Zc'Zc + delta I = R'R`` and ``R^-T (sP) R^-1 = U diag(e) U'``,
    the smoother's eigenvalues are ``1 / (1 + lam * e)``, which gives RSS,
    trace and coefficients for every ``lam`` in closed form.
    """

    def __init__(self, Z: np.ndarray, y: np.ndarray, P: np.ndarray):
        Z = np.asarray(Z, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        self.n = y.size
        self.z_mean = Z.mean(axis=0)
        self.y_mean = y.mean()
        Zc = Z - self.z_mean
        yc = y - self.y_mean
        G = Zc.T @ Zc
        k = G.shape[0]
        trG = np.trace(G)
        self.delta = GRAM_JITTER * trG / k if trG > 0 else GRAM_JITTER
        trP = np.trace(P)
        self.scale = trG / trP if trP > 0 else 1.0
        R = linalg.cholesky(G + self.delta * np.eye(k), lower=False)
        Rinv = linalg.solve_triangular(R, np.eye(k), lower=False)
        A = Rinv.T @ (self.scale * P) @ Rinv
        e, U = linalg.eigh(0.5 * (A + A.T))
        self.e = np.clip(e, 0.0, None)
        self.W = Rinv @ U
        self.a = self.W.T @ (Zc.T @ yc)
        self.yy = float(yc @ yc)

    def path(self, lambdas) -> GCVPath:
        lambdas = np.asarray(lambdas, dtype=float)
        f = 1.0 / (1.0 + lambdas[:, None] * self.e[None, :])
        a2 = self.a**2
        rss = self.yy - 2.0 * (f * a2).sum(axis=1) + (f**2 * a2).sum(axis=1)
        rss = np.clip(rss, 0.0, None)
        edf = f.sum(axis=1) + 1.0  # intercept
        denom = self.n - edf
        with np.errstate(divide="ignore", invalid="ignore"):
            gcv = np.where(denom > 0, self.n * rss / denom**2, np.inf)
        best = int(np.argmin(gcv))
        return GCVPath(lambdas, gcv, rss, edf, best)

    def coefs(self, lam: float):
        beta = self.W @ (self.a / (1.0 + lam * self.e))
        return float(self.y_mean - self.z_mean @ beta), beta


def gcv_path(Z, y, P, lambdas=DEFAULT_LAMBDAS) -> GCVPath:
    """GCV(lam) = n RSS / (n - tr H)^2 over a grid of relative penalties.

    ``lambdas`` multiply ``P`` after rescaling it to the trace of the centred
    Gram matrix, so the default grid works regardless of data units.
    """
    return _PenalizedSystem(Z, y, P).path(lambdas)


def fit_penalized(Z, y, P, lambdas=DEFAULT_LAMBDAS):
    """Returns ``(intercept, coefs, lambda, gcv_path)`` at the GCV minimizer."""
    system = _PenalizedSystem(Z, y, P)
    gp = system.path(lambdas)
    lam = float(gp.lambdas[gp.best])
    intercept, beta = system.coefs(lam)
    return intercept, beta, lam, gp


@dataclass(eq=False)
class PsplineModel(LinearFunctionalModel):
    blocks: List[SplineBlock] = field(default_factory=list, repr=False)
    coefs: List[np.ndarray] = field(default_factory=list)
    lam: float = 0.0
    subset: List[int] = field(default_factory=list)
    gcv: Optional[GCVPath] = field(default=None, repr=False)

    @property
    def fallback_segments(self) -> List[int]:
        return [s for s, b in zip(self.subset, self.blocks) if b.constant]

    def beta_on_grid(self) -> np.ndarray:
        beta = np.zeros(self.n_points)
        for b, c in zip(self.blocks, self.coefs):
            beta[b.members] = b.basis @ c
        return beta

    def to_dict(self) -> dict:
        return {
            "kind": "pspline",
            "intercept": self.intercept,
            "n_points": self.n_points,
            "lambda": self.lam,
            "subset": list(self.subset),
            "blocks": [
                {
                    "members": b.members.tolist(),
                    "knots": b.knots.tolist(),
                    "constant": b.constant,
                    "coefs": [float(x) for x in c],
                }
                for b, c in zip(self.blocks, self.coefs)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, t: Optional[np.ndarray] = None) -> "PsplineModel":
        n_points = int(d["n_points"])
        t = np.arange(1, n_points + 1) / n_points if t is None else t
        blocks, coefs = [], []
        for bd in d["blocks"]:
            members = np.asarray(bd["members"], dtype=int)
            if bd["constant"]:
                blk = SplineBlock(members, np.array([]), np.ones((members.size, 1)), np.zeros((1, 1)), True)
            else:
                knots = np.asarray(bd["knots"], dtype=float)
                k = knots.size - 4
                B = BSpline.design_matrix(np.clip(t[members], knots[0], knots[-1]), knots, 3).toarray()
                blk = SplineBlock(members, knots, B, _second_derivative_gram(knots, k))
            blocks.append(blk)
            coefs.append(np.asarray(bd["coefs"], dtype=float))
        return cls(
            intercept=float(d["intercept"]),
            n_points=n_points,
            blocks=blocks,
            coefs=coefs,
            lam=float(d["lambda"]),
            subset=list(d["subset"]),
        )


def fit_pspline_blocks(X, Y, blocks: Sequence[SplineBlock], n_points: int, lambdas=DEFAULT_LAMBDAS, subset=None) -> PsplineModel:
    Z, P = spline_design(X, blocks, n_points)
    intercept, beta, lam, gp = fit_penalized(Z, Y, P, lambdas)
    splits = np.cumsum([b.k for b in blocks])[:-1]
    return PsplineModel(
        intercept=intercept,
        n_points=n_points,
        blocks=list(blocks),
        coefs=np.split(beta, splits),
        lam=lam,
        subset=list(range(len(blocks))) if subset is None else list(subset),
        gcv=gp,
    )


def fit_pspline(data: Dataset1D, segments, subset: Sequence[int], lambda_grid=DEFAULT_LAMBDAS) -> PsplineModel:
    """Penalized B-spline fit of ``beta`` over the selected 1D segments."""
    if not isinstance(data, Dataset1D):
        raise ValidationError("penalized splines are only defined for 1D data")
    if data.Y is None:
        raise ValidationError("dataset has no response")
    subset = [int(k) for k in subset]
    if not subset:
        raise ValidationError("empty subset")
    labels = _labels_of(segments)
    members = segment_members(labels, subset)
    blocks = [spline_block(data.grid.points, m) for m in members]
    return fit_pspline_blocks(data.X, data.Y, blocks, data.n_points, lambda_grid, subset=subset)


def predict(model: LinearFunctionalModel, data) -> np.ndarray:
    return model.predict(data)
