"""Simulation generators for curves, volumes, coefficients and responses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import linalg, signal
from scipy.interpolate import BSpline

from .core import MIN_SAMPLES, Dataset1D, Dataset3D, Grid1D, ValidationError, riemann_ip

ARMA_AR = (0.8, -0.1)
ARMA_MA = (-0.1, 0.9)
ARMA_BURN_IN = 50
SPLINE_COEF_VAR = 4.0
# coefficient ball at the reference volume size
BALL_REF_DIMS = (120, 120, 10)
BALL_REF_CENTER = (60.0, 30.0, 5.0)
BALL_REF_RADIUS = 5.0
BALL_HEIGHT = 10.0


def beta_1d(grid) -> np.ndarray:
    """Two disjoint sinusoidal bumps.

    On a 128-point grid the support is indices 50-56 and 94-100 (1-based);
    other grid sizes scale those index ranges proportionally.
    """
    p = grid.p if isinstance(grid, Grid1D) else int(grid)
    t = np.arange(1, p + 1) / p
    j = np.arange(1, p + 1)
    scale = p / 128.0
    first = (j >= math.ceil(50 * scale - 1e-9)) & (j <= math.floor(56 * scale + 1e-9))
    second = (j >= math.ceil(94 * scale - 1e-9)) & (j <= math.floor(100 * scale + 1e-9))
    beta = np.zeros(p)
    beta[first] = 0.5 * np.cos(40 * t[first] - np.pi) + 2 * t[first]
    beta[second] = 0.5 * np.sin(40 * t[second] - np.pi) + 2 * t[second]
    return beta


def ball_geometry(dims) -> Tuple[Tuple[float, float, float], float]:
    """Ball center and radius rescaled from the reference volume to ``dims``.

    Each center coordinate scales with its own axis; the radius scales with
    the geometric mean of the three axis factors.
    """
    f = [d / r for d, r in zip(dims, BALL_REF_DIMS)]
    center = tuple(c * s for c, s in zip(BALL_REF_CENTER, f))
    radius = BALL_REF_RADIUS * float(np.prod(f)) ** (1.0 / 3.0)
    return center, radius


def beta_3d_ball(dims, center=None, radius=None, height: float = BALL_HEIGHT) -> np.ndarray:
    """Piecewise-constant coefficient: ``height`` inside a ball, 0 outside.

    Returns the flat volume in the ``(z, v, h)`` C-order voxel layout.
    """
    H, V, Z = dims
    c0, r0 = ball_geometry(dims)
    center = c0 if center is None else center
    radius = r0 if radius is None else radius
    z, v, h = np.meshgrid(np.arange(Z), np.arange(V), np.arange(H), indexing="ij")
    d2 = (h - center[0]) ** 2 + (v - center[1]) ** 2 + (z - center[2]) ** 2
    inside = d2 <= radius**2 + 1e-9
    if not inside.any():
        raise ValidationError("coefficient ball does not intersect the grid")
    return np.where(inside, float(height), 0.0).ravel()


def sim_arma(n: int, p: int, seed=None) -> Dataset1D:
    """ARMA(2,2) curves on a regular grid, after a burn-in."""
    if p < 3:
        raise ValidationError(f"p must be >= 3, got {p}")
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((n, p + ARMA_BURN_IN))
    b = [1.0, *ARMA_MA]
    a = [1.0, -ARMA_AR[0], -ARMA_AR[1]]
    X = signal.lfilter(b, a, e, axis=1)[:, ARMA_BURN_IN:]
    return Dataset1D(np.ascontiguousarray(X), grid=Grid1D.regular(p))


def spline_process_basis(p: int) -> np.ndarray:
    """Cubic B-spline basis with interior knots 1/16..15/16 evaluated at ``j/p``."""
    knots = np.concatenate([[0.0] * 4, np.arange(1, 16) / 16.0, [1.0] * 4])
    t = np.arange(1, p + 1) / p
    return BSpline.design_matrix(t, knots, 3).toarray()


def sim_bspline(n: int, p: int, seed=None) -> Dataset1D:
    """Curves as random combinations of cubic B-splines, coefficients N(0, 4)."""
    if p < 17:
        raise ValidationError(f"p must be >= 17, got {p}")
    rng = np.random.default_rng(seed)
    B = spline_process_basis(p)
    coefs = rng.normal(0.0, math.sqrt(SPLINE_COEF_VAR), size=(n, B.shape[1]))
    return Dataset1D(coefs @ B.T, grid=Grid1D.regular(p))


def ar1_factor(size: int, r: float) -> np.ndarray:
    """Lower Cholesky factor of the AR(1) correlation matrix ``r**|i-j|``."""
    idx = np.arange(size)
    return linalg.cholesky(r ** np.abs(idx[:, None] - idx[None, :]), lower=True)


def ellipsoid_mask(dims) -> np.ndarray:
    """Ellipsoid inscribed in the box, flat layout."""
    H, V, Z = dims
    z, v, h = np.meshgrid(np.arange(Z), np.arange(V), np.arange(H), indexing="ij")
    q = sum(((x - (d - 1) / 2) / (d / 2)) ** 2 for x, d in ((h, H), (v, V), (z, Z)))
    return (q <= 1.0).ravel()


def sim_field3d(n: int, dims, axis_corr=(0.9, 0.9, 0.9), seed=None, mask=None) -> Dataset3D:
    """Gaussian fields with separable AR(1) covariance along h, v and z."""
    H, V, Z = (int(d) for d in dims)
    if min(H, V, Z) < 1:
        raise ValidationError(f"dims must be positive, got {dims}")
    axis_corr = tuple(axis_corr) if not np.isscalar(axis_corr) else (axis_corr,) * 3
    if any(not 0 <= r < 1 for r in axis_corr):
        raise ValidationError(f"axis correlations must lie in [0, 1), got {axis_corr}")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((n, Z, V, H))
    Lh, Lv, Lz = (ar1_factor(s, r) for s, r in zip((H, V, Z), axis_corr))
    F = np.einsum("nzvh,ah->nzva", W, Lh, optimize=True)
    F = np.einsum("nzvh,av->nzah", F, Lv, optimize=True)
    F = np.einsum("nzvh,az->navh", F, Lz, optimize=True)
    X = F.reshape(n, -1)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).ravel()
        X = X * mask
    return Dataset3D(np.ascontiguousarray(X), dims=(H, V, Z), mask=mask)


def gen_response(X, beta, snr: float, seed=None) -> np.ndarray:
    """``Y = <X, beta> + eps`` with noise variance ``var(<X, beta>) / snr``."""
    if isinstance(X, (Dataset1D, Dataset3D)):
        X = X.X
    if not snr > 0:
        raise ValidationError(f"snr must be > 0, got {snr}")
    signal_ = np.asarray(riemann_ip(np.asarray(X, dtype=float), np.asarray(beta, dtype=float)))
    if math.isinf(snr):
        return signal_
    v = float(np.var(signal_))
    if v <= 0:
        raise ValidationError("signal has zero variance; noise level undefined")
    rng = np.random.default_rng(seed)
    return signal_ + rng.normal(0.0, math.sqrt(v / snr), size=signal_.shape)


@dataclass
class SimSpec:
    kind: str = "arma1d"  # arma1d | bspline1d | field3d
    n: int = 800
    n_test: int = 1000
    p: int = 128
    dims: Tuple[int, int, int] = (40, 40, 10)
    snr: float = 20.0
    seed: int = 0
    axis_corr: Tuple[float, float, float] = (0.9, 0.9, 0.9)
    mask: str = "none"  # none | ellipsoid

    def __post_init__(self):
        if self.kind not in ("arma1d", "bspline1d", "field3d"):
            raise ValidationError(f"kind must be arma1d, bspline1d or field3d, got {self.kind!r}")
        if not self.snr > 0:
            raise ValidationError(f"snr must be > 0, got {self.snr}")
        if self.n < MIN_SAMPLES or not (self.n_test == 0 or self.n_test >= MIN_SAMPLES):
            raise ValidationError(f"n must be >= {MIN_SAMPLES} and n_test 0 or >= {MIN_SAMPLES}")
        self.dims = tuple(int(d) for d in self.dims)
        if min(self.dims) < 1:
            raise ValidationError(f"dims must be positive, got {self.dims}")
        self.axis_corr = tuple(float(r) for r in self.axis_corr)
        if self.mask not in ("none", "ellipsoid"):
            raise ValidationError(f"mask must be none or ellipsoid, got {self.mask!r}")

    @property
    def is_3d(self) -> bool:
        return self.kind == "field3d"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["axis_corr"] = list(self.axis_corr)
        return d


@dataclass(eq=False)
class Simulation:
    train: object
    test: Optional[object]
    beta: np.ndarray
    truth: np.ndarray = field(default=None)
    test_signal: Optional[np.ndarray] = None  # noise-free test responses

    def __post_init__(self):
        if self.truth is None:
            self.truth = np.flatnonzero(self.beta != 0)


def simulate(spec: SimSpec) -> Simulation:
    """Draw a training set and an independent test set from one protocol.

    The noise level is calibrated on the pooled samples.
    """
    total = spec.n + spec.n_test
    ss = np.random.SeedSequence(spec.seed)
    x_seed, y_seed = ss.spawn(2)
    if spec.kind == "arma1d":
        data = sim_arma(total, spec.p, x_seed)
        beta = beta_1d(spec.p)
    elif spec.kind == "bspline1d":
        data = sim_bspline(total, spec.p, x_seed)
        beta = beta_1d(spec.p)
    else:
        mask = ellipsoid_mask(spec.dims) if spec.mask == "ellipsoid" else None
        data = sim_field3d(total, spec.dims, spec.axis_corr, x_seed, mask=mask)
        beta = beta_3d_ball(spec.dims)
        if mask is not None:
            beta = beta * mask
    Y = gen_response(data.X, beta, spec.snr, y_seed)
    train = _with_response(data, slice(0, spec.n), Y)
    test = _with_response(data, slice(spec.n, total), Y) if spec.n_test > 0 else None
    signal_ = riemann_ip(data.X[spec.n :], beta) if spec.n_test > 0 else None
    return Simulation(train=train, test=test, beta=beta, test_signal=signal_)


def _with_response(data, rows, Y):
    if isinstance(data, Dataset1D):
        return Dataset1D(data.X[rows], Y=Y[rows], grid=data.grid)
    return Dataset3D(data.X[rows], dims=data.dims, mask=data.mask, Y=Y[rows])
