"""Functional data containers and the correlation/integral primitives.

Grids are always normalized to (0, 1] with ``t_j = j / p`` (``j = 1..p``),
so block integrals of the correlation surface carry a ``1 / p**2`` Riemann
weight and the full-domain integral never exceeds one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple, Union

import numpy as np

MIN_SAMPLES = 10
UNIFORM_RTOL = 1e-9
# relative variance floor under which a grid point counts as constant
_ZERO_VARIANCE_RTOL = 1e-14


class FudosError(Exception):
    """Base class for all package errors."""


class ValidationError(FudosError, ValueError):
    """Malformed input: bad shapes, bad parameters, non-finite values."""


class DegenerateDataError(FudosError):
    """The data carry no usable signal (e.g. every grid point is constant)."""


def _check_finite(arr: np.ndarray, name: str) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValidationError(f"{name} has a non-finite entry at index {loc}: {arr[loc]!r}")


# ---------------------------------------------------------------------------
# Grids and datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Grid1D:
    """Equi-spaced sampling grid.

    ``points`` are the normalized locations ``j / p``; ``raw`` keeps whatever
    coordinates the data came with (wavelengths, seconds, ...).
    """

    points: np.ndarray
    raw: np.ndarray

    @classmethod
    def regular(cls, p: int) -> "Grid1D":
        if p < 4:
            raise ValidationError(f"grid needs at least 4 points, got p={p}")
        pts = np.arange(1, p + 1, dtype=float) / p
        return cls(points=pts, raw=pts.copy())

    @classmethod
    def from_points(cls, raw) -> "Grid1D":
        raw = np.asarray(raw, dtype=float).ravel()
        _check_finite(raw, "grid")
        if raw.size < 4:
            raise ValidationError(f"grid needs at least 4 points, got p={raw.size}")
        steps = np.diff(raw)
        if np.any(steps <= 0):
            raise ValidationError("grid points must be strictly increasing")
        if np.ptp(steps) > UNIFORM_RTOL * steps.mean():
            raise ValidationError("non-uniform grids are not supported")
        p = raw.size
        return cls(points=np.arange(1, p + 1, dtype=float) / p, raw=raw.copy())

    @property
    def p(self) -> int:
        return int(self.points.size)


@dataclass(eq=False)
class Dataset1D:
    """Sampled curves ``X`` (rows = samples) with optional scalar response."""

    X: np.ndarray
    Y: Optional[np.ndarray] = None
    grid: Optional[Grid1D] = None
    centered: bool = False
    x_mean: Optional[np.ndarray] = None
    y_mean: float = 0.0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2:
            raise ValidationError("X must be a 2D array (samples x grid points)")
        n, p = self.X.shape
        if n < MIN_SAMPLES:
            raise ValidationError(f"need at least {MIN_SAMPLES} samples, got n={n}")
        _check_finite(self.X, "X")
        if self.grid is None:
            self.grid = Grid1D.regular(p)
        if self.grid.p != p:
            raise ValidationError(f"grid has {self.grid.p} points but X has {p} columns")
        if self.Y is not None:
            self.Y = np.asarray(self.Y, dtype=float).ravel()
            if self.Y.size != n:
                raise ValidationError(f"Y has {self.Y.size} entries, expected {n}")
            _check_finite(self.Y, "Y")
        if self.x_mean is None:
            self.x_mean = np.zeros(p)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_points(self) -> int:
        return self.p

    def rows(self, idx) -> "Dataset1D":
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], Y=None if self.Y is None else self.Y[idx])


@dataclass(eq=False)
class Dataset3D:
    """Volumes flattened with index ``(z * V + v) * H + h``.

    That is C order for an array of shape ``(Z, V, H)``; ``volume()`` gives
    that view.
    """

    X: np.ndarray
    dims: Tuple[int, int, int]
    mask: Optional[np.ndarray] = None
    Y: Optional[np.ndarray] = None
    centered: bool = False
    x_mean: Optional[np.ndarray] = None
    y_mean: float = 0.0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValidationError(f"dims must be three positive axis sizes, got {self.dims}")
        H, V, Z = self.dims
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.X.shape[1] != H * V * Z:
            raise ValidationError(f"X must have shape (n, {H * V * Z})")
        if self.X.shape[0] < MIN_SAMPLES:
            raise ValidationError(f"need at least {MIN_SAMPLES} samples, got n={self.X.shape[0]}")
        _check_finite(self.X, "X")
        if self.mask is None:
            self.mask = np.ones(H * V * Z, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool).ravel()
        if self.mask.size != H * V * Z:
            raise ValidationError("mask size does not match dims")
        if not self.mask.any():
            raise ValidationError("mask has no voxel set")
        if self.Y is not None:
            self.Y = np.asarray(self.Y, dtype=float).ravel()
            if self.Y.size != self.X.shape[0]:
                raise ValidationError(f"Y has {self.Y.size} entries, expected {self.X.shape[0]}")
            _check_finite(self.Y, "Y")
        if self.x_mean is None:
            self.x_mean = np.zeros(H * V * Z)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_points(self) -> int:
        H, V, Z = self.dims
        return H * V * Z

    def volume(self) -> np.ndarray:
        H, V, Z = self.dims
        return self.X.reshape(self.n, Z, V, H)

    def rows(self, idx) -> "Dataset3D":
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], Y=None if self.Y is None else self.Y[idx])


Dataset = Union[Dataset1D, Dataset3D]


def voxel_index(h, v, z, dims) -> np.ndarray:
    H, V, _ = dims
    return (np.asarray(z) * V + np.asarray(v)) * H + np.asarray(h)


def voxel_coords(dims) -> np.ndarray:
    """``(H*V*Z, 3)`` integer array of ``(h, v, z)`` in flat layout order."""
    H, V, Z = dims
    z, v, h = np.meshgrid(np.arange(Z), np.arange(V), np.arange(H), indexing="ij")
    return np.column_stack([h.ravel(), v.ravel(), z.ravel()])


def center(data: Dataset) -> Dataset:
    """Remove column means of ``X`` and the mean of ``Y``.

    Means accumulate in ``x_mean`` / ``y_mean`` so ``X + x_mean`` restores
    the original values. Masked-out voxels of a 3D dataset are set to 0.
    """
    _check_finite(data.X, "X")
    mx = data.X.mean(axis=0)
    X = data.X - mx
    x_mean = data.x_mean + mx
    if isinstance(data, Dataset3D):
        X[:, ~data.mask] = 0.0
    Y, y_mean = data.Y, data.y_mean
    if Y is not None:
        _check_finite(Y, "Y")
        my = Y.mean()
        Y = Y - my
        y_mean = y_mean + my
    return replace(data, X=X, Y=Y, centered=True, x_mean=x_mean, y_mean=y_mean)


# ---------------------------------------------------------------------------
# Correlation and integrals
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class CorrMatrix:
    """Absolute correlation surface sampled on the grid.

    ``valid`` flags points with non-zero variance; rows and columns of
    invalid points are zero (including their diagonal entry). ``cov`` keeps
    the second-moment matrix the correlation was normalized from.
    """

    C: np.ndarray
    valid: np.ndarray
    cov: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def p(self) -> int:
        return self.C.shape[0]


def corr_from_cov(G: np.ndarray) -> CorrMatrix:
    G = np.asarray(G, dtype=float)
    G = 0.5 * (G + G.T)
    d = np.diag(G).copy()
    dmax = d.max() if d.size else 0.0
    valid = d > _ZERO_VARIANCE_RTOL * dmax if dmax > 0 else np.zeros(d.size, dtype=bool)
    if not valid.any():
        raise DegenerateDataError("degenerate dataset: every grid point has zero variance")
    sd = np.where(valid, np.sqrt(np.where(valid, d, 1.0)), 1.0)
    C = np.abs(G) / np.outer(sd, sd)
    C[~valid, :] = 0.0
    C[:, ~valid] = 0.0
    np.clip(C, 0.0, 1.0, out=C)
    idx = np.flatnonzero(valid)
    C[idx, idx] = 1.0
    return CorrMatrix(C=C, valid=valid, cov=G)


def abs_correlation(data) -> CorrMatrix:
    """Absolute correlation between every pair of grid points.

    Accepts a dataset (centred first if needed) or a raw ``(n, p)`` array,
    which is taken to be centred already.
    """
    if isinstance(data, (Dataset1D, Dataset3D)):
        X = data.X if data.centered else center(data).X
    else:
        X = np.asarray(data, dtype=float)
    G = X.T @ X / X.shape[0]
    return corr_from_cov(G)


@dataclass(eq=False)
class IntegralTable:
    """Summed-area table of a correlation surface.

    ``S[a, b]`` holds the sum of ``C[:a, :b]`` divided by ``p**2``, so a
    square block integral is an O(1) inclusion-exclusion.
    """

    S: np.ndarray

    @property
    def p(self) -> int:
        return self.S.shape[0] - 1

    def block(self, start, stop):
        """Integral over the square block of grid indices ``[start, stop)``.

        Works elementwise on arrays of starts and stops.
        """
        S = self.S
        return S[stop, stop] - S[start, stop] - S[stop, start] + S[start, start]

    def rect(self, r0, r1, c0, c1):
        S = self.S
        return S[r1, c1] - S[r0, c1] - S[r1, c0] + S[r0, c0]

    def total(self) -> float:
        return float(self.S[-1, -1])


def integral_table(corr: CorrMatrix) -> IntegralTable:
    C = corr.C if isinstance(corr, CorrMatrix) else np.asarray(corr, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValidationError("correlation matrix must be square")
    p = C.shape[0]
    S = np.zeros((p + 1, p + 1))
    S[1:, 1:] = np.cumsum(np.cumsum(C, axis=0), axis=1) / p**2
    return IntegralTable(S=S)


def riemann_ip(x, b) -> Union[float, np.ndarray]:
    """Left-Riemann inner product ``(1/p) * sum_j x_j b_j`` on a unit domain.

    ``x`` may be a single curve or a ``(n, p)`` stack of curves.
    """
    x = np.asarray(x, dtype=float)
    b = np.asarray(b, dtype=float)
    if b.ndim != 1 or x.shape[-1] != b.size:
        raise ValidationError(f"length mismatch: {x.shape[-1]} vs {b.size}")
    out = x @ b / b.size
    return float(out) if np.ndim(out) == 0 else out


def marginal_covariances(data: Dataset3D) -> Tuple[CorrMatrix, CorrMatrix, CorrMatrix]:
    """Per-axis marginal covariances of a volume under separability.

    ``G_H(h, h') = (1/n) sum_i sum_{v,z} X_i(h,v,z) X_i(h',v,z)`` and likewise
    for the other two axes; each is returned normalized to absolute
    correlation with the raw matrix in ``.cov``.
    """
    ds = data if data.centered else center(data)
    vol = ds.volume()  # (n, Z, V, H)
    n, Z, V, H = vol.shape
    out = []
    for axis, size in ((3, H), (2, V), (1, Z)):
        A = np.moveaxis(vol, axis, -1).reshape(-1, size)
        G = A.T @ A / n
        try:
            out.append(corr_from_cov(G))
        except DegenerateDataError as exc:
            raise DegenerateDataError(f"axis {'HVZ'[3 - axis]}: {exc}") from None
    return tuple(out)
