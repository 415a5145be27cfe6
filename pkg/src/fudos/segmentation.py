"""Sequential correlation-block segmentation (1D) and its cuboid 3D extension.

A segmentation of ``p`` grid points is described by its interior boundaries
``s_1 < ... < s_{L-1}``; segment ``l`` covers indices ``[s_{l-1}, s_l)`` with
``s_0 = 0`` and ``s_L = p``.

Each step adds the single boundary that minimizes

    ( I(0,1) - sum_l I(seg_l) / w_l )**2,     w_l = 100 * len_l / p,

where ``I`` is the block integral of the absolute correlation. The error
path is compared on a range-normalized scale,

    (U_j - U_floor) / (U_0 - U_floor),

with ``U_floor`` the loss of the all-singleton segmentation (the smallest
value the weighted block sum can reach), so that the penalty ``rho * L``
is independent of the overall correlation level and the grid size.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import CorrMatrix, DegenerateDataError, IntegralTable, ValidationError, integral_table

# improvements smaller than this (on the normalized path) count as flat
PATH_TOL = 1e-12


def _weighted_terms(table: IntegralTable, start, stop):
    p = table.p
    start = np.asarray(start)
    stop = np.asarray(stop)
    return table.block(start, stop) / (100.0 * (stop - start) / p)


def _check_boundaries(boundaries, p) -> List[int]:
    b = [int(s) for s in boundaries]
    if any(s <= 0 or s >= p for s in b):
        raise ValidationError(f"boundary outside the grid interior (1..{p - 1}): {b}")
    if any(b2 <= b1 for b1, b2 in zip(b, b[1:])):
        raise ValidationError(f"boundaries must be strictly increasing: {b}")
    return b


def seg_loss(table: IntegralTable, boundaries: Sequence[int] = ()) -> float:
    """Squared approximation error of a segmentation.

    Parameters
    ----------
    table : IntegralTable
        Prefix-sum table of the correlation surface.
    boundaries : sequence of int
        Sorted interior boundaries (grid indices in ``1..p-1``).
    """
    p = table.p
    edges = [0] + _check_boundaries(boundaries, p) + [p]
    weighted = float(np.sum(_weighted_terms(table, edges[:-1], edges[1:])))
    return (table.total() - weighted) ** 2


@dataclass(eq=False)
class SegmentationResult:
    boundaries: List[int]
    p: int
    rho: float
    error_path: List[float]
    penalized_path: List[float]
    loss_path: List[float]
    min_seg: int
    max_seg: Optional[int] = None
    warning: Optional[str] = None

    @property
    def L(self) -> int:
        return len(self.boundaries) + 1

    @property
    def edges(self) -> List[int]:
        return [0] + list(self.boundaries) + [self.p]

    def segments(self) -> List[Tuple[int, int]]:
        e = self.edges
        return list(zip(e[:-1], e[1:]))

    def labels(self) -> np.ndarray:
        return np.searchsorted(np.asarray(self.boundaries, dtype=int), np.arange(self.p), side="right")

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "boundaries": list(self.boundaries),
            "L": self.L,
            "p": self.p,
            "min_seg": self.min_seg,
            "max_seg": self.max_seg,
            "error_path": list(self.error_path),
            "penalized_path": list(self.penalized_path),
            "loss_path": list(self.loss_path),
            "warning": self.warning,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegmentationResult":
        return cls(
            boundaries=[int(b) for b in d["boundaries"]],
            p=int(d["p"]),
            rho=float(d["rho"]),
            error_path=list(d.get("error_path", [])),
            penalized_path=list(d.get("penalized_path", [])),
            loss_path=list(d.get("loss_path", [])),
            min_seg=int(d.get("min_seg", 1)),
            max_seg=d.get("max_seg"),
            warning=d.get("warning"),
        )


def _best_split(table, edges, total, weighted, min_seg, only_longer_than=None):
    """Best single new boundary; returns (loss, s, new_weighted) or None."""
    cand_s, cand_w = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        if b - a < 2 * min_seg:
            continue
        if only_longer_than is not None and b - a <= only_longer_than:
            continue
        s = np.arange(a + min_seg, b - min_seg + 1)
        old = _weighted_terms(table, a, b)
        new = _weighted_terms(table, np.full(s.size, a), s) + _weighted_terms(table, s, np.full(s.size, b))
        cand_s.append(s)
        cand_w.append(weighted - old + new)
    if not cand_s:
        return None
    s = np.concatenate(cand_s)
    w = np.concatenate(cand_w)
    loss = (total - w) ** 2
    lo = loss.min()
    # smallest index among numerical ties
    tied = np.flatnonzero(loss <= lo + 1e-12 * max(lo, 1e-300))
    k = tied[np.argmin(s[tied])]
    return float(loss[k]), int(s[k]), float(w[k])


def segment_1d(
    corr,
    rho: float,
    min_seg: int = 5,
    max_seg: Optional[int] = None,
    max_segments: Optional[int] = None,
) -> SegmentationResult:
    """Greedy penalized segmentation of a 1D correlation surface.

    Parameters
    ----------
    corr : CorrMatrix or IntegralTable
    rho : float
        Penalty per segment on the normalized error path.
    min_seg : int
        Smallest admissible segment, in grid points.
    max_seg : int, optional
        Largest admissible segment. Once the penalized path rises, segments
        longer than this keep being split at their best boundary.
    max_segments : int, optional
        Cap on L; defaults to ``p // min_seg``.
    """
    if rho < 0:
        raise ValidationError(f"rho must be >= 0, got {rho}")
    if min_seg < 2:
        raise ValidationError(f"min_seg must be >= 2, got {min_seg}")
    if max_seg is not None and max_seg < 2 * min_seg - 1:
        raise ValidationError(f"max_seg={max_seg} cannot be reached with min_seg={min_seg}")
    table = corr if isinstance(corr, IntegralTable) else integral_table(corr)
    p = table.p
    if max_segments is None:
        max_segments = max(1, p // min_seg)
    if max_segments < 1:
        raise ValidationError("max_segments must be >= 1")

    total = table.total()
    weighted = float(_weighted_terms(table, 0, p))
    u0 = (total - weighted) ** 2
    # all-singleton segmentation: each term is C[j, j] / (100 p)
    floor_weighted = float(_diag_from_table(table).sum()) / (100.0 * p)
    u_floor = max(total - floor_weighted, 0.0) ** 2
    span = u0 - u_floor

    def normalize(u):
        return (u - u_floor) / span if span > PATH_TOL * max(u0, 1e-300) else 1.0

    edges = [0, p]
    error_path = [normalize(u0)]
    penalized = [error_path[0] + rho]
    losses = [u0]
    warning = None
    if p < 2 * min_seg:
        warning = f"p={p} < 2*min_seg={2 * min_seg}: single segment returned"
        warnings.warn(warning, stacklevel=2)
    else:
        while len(edges) - 1 < max_segments:
            best = _best_split(table, edges, total, weighted, min_seg)
            if best is None:
                break
            u, s, w = best
            L_next = len(edges)
            e = normalize(u)
            if e + rho * L_next >= penalized[-1] - PATH_TOL:
                break
            edges = sorted(edges + [s])
            weighted = w
            losses.append(u)
            error_path.append(e)
            penalized.append(e + rho * L_next)
        if max_seg is not None:
            while len(edges) - 1 < max_segments:
                best = _best_split(table, edges, total, weighted, min_seg, only_longer_than=max_seg)
                if best is None:
                    break
                u, s, w = best
                L_next = len(edges)
                edges = sorted(edges + [s])
                weighted = w
                e = normalize(u)
                losses.append(u)
                error_path.append(e)
                penalized.append(e + rho * L_next)
    return SegmentationResult(
        boundaries=edges[1:-1],
        p=p,
        rho=float(rho),
        error_path=error_path,
        penalized_path=penalized,
        loss_path=losses,
        min_seg=min_seg,
        max_seg=max_seg,
        warning=warning,
    )


def _diag_from_table(table: IntegralTable) -> np.ndarray:
    p = table.p
    j = np.arange(p)
    return table.block(j, j + 1) * p**2


# ---------------------------------------------------------------------------
# 3D
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class CuboidSegments:
    """Cross-product cuboids of three axis segmentations, clipped to a mask.

    ``labels`` maps every voxel (flat layout) to its segment id, ``-1``
    outside the mask. ``cuboids[k]`` is ``((h0, h1), (v0, v1), (z0, z1))``
    with half-open ranges.
    """

    axes: Tuple[SegmentationResult, SegmentationResult, SegmentationResult]
    dims: Tuple[int, int, int]
    labels: np.ndarray
    cuboids: List[Tuple[Tuple[int, int], Tuple[int, int], Tuple[int, int]]]
    n_full: int = 0

    @property
    def L(self) -> int:
        return len(self.cuboids)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "axis_boundaries": [list(a.boundaries) for a in self.axes],
            "rho": [a.rho for a in self.axes],
            "L": self.L,
            "L_full": self.n_full,
            "cuboids": [[list(r) for r in c] for c in self.cuboids],
            "axes": [a.to_dict() for a in self.axes],
        }


def segment_3d(
    marginals: Sequence[CorrMatrix],
    rho: Sequence[float],
    mask: np.ndarray,
    dims: Tuple[int, int, int],
    min_seg=3,
    max_seg=None,
) -> CuboidSegments:
    """Segment each axis separately and intersect the cuboids with ``mask``."""
    min_seg = _per_axis(min_seg)
    max_seg = _per_axis(max_seg)
    rho = _per_axis(rho)
    H, V, Z = dims
    axes = []
    for k, corr in enumerate(marginals):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            axes.append(segment_1d(corr, rho[k], min_seg=min_seg[k], max_seg=max_seg[k]))
    axes = tuple(axes)
    lh, lv, lz = (a.labels() for a in axes)
    Lh, Lv, Lz = (a.L for a in axes)
    full = (lz[:, None, None] * Lv + lv[None, :, None]) * Lh + lh[None, None, :]
    full = full.ravel()
    mask = np.asarray(mask, dtype=bool).ravel()
    used = np.unique(full[mask])
    if used.size == 0:
        raise DegenerateDataError("every cuboid is empty after masking")
    remap = np.full(Lh * Lv * Lz, -1, dtype=int)
    remap[used] = np.arange(used.size)
    labels = np.where(mask, remap[full], -1)
    eh, ev, ez = (a.edges for a in axes)
    cuboids = []
    for c in used:
        ih, rest = c % Lh, c // Lh
        iv, iz = rest % Lv, rest // Lv
        cuboids.append(((eh[ih], eh[ih + 1]), (ev[iv], ev[iv + 1]), (ez[iz], ez[iz + 1])))
    return CuboidSegments(axes=axes, dims=tuple(dims), labels=labels, cuboids=cuboids, n_full=Lh * Lv * Lz)


def _per_axis(value):
    if value is None or np.isscalar(value):
        return (value, value, value)
    value = tuple(value)
    if len(value) != 3:
        raise ValidationError(f"expected one value per axis, got {value}")
    return value
