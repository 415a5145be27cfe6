"""Density-based clustering of stable grid points.

Core points (at least ``min_pts`` neighbours within ``eps``, counting the
point itself) are joined when within ``eps`` of each other. A border point
joins the cluster of its nearest core point. Points with no core point in
reach are not discarded: they are grouped by ``eps``-connectivity among
themselves, so isolated points become singleton clusters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .core import ValidationError

EPS_3D, MIN_PTS_3D = 2.0, 3
EPS_1D, MIN_PTS_1D = 2.0, 2


@dataclass(eq=False)
class ClusterAssignment:
    labels: np.ndarray
    k: int
    eps: float
    min_pts: int

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.labels == j)

    def to_rows(self, points: np.ndarray, coords: np.ndarray):
        """``(point index, *coords, cluster id)`` rows for CSV output."""
        return [
            [int(p), *[int(c) for c in np.atleast_1d(xy)], int(lab)]
            for p, xy, lab in zip(points, coords, self.labels)
        ]


def _components(n: int, pairs: np.ndarray) -> np.ndarray:
    if pairs.size == 0:
        return np.arange(n)
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    return connected_components(g, directed=False)[1]


def _canonical(raw: np.ndarray) -> Tuple[np.ndarray, int]:
    """Relabel so cluster ids follow the order of each cluster's smallest member."""
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(first)
    remap = np.empty(raw.max() + 1, dtype=int)
    remap[np.unique(raw)[order]] = np.arange(order.size)
    return remap[raw], order.size


def density_cluster(points, eps: float = EPS_3D, min_pts: int = MIN_PTS_3D) -> ClusterAssignment:
    """Cluster coordinates (``(n,)`` or ``(n, d)``) under Euclidean distance."""
    if not eps > 0:
        raise ValidationError(f"eps must be > 0, got {eps}")
    if min_pts < 1:
        raise ValidationError(f"min_pts must be >= 1, got {min_pts}")
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if n == 0:
        return ClusterAssignment(np.zeros(0, dtype=int), 0, eps, min_pts)
    tree = cKDTree(X)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    degree = np.bincount(pairs.ravel(), minlength=n) + 1
    core = degree >= min_pts
    labels = np.full(n, -1)

    core_idx = np.flatnonzero(core)
    if core_idx.size:
        both = core[pairs[:, 0]] & core[pairs[:, 1]] if pairs.size else np.zeros(0, bool)
        comp = _components(n, pairs[both]) if pairs.size else np.arange(n)
        labels[core] = comp[core]
        # border points: nearest core point within eps, ties to the lowest index
        for i in np.flatnonzero(~core):
            nb = [j for j in tree.query_ball_point(X[i], eps) if core[j]]
            if nb:
                nb = np.array(sorted(nb))
                d = np.linalg.norm(X[nb] - X[i], axis=1)
                labels[i] = labels[nb[np.argmin(d)]]

    noise = np.flatnonzero(labels < 0)
    if noise.size:
        if pairs.size:
            keep = (labels[pairs[:, 0]] < 0) & (labels[pairs[:, 1]] < 0)
            sub = pairs[keep]
            local = np.full(n, -1)
            local[noise] = np.arange(noise.size)
            comp = _components(noise.size, local[sub])
        else:
            comp = np.arange(noise.size)
        labels[noise] = n + comp
    labels, k = _canonical(labels)
    return ClusterAssignment(labels, k, float(eps), int(min_pts))
