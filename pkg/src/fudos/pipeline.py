"""Predictive models on stable subdomains, metrics and evaluation protocols."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .clustering import EPS_1D, EPS_3D, MIN_PTS_1D, MIN_PTS_3D, ClusterAssignment, density_cluster
from .core import Dataset1D, Dataset3D, ValidationError, voxel_coords
from .regression import (
    DEFAULT_LAMBDAS,
    PsplineModel,
    PwcModel,
    features,
    fit_pspline,
    fit_pwc,
)
from .simulate import SimSpec, simulate
from .stability import FrequencyMap, StabilityConfig, run_stability, stable_subdomain

PI_LADDER = tuple(round(0.05 + 0.1 * k, 2) for k in range(10))


def cluster_defaults(is_3d: bool):
    return (EPS_3D, MIN_PTS_3D) if is_3d else (EPS_1D, MIN_PTS_1D)


@dataclass(eq=False)
class PredictiveModel:
    """Linear model whose coefficient is flat (zero) off the stable subdomain."""

    pi: float
    points: np.ndarray
    clusters: ClusterAssignment
    fitted: Optional[object]  # PwcModel | PsplineModel | None (intercept only)
    n_points: int
    y_mean: float
    fitter: str = "pwc"

    @property
    def intercept(self) -> float:
        return self.fitted.intercept if self.fitted is not None else self.y_mean

    def beta_on_grid(self) -> np.ndarray:
        if self.fitted is None:
            return np.zeros(self.n_points)
        return self.fitted.beta_on_grid()

    def predict(self, X) -> np.ndarray:
        if isinstance(X, (Dataset1D, Dataset3D)):
            X = X.X
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_points:
            raise ValidationError(f"expected X with {self.n_points} columns, got shape {X.shape}")
        if self.fitted is None:
            return np.full(X.shape[0], self.y_mean)
        return self.fitted.predict(X)

    def to_dict(self) -> dict:
        return {
            "pi": self.pi,
            "fitter": self.fitter,
            "n_points": self.n_points,
            "y_mean": self.y_mean,
            "points": self.points.tolist(),
            "clusters": {
                "labels": self.clusters.labels.tolist(),
                "k": self.clusters.k,
                "eps": self.clusters.eps,
                "min_pts": self.clusters.min_pts,
            },
            "model": None if self.fitted is None else self.fitted.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict, t=None) -> "PredictiveModel":
        cd = d["clusters"]
        clusters = ClusterAssignment(np.asarray(cd["labels"], dtype=int), int(cd["k"]), float(cd["eps"]), int(cd["min_pts"]))
        md = d["model"]
        if md is None:
            fitted = None
        elif md["kind"] == "pwc":
            fitted = PwcModel.from_dict(md)
        else:
            fitted = PsplineModel.from_dict(md, t)
        return cls(
            pi=float(d["pi"]),
            points=np.asarray(d["points"], dtype=int),
            clusters=clusters,
            fitted=fitted,
            n_points=int(d["n_points"]),
            y_mean=float(d["y_mean"]),
            fitter=d.get("fitter", "pwc"),
        )


def point_coords(data, points: np.ndarray) -> np.ndarray:
    """Clustering coordinates in grid-step units."""
    if isinstance(data, Dataset3D):
        return voxel_coords(data.dims)[points]
    return points.astype(float)[:, None]


def build_model(
    data,
    fmap: FrequencyMap,
    pi: float,
    eps: Optional[float] = None,
    min_pts: Optional[int] = None,
    fitter: str = "pwc",
    lambdas=DEFAULT_LAMBDAS,
) -> PredictiveModel:
    """Cluster the stable points and fit one coefficient block per cluster."""
    if data.Y is None:
        raise ValidationError("dataset has no response")
    is_3d = isinstance(data, Dataset3D)
    if fitter not in ("pwc", "pspline"):
        raise ValidationError(f"fitter must be pwc or pspline, got {fitter!r}")
    if fitter == "pspline" and is_3d:
        raise ValidationError("the pspline fitter needs 1D data")
    e0, m0 = cluster_defaults(is_3d)
    eps = e0 if eps is None else eps
    min_pts = m0 if min_pts is None else min_pts
    points = stable_subdomain(fmap, pi).points
    if is_3d:
        points = points[data.mask[points]]
    clusters = density_cluster(point_coords(data, points), eps, min_pts)
    y_mean = float(np.mean(data.Y))
    if points.size == 0:
        return PredictiveModel(pi, points, clusters, None, data.n_points, y_mean, fitter)
    labels = np.full(data.n_points, -1)
    labels[points] = clusters.labels
    subset = list(range(clusters.k))
    if fitter == "pwc":
        fitted = fit_pwc(features(data, labels, subset), data.Y)
    else:
        fitted = fit_pspline(data, labels, subset, lambdas)
    return PredictiveModel(pi, points, clusters, fitted, data.n_points, y_mean, fitter)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _as_set(x) -> set:
    return set(int(i) for i in np.asarray(x, dtype=int).ravel())


def metric_p1(truth, estimate) -> float:
    """Share of the true support that was recovered."""
    t, e = _as_set(truth), _as_set(estimate)
    if not t:
        raise ValidationError("true support is empty")
    return len(t & e) / len(t)


def metric_p2(truth, estimate) -> float:
    """Overlap of true and estimated support relative to their union."""
    t, e = _as_set(truth), _as_set(estimate)
    if not t:
        raise ValidationError("true support is empty")
    return len(t & e) / len(t | e)


def rmse(y, yhat) -> float:
    y, yhat = np.asarray(y, dtype=float), np.asarray(yhat, dtype=float)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def r2(y, yhat) -> float:
    y, yhat = np.asarray(y, dtype=float), np.asarray(yhat, dtype=float)
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0:
        raise ValidationError("response has zero variance")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / sst


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class EvalReport:
    """Per-replicate metrics on a ladder of cut-offs.

    Arrays have shape ``(replicates, len(pis))``; P1 and P2 are NaN when no
    true support is known, R2 when it was not computed.
    """

    pis: List[float]
    p1: np.ndarray
    p2: np.ndarray
    rmse: np.ndarray
    r2: Optional[np.ndarray] = None
    rmse_signal: Optional[np.ndarray] = None
    meta: Dict = field(default_factory=dict)

    def _arrays(self):
        out = {"RMSE": self.rmse, "P1": self.p1, "P2": self.p2}
        if self.r2 is not None:
            out["R2"] = self.r2
        if self.rmse_signal is not None:
            out["RMSE_signal"] = self.rmse_signal
        return out

    def mean(self, metric: str) -> np.ndarray:
        return np.mean(self._arrays()[metric], axis=0)

    def sd(self, metric: str) -> np.ndarray:
        a = self._arrays()[metric]
        return np.std(a, axis=0, ddof=1) if a.shape[0] > 1 else np.zeros(a.shape[1])

    def at(self, metric: str, pi: float) -> float:
        k = int(np.argmin(np.abs(np.asarray(self.pis) - pi)))
        if abs(self.pis[k] - pi) > 1e-9:
            raise ValidationError(f"pi={pi} is not on the report ladder")
        return float(self.mean(metric)[k])

    def to_csv(self) -> str:
        """Rows are metrics (mean, then SD), columns are cut-offs."""
        lines = ["metric," + ",".join(f"pi={p:.2f}" for p in self.pis)]
        for name in self._arrays():
            for stat, vals in (("mean", self.mean(name)), ("sd", self.sd(name))):
                lines.append(f"{name}_{stat}," + ",".join(_fmt(v) for v in vals))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        d = {"pis": list(self.pis), "replicates": int(self.rmse.shape[0]), "meta": self.meta}
        for name, a in self._arrays().items():
            d[name] = {
                "mean": [_num(v) for v in self.mean(name)],
                "sd": [_num(v) for v in self.sd(name)],
                "per_replicate": [[_num(v) for v in row] for row in a],
            }
        return d


def _num(v):
    v = float(v)
    return None if math.isnan(v) else v


def _fmt(v) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def evaluate(models: Sequence[PredictiveModel], test, truth=None, signal=None) -> EvalReport:
    """One-replicate report of models (one per cut-off) on held-out data.

    ``signal`` (noise-free test responses, when known) adds ``RMSE_signal``,
    the prediction error against the true regression function.
    """
    if test.Y is None:
        raise ValidationError("test set has no response")
    models = sorted(models, key=lambda m: m.pi)
    row_rmse, row_p1, row_p2, row_r2, row_sig = [], [], [], [], []
    for m in models:
        pred = m.predict(test.X)
        row_rmse.append(rmse(test.Y, pred))
        if signal is not None:
            row_sig.append(rmse(signal, pred))
        row_r2.append(r2(test.Y, pred))
        if truth is not None and len(truth):
            row_p1.append(metric_p1(truth, m.points))
            row_p2.append(metric_p2(truth, m.points))
        else:
            row_p1.append(np.nan)
            row_p2.append(np.nan)
    return EvalReport(
        pis=[m.pi for m in models],
        p1=np.array([row_p1]),
        p2=np.array([row_p2]),
        rmse=np.array([row_rmse]),
        r2=np.array([row_r2]),
        rmse_signal=np.array([row_sig]) if signal is not None else None,
    )


def combine_reports(reports: Sequence[EvalReport], meta: Optional[dict] = None) -> EvalReport:
    pis = reports[0].pis
    if any(r.pis != pis for r in reports):
        raise ValidationError("reports use different cut-off ladders")
    stack = lambda name: np.vstack([getattr(r, name) for r in reports])  # noqa: E731
    has_r2 = all(r.r2 is not None for r in reports)
    has_sig = all(r.rmse_signal is not None for r in reports)
    return EvalReport(
        pis=list(pis),
        p1=stack("p1"),
        p2=stack("p2"),
        rmse=stack("rmse"),
        r2=stack("r2") if has_r2 else None,
        rmse_signal=stack("rmse_signal") if has_sig else None,
        meta=dict(meta or {}),
    )


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------


def check_splits(n: int, splits) -> None:
    """Every split must be disjoint and the test parts must partition ``0..n-1``."""
    seen = np.zeros(n, dtype=int)
    for train, test in splits:
        train, test = np.asarray(train, dtype=int), np.asarray(test, dtype=int)
        if np.intersect1d(train, test).size:
            raise ValidationError("fold leakage: a sample is in both the training and the test part")
        seen[test] += 1
    if not np.all(seen == 1):
        raise ValidationError("test folds must cover every sample exactly once")


@dataclass(eq=False)
class KFoldResult:
    r2: float
    rmse: float
    predictions: np.ndarray
    n_stable: List[int]


def kfold_predict(
    data,
    folds: int = 10,
    stability: Optional[StabilityConfig] = None,
    pi: float = 0.5,
    fitter: str = "pwc",
    eps: Optional[float] = None,
    min_pts: Optional[int] = None,
    seed: int = 0,
    splits=None,
    on_fold: Optional[Callable] = None,
) -> KFoldResult:
    """Out-of-fold predictions with the whole pipeline refit on each training part.

    ``on_fold(train_idx, test_idx)`` is called before each refit.
    """
    if data.Y is None:
        raise ValidationError("dataset has no response")
    stability = stability or StabilityConfig()
    if splits is None:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF01D]))
        ids = np.empty(data.n, dtype=int)
        ids[rng.permutation(data.n)] = np.arange(data.n) % folds
        splits = [(np.flatnonzero(ids != f), np.flatnonzero(ids == f)) for f in range(folds)]
    check_splits(data.n, splits)
    pred = np.empty(data.n)
    n_stable = []
    for j, (train, test) in enumerate(splits):
        if on_fold is not None:
            on_fold(np.asarray(train), np.asarray(test))
        tr = data.rows(train)
        cfg = replace(stability, master_seed=int(np.random.SeedSequence([stability.master_seed, j]).generate_state(1)[0]))
        fmap = run_stability(tr, cfg)
        model = build_model(tr, fmap, pi, eps, min_pts, fitter, stability.lambdas)
        pred[test] = model.predict(data.X[test])
        n_stable.append(int(model.points.size))
    return KFoldResult(r2=r2(data.Y, pred), rmse=rmse(data.Y, pred), predictions=pred, n_stable=n_stable)


def replicate_seeds(seed: int, replicates: int):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(replicates)]


def run_replicate(
    spec: SimSpec,
    stability: StabilityConfig,
    pis: Sequence[float] = PI_LADDER,
    fitter: str = "pwc",
    eps: Optional[float] = None,
    min_pts: Optional[int] = None,
) -> EvalReport:
    """Simulate, run stability selection, and score a model at every cut-off."""
    sim = simulate(spec)
    fmap = run_stability(sim.train, stability)
    models = [build_model(sim.train, fmap, pi, eps, min_pts, fitter, stability.lambdas) for pi in pis]
    rep = evaluate(models, sim.test, truth=sim.truth, signal=sim.test_signal)
    rep.meta = {"mean_segments": np.mean(fmap.n_segments, axis=0).tolist()}
    return rep


def run_protocol(
    spec: SimSpec,
    stability: StabilityConfig,
    replicates: int,
    pis: Sequence[float] = PI_LADDER,
    fitter: str = "pwc",
    eps: Optional[float] = None,
    min_pts: Optional[int] = None,
    progress: Optional[Callable[[int, EvalReport], None]] = None,
) -> EvalReport:
    """Independent replicates of :func:`run_replicate`, seeded from ``spec.seed``."""
    reports = []
    for r, s in enumerate(replicate_seeds(spec.seed, replicates)):
        rep = run_replicate(
            replace(spec, seed=s),
            replace(stability, master_seed=s),
            pis,
            fitter,
            eps,
            min_pts,
        )
        reports.append(rep)
        if progress is not None:
            progress(r, rep)
    meta = {
        "spec": spec.to_dict(),
        "reps": stability.reps,
        "pairs": [p.to_dict() for p in stability.pairs],
        "fitter": fitter,
        "mean_segments": np.mean([r.meta["mean_segments"] for r in reports], axis=0).tolist(),
    }
    return combine_reports(reports, meta)
