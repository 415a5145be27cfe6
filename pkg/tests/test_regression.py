import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fudos.core import Dataset1D, Dataset3D, ValidationError
from fudos.regression import (
    DEFAULT_LAMBDAS,
    GRAM_JITTER,
    PsplineModel,
    PwcModel,
    features,
    fit_pspline,
    fit_pwc,
    gcv_path,
    predict,
    spline_block,
    spline_design,
)
from fudos.simulate import sim_arma, sim_bspline


def labels_from_edges(edges):
    lab = np.empty(edges[-1], dtype=int)
    for k, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        lab[a:b] = k
    return lab


# --- features --------------------------------------------------------------------


def test_constant_curve_feature():
    lab = labels_from_edges([0, 10, 100])
    d = Dataset1D(np.ones((12, 100)))
    f = features(d, lab, [0])
    np.testing.assert_allclose(f.F, 0.1)
    assert f.sizes == [10]


def test_features_additive_over_union():
    d = sim_arma(30, 60, seed=0)
    lab = np.zeros(60, dtype=int)
    lab[20:40] = 1
    lab[40:] = 2
    F = features(d, lab, [0, 2]).F
    merged = np.where(lab == 2, 0, lab)
    np.testing.assert_allclose(F.sum(axis=1), features(d, merged, [0]).F[:, 0], atol=1e-12)


def test_features_match_naive_loop():
    d = sim_arma(15, 40, seed=2)
    lab = labels_from_edges([0, 7, 19, 33, 40])
    F = features(d, lab, [3, 1]).F
    for i in range(d.n):
        for col, k in enumerate([3, 1]):
            s = 0.0
            for j in range(40):
                if lab[j] == k:
                    s += d.X[i, j]
            assert abs(F[i, col] - s / 40) < 1e-12


def test_features_3d_scaling():
    dims = (4, 3, 2)
    X = np.ones((12, 24))
    d = Dataset3D(X, dims=dims)
    lab = np.zeros(24, dtype=int)
    lab[:6] = 1
    np.testing.assert_allclose(features(d, lab, [1]).F, 6 / 24)


def test_features_errors():
    d = sim_arma(12, 20, seed=0)
    lab = labels_from_edges([0, 10, 20])
    with pytest.raises(ValidationError):
        features(d, lab, [])
    with pytest.raises(ValidationError):
        features(d, lab, [2])


# --- fit_pwc -------------------------------------------------------------------------


def test_pwc_exact_linear_recovery():
    rng = np.random.default_rng(0)
    F = rng.standard_normal((50, 1))
    m = fit_pwc(F, 2 * F[:, 0] + 3)
    assert m.coefs[0] == pytest.approx(2.0, abs=1e-9)
    assert m.intercept == pytest.approx(3.0, abs=1e-9)
    assert np.abs(m.predict_features(F) - (2 * F[:, 0] + 3)).max() < 1e-9


def test_pwc_orthogonal_response():
    F = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    Y = np.array([1.0, 1.0, 3.0, 3.0])
    m = fit_pwc(F, Y)
    assert abs(m.coefs[0]) < 1e-12
    assert m.intercept == pytest.approx(2.0)


def test_pwc_matches_normal_equations():
    rng = np.random.default_rng(1)
    F = rng.standard_normal((200, 5))
    Y = F @ rng.standard_normal(5) + 0.5 + rng.standard_normal(200)
    A = np.hstack([np.ones((200, 1)), F])
    b = np.linalg.solve(A.T @ A, A.T @ Y)
    m = fit_pwc(F, Y)
    assert abs(m.intercept - b[0]) < 1e-8
    np.testing.assert_allclose(m.coefs, b[1:], atol=1e-8)


def test_pwc_rank_deficient_min_norm():
    rng = np.random.default_rng(2)
    f = rng.standard_normal(30)
    F = np.column_stack([f, f])
    m = fit_pwc(F, 4 * f)
    np.testing.assert_allclose(m.coefs, [2.0, 2.0], atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 6), st.integers(8, 40))
def test_pwc_residual_orthogonality(seed, k, n):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((n, k))
    Y = rng.standard_normal(n) * 5 + 1
    m = fit_pwc(F, Y)
    r = Y - m.predict_features(F)
    tol = 1e-8 * np.linalg.norm(Y)
    assert abs(r.sum()) < tol
    assert np.abs(F.T @ r).max() < tol * max(1.0, np.abs(F).max())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 5))
def test_adding_a_column_never_increases_rss(seed, k):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((25, k + 1))
    Y = rng.standard_normal(25)
    small = fit_pwc(F[:, :k], Y)
    big = fit_pwc(F, Y)
    rss_small = np.sum((Y - small.predict_features(F[:, :k])) ** 2)
    rss_big = np.sum((Y - big.predict_features(F)) ** 2)
    assert rss_big <= rss_small + 1e-10 * max(1.0, rss_small)


def test_pwc_model_beta_and_predict():
    d = sim_arma(40, 30, seed=3)
    lab = labels_from_edges([0, 10, 20, 30])
    f = features(d, lab, [0, 2])
    Y = f.F @ [1.5, -2.0] + 0.25
    m = fit_pwc(f, Y)
    beta = m.beta_on_grid()
    assert np.all(beta[10:20] == 0)
    np.testing.assert_allclose(predict(m, d), Y, atol=1e-9)
    # recomputation oracle on fresh rows
    new = sim_arma(20, 30, seed=4)
    Fn = features(new, lab, [0, 2]).F
    np.testing.assert_allclose(m.predict(new.X), m.intercept + Fn @ m.coefs, atol=1e-12)
    back = PwcModel.from_dict(m.to_dict())
    np.testing.assert_array_equal(back.predict(new.X), m.predict(new.X))


def test_zero_coefficient_model_predicts_intercept():
    m = PwcModel(intercept=1.25, n_points=5, coefs=np.zeros(1), subset=[0], members=[np.arange(5)])
    np.testing.assert_array_equal(m.predict(np.random.default_rng(0).standard_normal((4, 5))), 1.25)


def test_predict_dimension_mismatch():
    m = PwcModel(intercept=0.0, n_points=5, coefs=np.zeros(1), subset=[0], members=[np.arange(5)])
    with pytest.raises(ValidationError):
        m.predict(np.zeros((3, 6)))


# --- penalized splines ----------------------------------------------------------------


def brute_force_gcv(Z, y, P, lambdas):
    """Explicit hat matrices, same scale conventions as the fitter."""
    n = y.size
    Zc = Z - Z.mean(0)
    G = Zc.T @ Zc
    k = G.shape[0]
    delta = GRAM_JITTER * np.trace(G) / k
    s = np.trace(G) / np.trace(P) if np.trace(P) > 0 else 1.0
    yc = y - y.mean()
    out = []
    for lam in lambdas:
        H = Zc @ np.linalg.solve(G + delta * np.eye(k) + lam * s * P, Zc.T) + np.ones((n, n)) / n
        res = y - y.mean() - (H - np.ones((n, n)) / n) @ yc
        tr = np.trace(H)
        out.append(n * (res @ res) / (n - tr) ** 2)
    return np.array(out)


def test_gcv_matches_brute_force():
    d = sim_bspline(60, 48, seed=5)
    lab = labels_from_edges([0, 16, 32, 48])
    blocks = [spline_block(d.grid.points, np.flatnonzero(lab == k)) for k in (0, 2)]
    Z, P = spline_design(d.X, blocks, 48)
    rng = np.random.default_rng(0)
    y = Z @ rng.standard_normal(Z.shape[1]) + 0.1 * rng.standard_normal(60)
    lambdas = np.logspace(-6, 4, 12)
    gp = gcv_path(Z, y, P, lambdas)
    oracle = brute_force_gcv(Z, y, P, lambdas)
    np.testing.assert_allclose(gp.gcv, oracle, rtol=1e-6)
    assert gp.best == int(np.argmin(oracle))
    m = fit_pspline(Dataset1D(d.X, Y=y, grid=d.grid), lab, [0, 2], lambdas)
    assert m.lam == lambdas[int(np.argmin(oracle))]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_trace_monotone_in_lambda(seed):
    rng = np.random.default_rng(seed)
    t = np.arange(1, 33) / 32
    blk = spline_block(t, np.arange(32))
    X = rng.standard_normal((40, 32)).cumsum(axis=1)
    Z, P = spline_design(X, [blk], 32)
    gp = gcv_path(Z, rng.standard_normal(40), P, DEFAULT_LAMBDAS)
    assert np.all(np.diff(gp.edf) <= 1e-9)


def test_large_lambda_recovers_linear_beta():
    d = sim_bspline(200, 40, seed=7)
    t = d.grid.points
    beta = 1.0 + 2.0 * t
    Y = d.X @ beta / 40
    lab = np.zeros(40, dtype=int)
    m = fit_pspline(Dataset1D(d.X, Y=Y, grid=d.grid), lab, [0], lambda_grid=[1e4])
    assert np.abs(m.beta_on_grid() - beta).max() < 1e-3


def test_linear_relation_selects_large_smoothing():
    d = sim_bspline(150, 40, seed=8)
    t = d.grid.points
    Y = d.X @ (0.5 + t) / 40
    Y = Y + 0.05 * Y.std() * np.random.default_rng(1).standard_normal(150)
    m = fit_pspline(Dataset1D(d.X, Y=Y, grid=d.grid), np.zeros(40, dtype=int), [0])
    assert m.lam >= 1.0


def test_pspline_zero_off_selection_and_fallback():
    d = sim_bspline(50, 30, seed=9)
    lab = labels_from_edges([0, 3, 20, 30])
    Y = d.X[:, 5:15].mean(axis=1)
    m = fit_pspline(Dataset1D(d.X, Y=Y, grid=d.grid), lab, [0, 1])
    beta = m.beta_on_grid()
    assert np.all(beta[20:] == 0.0)
    assert m.fallback_segments == [0]
    assert m.lam > 0


def test_pspline_roundtrip():
    d = sim_bspline(40, 32, seed=10)
    lab = labels_from_edges([0, 12, 32])
    Y = d.X[:, :12].mean(axis=1)
    m = fit_pspline(Dataset1D(d.X, Y=Y, grid=d.grid), lab, [0])
    back = PsplineModel.from_dict(m.to_dict(), d.grid.points)
    np.testing.assert_allclose(back.predict(d.X), m.predict(d.X), atol=1e-12)


def test_pspline_requires_1d():
    d = Dataset3D(np.random.default_rng(0).standard_normal((12, 8)), dims=(2, 2, 2), Y=np.zeros(12))
    with pytest.raises(ValidationError):
        fit_pspline(d, np.zeros(8, dtype=int), [0])
