import math

import numpy as np
import pytest

from fudos.core import ValidationError, riemann_ip, voxel_index
from fudos.simulate import (
    SimSpec,
    ball_geometry,
    beta_1d,
    beta_3d_ball,
    gen_response,
    sim_arma,
    sim_bspline,
    sim_field3d,
    simulate,
    spline_process_basis,
)

# 40-digit evaluations of the bump formulas at t = 50/128 and 94/128
BETA_AT_50 = 1.279530260782335036768404
BETA_AT_94 = 1.914504655360245896477418


# --- coefficient functions ---------------------------------------------------------


def test_beta_1d_values():
    b = beta_1d(128)
    assert b[9] == 0.0
    assert b[49] == pytest.approx(BETA_AT_50, abs=1e-14)
    assert b[93] == pytest.approx(BETA_AT_94, abs=1e-14)
    np.testing.assert_array_equal(np.flatnonzero(b), np.r_[49:56, 93:100])


def test_beta_1d_scales_with_grid():
    b = beta_1d(256)
    assert np.flatnonzero(b).min() == 99 and np.flatnonzero(b).max() == 199


def test_ball_values_at_reference_scale():
    dims = (120, 120, 10)
    b = beta_3d_ball(dims)
    assert b[voxel_index(60, 30, 5, dims)] == 10.0
    assert b[voxel_index(66, 30, 5, dims)] == 0.0
    assert b[voxel_index(65, 30, 5, dims)] == 10.0
    count = 0
    for z in range(10):
        for v in range(120):
            for h in range(120):
                if (h - 60) ** 2 + (v - 30) ** 2 + (z - 5) ** 2 <= 25:
                    count += 1
    assert int((b > 0).sum()) == count


def test_ball_scaled_geometry():
    center, radius = ball_geometry((40, 40, 10))
    assert center == pytest.approx((20.0, 10.0, 5.0))
    assert radius == pytest.approx(5 * (1 / 9) ** (1 / 3))
    assert (beta_3d_ball((40, 40, 10)) > 0).sum() > 0


def test_ball_outside_grid_rejected():
    with pytest.raises(ValidationError):
        beta_3d_ball((10, 10, 10), center=(100.0, 100.0, 100.0), radius=1.0)


# --- curve generators ----------------------------------------------------------------


def test_arma_deterministic():
    np.testing.assert_array_equal(sim_arma(20, 64, seed=3).X, sim_arma(20, 64, seed=3).X)


def test_arma_matches_step_by_step_recurrence():
    n, p, burn = 3, 40, 50
    e = np.random.default_rng(9).standard_normal((n, p + burn))
    X = sim_arma(12, p, seed=9).X[:n]
    for i in range(n):
        x = [0.0] * (p + burn)
        for j in range(p + burn):
            v = e[i, j]
            if j >= 1:
                v += 0.8 * x[j - 1] - 0.1 * e[i, j - 1]
            if j >= 2:
                v += -0.1 * x[j - 2] + 0.9 * e[i, j - 2]
            x[j] = v
        np.testing.assert_allclose(X[i], x[burn:], atol=1e-12)


def test_arma_lag_one_autocorrelation():
    X = sim_arma(1000, 128, seed=0).X
    Xc = X - X.mean(0)
    r = np.mean([np.corrcoef(Xc[:, j], Xc[:, j + 1])[0, 1] for j in range(127)])
    assert r > 0.5


def test_spline_basis_partition_of_unity():
    B = spline_process_basis(128)
    assert np.abs(B.sum(axis=1) - 1).max() < 1e-10


def test_bspline_variance_monte_carlo():
    X = sim_bspline(2000, 64, seed=1).X
    B = spline_process_basis(64)
    expected = 4 * (B**2).sum(axis=1)
    assert np.abs(X.var(axis=0) / expected - 1).max() < 0.1
    np.testing.assert_array_equal(X[:5], sim_bspline(2000, 64, seed=1).X[:5])


def test_generators_reject_short_grids():
    with pytest.raises(ValidationError):
        sim_arma(12, 2)
    with pytest.raises(ValidationError):
        sim_bspline(12, 16)


# --- 3D fields ---------------------------------------------------------------------------


def test_field_without_correlation_is_white():
    X = sim_field3d(500, (4, 3, 2), (0.0, 0.0, 0.0), seed=2).X
    C = np.corrcoef(X.T)
    off = np.abs(C[~np.eye(24, dtype=bool)])
    assert off.mean() < 0.1 and off.max() < 0.2


def test_field_covariance_is_separable():
    dims = (6, 6, 4)
    r = (0.8, 0.5, 0.3)
    X = sim_field3d(20000, dims, r, seed=3).X
    S = np.cov(X.T)

    def ar1(size, rho):
        i = np.arange(size)
        return rho ** np.abs(i[:, None] - i[None, :])

    # (z, v, h) flat layout
    truth = np.kron(ar1(4, 0.3), np.kron(ar1(6, 0.5), ar1(6, 0.8)))
    assert np.abs(S - truth).max() < 0.1


def test_field_deterministic_and_masked():
    mask = np.zeros(24, dtype=bool)
    mask[:10] = True
    a = sim_field3d(12, (4, 3, 2), seed=5, mask=mask)
    np.testing.assert_array_equal(a.X, sim_field3d(12, (4, 3, 2), seed=5, mask=mask).X)
    assert np.all(a.X[:, ~mask] == 0)


def test_field_rejects_bad_correlation():
    with pytest.raises(ValidationError):
        sim_field3d(12, (3, 3, 3), (1.0, 0.5, 0.5))


# --- responses -------------------------------------------------------------------------


def test_infinite_snr_is_noiseless():
    d = sim_arma(50, 128, seed=0)
    b = beta_1d(128)
    np.testing.assert_array_equal(gen_response(d, b, math.inf), riemann_ip(d.X, b))


def test_snr_calibration():
    d = sim_arma(1000, 128, seed=1)
    b = beta_1d(128)
    clean = riemann_ip(d.X, b)
    for snr in (2.5, 5, 10, 20):
        Y = gen_response(d, b, snr, seed=2)
        ratio = np.var(Y - clean) / np.var(clean)
        assert abs(ratio * snr - 1) < 0.15


def test_zero_signal_rejected():
    with pytest.raises(ValidationError):
        gen_response(sim_arma(20, 32, seed=0), np.zeros(32), 10.0)


# --- protocol ----------------------------------------------------------------------


@pytest.mark.parametrize("kw", [{"kind": "gp"}, {"snr": 0}, {"n_test": 5}, {"dims": (0, 3, 3)}, {"mask": "sphere"}])
def test_simspec_validation(kw):
    with pytest.raises(ValidationError):
        SimSpec(**kw)


def test_simulate_splits_and_signal():
    sim = simulate(SimSpec(kind="bspline1d", n=40, n_test=30, p=64, snr=5, seed=4))
    assert sim.train.n == 40 and sim.test.n == 30
    np.testing.assert_allclose(sim.test_signal, riemann_ip(sim.test.X, sim.beta))
    np.testing.assert_array_equal(sim.truth, np.flatnonzero(sim.beta))
    again = simulate(SimSpec(kind="bspline1d", n=40, n_test=30, p=64, snr=5, seed=4))
    np.testing.assert_array_equal(sim.train.Y, again.train.Y)


def test_simulate_3d_with_mask():
    sim = simulate(SimSpec(kind="field3d", n=20, n_test=10, dims=(12, 12, 6), mask="ellipsoid", seed=0))
    assert np.all(sim.beta[~sim.train.mask] == 0)
    assert sim.truth.size > 0
