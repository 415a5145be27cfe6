from itertools import chain, combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fudos.core import Dataset1D, Dataset3D, ValidationError
from fudos.regression import features
from fudos.selection import (
    CVEvaluator,
    SelectionConfig,
    SelectionTrace,
    cv_error,
    default_q,
    greedy_search,
    make_folds,
    select_subset,
)
from fudos.simulate import sim_arma


def labels_from_edges(edges):
    lab = np.empty(edges[-1], dtype=int)
    for k, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        lab[a:b] = k
    return lab


def two_segment_problem(n=100, seed=0, noise=0.0):
    d = sim_arma(n, 60, seed=seed)
    lab = labels_from_edges(list(range(0, 61, 6)))
    F = features(d, lab, range(10)).F
    Y = 2 * F[:, 3] - 1.5 * F[:, 7]
    if noise:
        Y = Y + noise * Y.std() * np.random.default_rng(seed + 1).standard_normal(n)
    return Dataset1D(d.X, Y=Y, grid=d.grid), lab


def fold_loop_oracle(X, Y, lab, subset, fold_ids):
    p = X.shape[1]
    F = np.column_stack([X[:, lab == k].sum(axis=1) / p for k in subset])
    errs = []
    for f in np.unique(fold_ids):
        te, tr = fold_ids == f, fold_ids != f
        A = np.column_stack([np.ones(tr.sum()), F[tr]])
        b = np.linalg.lstsq(A, Y[tr], rcond=None)[0]
        pred = b[0] + F[te] @ b[1:]
        errs.append(np.mean((Y[te] - pred) ** 2))
    return float(np.mean(errs))


# --- config / folds --------------------------------------------------------------------


@pytest.mark.parametrize("kw", [{"c": 1.0}, {"c": -0.1}, {"q": 0.5}, {"folds": 1}, {"fitter": "knn"}])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        SelectionConfig(**kw)


def test_folds_balanced_and_seeded():
    ids = make_folds(23, 5, 0)
    assert sorted(np.bincount(ids)) == [4, 4, 5, 5, 5]
    np.testing.assert_array_equal(ids, make_folds(23, 5, 0))


def test_default_q():
    assert default_q("1d", 128, 20) == 64
    assert default_q("3d", 16000, 300) == 150


# --- cv_error --------------------------------------------------------------------------


def test_cv_error_exact_fit_near_zero():
    d, lab = two_segment_problem()
    F = features(d, lab, [4]).F[:, 0]
    exact = Dataset1D(d.X, Y=3 * F + 1, grid=d.grid)
    assert cv_error(exact, lab, [4], seed=0) < 1e-8 * np.var(exact.Y)


def test_cv_error_matches_fold_loop_oracle():
    d, lab = two_segment_problem(noise=0.3)
    ids = make_folds(d.n, 5, 3)
    for subset in ([3], [1, 7], [0, 3, 7, 9]):
        got = cv_error(d, lab, subset, fold_ids=ids)
        assert got == pytest.approx(fold_loop_oracle(d.X, d.Y, lab, subset, ids), rel=1e-10)


def test_cv_error_invariant_to_sample_order():
    d, lab = two_segment_problem(noise=0.3)
    ids = make_folds(d.n, 5, 4)
    perm = np.random.default_rng(0).permutation(d.n)
    shuffled = Dataset1D(d.X[perm], Y=d.Y[perm], grid=d.grid)
    a = cv_error(d, lab, [3, 7], fold_ids=ids)
    b = cv_error(shuffled, lab, [3, 7], fold_ids=ids[perm])
    assert abs(a - b) < 1e-12 * max(1.0, a)


def test_vectorized_singletons_match_general_path():
    d, lab = two_segment_problem(noise=0.5)
    ev = CVEvaluator(d.X, d.Y, lab, make_folds(d.n, 5, 1))
    np.testing.assert_allclose(ev.singletons(), [ev([k]) for k in range(10)], rtol=1e-10)


def test_small_fold_rejected():
    d, lab = two_segment_problem(n=12)
    with pytest.raises(ValidationError, match="fewer than 2"):
        cv_error(d, lab, [0], fold_ids=np.r_[np.zeros(11, int), 1])


def test_pspline_cv_runs_and_is_finite():
    d, lab = two_segment_problem(noise=0.2)
    v = cv_error(d, lab, [3, 7], fitter="pspline", seed=0)
    assert np.isfinite(v) and v > 0


# --- greedy search ---------------------------------------------------------------------


def test_single_segment():
    d, _ = two_segment_problem()
    tr = select_subset(d, np.zeros(60, dtype=int))
    assert tr.selected == (0,) and len(tr.steps) == 1


def test_c_near_one_returns_best_singleton():
    d, lab = two_segment_problem(noise=0.5)
    tr = select_subset(d, lab, SelectionConfig(c=0.999))
    assert tr.stop_step == 1
    assert tr.selected == tr.steps[0].best and len(tr.selected) == 1


def test_recovers_true_pair_and_agrees_with_exhaustive_search():
    d, lab = two_segment_problem(seed=5)
    ids = make_folds(d.n, 5, 0)
    tr = select_subset(d, lab, SelectionConfig(c=0.01, q=30), fold_ids=ids)
    assert tr.selected == (3, 7)
    ev = CVEvaluator(d.X, d.Y, lab, ids)
    subsets = chain.from_iterable(combinations(range(10), r) for r in range(1, 11))
    scored = [(ev(s), len(s), s) for s in subsets]
    best = min(scored)
    tol = 1e-10 * np.var(d.Y)
    # smallest subset among the exact-fit ties
    oracle = min((s for v, _, s in scored if v <= best[0] + tol), key=lambda s: (len(s), s))
    assert tr.selected == oracle


def check_trace(tr, ev):
    """Everything a trace claims, re-derived from the trace itself."""
    seen = set()
    for k, step in enumerate(tr.steps):
        assert step.cv_star == min(step.cv)
        assert list(step.cv) == sorted(step.cv)
        for s in step.subsets:
            assert s not in seen
            seen.add(s)
        if k:
            top = tr.steps[k - 1].subsets[: tr.m]
            unions = {tuple(sorted(set(a) | set(b))) for a, b in combinations(top, 2)}
            assert set(step.subsets) <= unions
    path = tr.cv_star_path
    K = None
    for j in range(len(path) - 1):
        if path[j] <= 1e-12 * np.var(ev.Y) or (path[j] - path[j + 1]) / path[j] <= tr.c:
            K = j + 1
            break
    if K is not None:
        assert tr.stop_step == K and tr.stop_reason == "threshold"
    else:
        assert tr.stop_step == len(path)
    assert tr.selected == tr.steps[tr.stop_step - 1].best


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.01, 0.1]), st.sampled_from([None, 4.0, 100.0]))
def test_trace_invariants(seed, c, q):
    d, lab = two_segment_problem(n=60, seed=seed, noise=1.0)
    ev = CVEvaluator(d.X, d.Y, lab, make_folds(d.n, 5, seed))
    tr = greedy_search(ev, c, q if q is not None else 30.0)
    check_trace(tr, ev)
    # no subset evaluated twice
    assert ev.n_evaluations == sum(len(s.subsets) for s in tr.steps)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 7))
def test_exhaustive_m_step_two_is_best_pair(seed, L):
    d = sim_arma(50, 6 * L, seed=seed)
    lab = labels_from_edges(list(range(0, 6 * L + 1, 6)))
    Y = np.random.default_rng(seed).standard_normal(50)
    ev = CVEvaluator(d.X, Y, lab, make_folds(50, 5, seed))
    tr = greedy_search(ev, 0.0, float(L * L))
    pairs = list(combinations(range(L), 2))
    best = min(pairs, key=lambda s: (ev(s), s))
    assert tr.steps[1].best == best


def test_trace_roundtrip():
    d, lab = two_segment_problem(noise=0.5)
    tr = select_subset(d, lab)
    back = SelectionTrace.from_dict(tr.to_dict())
    assert back.to_dict() == tr.to_dict()


def test_pspline_selection_on_1d_only():
    X = np.random.default_rng(0).standard_normal((20, 8))
    d = Dataset3D(X, dims=(2, 2, 2), Y=X[:, 0])
    with pytest.raises(ValidationError):
        select_subset(d, np.zeros(8, dtype=int), SelectionConfig(fitter="pspline"))


def test_missing_response_rejected():
    d = sim_arma(20, 30, seed=0)
    with pytest.raises(ValidationError):
        select_subset(d, np.zeros(30, dtype=int))
