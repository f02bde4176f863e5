from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krylov_rmt.errors import InconsistentMomentError, NotPositiveDefiniteError
from krylov_rmt.measures import VesdSpec
from krylov_rmt.orthopoly import JacobiOperator
from krylov_rmt.predictor import (
    CholeskyBidiagonal,
    HaltingTime,
    PredictionCurve,
    asymptotic_rate,
    cg_prediction,
    chebyshev_bound,
    cholesky_limits,
    error_norm_partial_exact,
    estimate_normal_equation,
    estimate_vesd,
    halting_time,
    inverse_moment_series,
    jacobi_cholesky,
    johnstone_cholesky,
    johnstone_closed_form,
    log_halting_estimate,
    minres_prediction,
    minres_residuals,
    tail_sums,
)
from krylov_rmt.spectrum import Spike, find_bulk_edges, identity_population


def _random_jacobi(rng, n):
    return JacobiOperator(rng.uniform(2.0, 2.5, n), rng.uniform(0.7, 1.0, n - 1))


def _dense_oracle(T, k_max):
    """CG and MINRES norms for ``(T, f_1)`` from dense solves."""
    import mpmath

    A = T.matrix()
    n = A.shape[0]

    def first(mat, k):
        return mpmath.lu_solve(mpmath.matrix(mat), mpmath.matrix([1] + [0] * (k - 1)))

    with mpmath.workdps(40):
        m = first(A, n)[0]
        r, e, mr = [1.0], [float(mpmath.sqrt(m))], [1.0]
        for k in range(1, k_max + 1):
            col = first(A[:k, :k], k)
            # the subtraction cancels, hence the extra digits
            e.append(float(mpmath.sqrt(max(m - col[0], 0))))
            r.append(abs(T.offdiag[k - 1] * float(col[k - 1])) if k < n else 0.0)
    for k in range(1, k_max + 1):
        x, *_ = np.linalg.lstsq(A[:, :k], np.eye(n)[0], rcond=None)
        mr.append(np.linalg.norm(np.eye(n)[0] - A[:, :k] @ x))
    return np.array(r), np.array(e), np.array(mr)


def test_cholesky_two_by_two():
    L = jacobi_cholesky(JacobiOperator([4.0, 4.0], [2.0]))
    np.testing.assert_allclose(L.alpha, [2.0, math.sqrt(3.0)])
    np.testing.assert_allclose(L.beta, [1.0])
    assert L.size == 2
    np.testing.assert_allclose(L.reconstruct(), [[4, 2], [2, 4]])


def test_cholesky_rejects_indefinite():
    with pytest.raises(NotPositiveDefiniteError):
        jacobi_cholesky(JacobiOperator([1.0, 1.0], [2.0]))
    with pytest.raises(NotPositiveDefiniteError):
        jacobi_cholesky(JacobiOperator([1.0], [], tail=(1.0, 0.6)))
    with pytest.raises(NotPositiveDefiniteError):
        CholeskyBidiagonal([1.0, -1.0], [0.5])


@pytest.mark.parametrize("c", [0.1, 0.25, 0.5])
def test_cholesky_limits_mp(c):
    sup = find_bulk_edges(identity_population(c))
    assert cholesky_limits(sup) == pytest.approx((1.0, math.sqrt(c)), abs=1e-12)
    assert asymptotic_rate(sup) == pytest.approx(math.sqrt(c), abs=1e-12)
    # MP Jacobi operator: a_0 = 1, then 1 + c; b = sqrt(c)
    L = jacobi_cholesky(JacobiOperator([1.0], [math.sqrt(c)], tail=(1 + c, math.sqrt(c))))
    alpha, beta = L.coefficients(30)
    np.testing.assert_allclose(alpha, 1.0, atol=1e-14)
    np.testing.assert_allclose(beta, math.sqrt(c), atol=1e-14)
    assert inverse_moment_series(L) == pytest.approx(1 / (1 - c), rel=1e-13)


def test_tail_sum_limit():
    gp, gm = 2.25, 0.25
    a_inf, b_inf = (gp + gm) / 2, (gp - gm) / 4
    L = jacobi_cholesky(JacobiOperator([1.7, 1.1], [0.9, 0.4], tail=(a_inf, b_inf)))
    ts = tail_sums(L, 40)
    assert ts[-1] == pytest.approx(1 / math.sqrt(gp * gm), rel=1e-12)


def test_tail_sums_finite_match_dense():
    rng = np.random.default_rng(3)
    T = _random_jacobi(rng, 12)
    L = jacobi_cholesky(T)
    sums = tail_sums(L, 11)
    for k in range(12):
        # S_k is the trailing Cholesky block
        Sk = L.matrix()[k:, k:]
        ref = np.linalg.solve(Sk @ Sk.T, np.eye(12 - k)[0])[0]
        assert sums[k] == pytest.approx(ref, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 25), seed=st.integers(0, 2**31 - 1))
def test_cg_prediction_matches_dense_oracle(n, seed):
    rng = np.random.default_rng(seed)
    T = _random_jacobi(rng, n)
    L = jacobi_cholesky(T)
    k_max = min(n, 15)
    curve = cg_prediction(L, None, k_max)
    r, e, mr = _dense_oracle(T, k_max)
    np.testing.assert_allclose(curve.r_norm, r, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(curve.e_norm, e, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(curve.minres_r, mr, rtol=1e-8, atol=1e-14)
    np.testing.assert_allclose(minres_prediction(L, k_max), mr, rtol=1e-8, atol=1e-14)


def test_cg_prediction_two_by_two():
    L = jacobi_cholesky(JacobiOperator([2.0, 2.0], [1.0]))
    curve = cg_prediction(L, None, 2)
    assert curve.inv_moment == pytest.approx(2 / 3)
    np.testing.assert_allclose(curve.r_norm, [1.0, 0.5, 0.0])
    assert curve.minres_r[1] == pytest.approx(1 / math.sqrt(5))
    assert curve.asymptotic_rate is None
    assert curve.k_max == 2
    with pytest.raises(ValueError):
        cg_prediction(L, None, 3)


def test_cg_prediction_checks_supplied_moment():
    L = jacobi_cholesky(JacobiOperator([2.0, 2.0], [1.0]))
    cg_prediction(L, 2 / 3 * (1 + 1e-10), 2)
    with pytest.raises(InconsistentMomentError):
        cg_prediction(L, 0.7, 2)


def test_error_routes_agree_exactly():
    rng = np.random.default_rng(11)
    T = _random_jacobi(rng, 50)
    curve = cg_prediction(jacobi_cholesky(T), None, 49)
    exact = error_norm_partial_exact(T)
    np.testing.assert_allclose(curve.e_norm, exact, rtol=1e-12)
    with pytest.raises(ValueError):
        error_norm_partial_exact(T.attach_tail((2.2, 0.8)))


def test_minres_residuals_formula():
    r = np.array([1.0, 0.5, 0.25])
    expect = 1 / np.sqrt(np.cumsum(1 / r**2))
    np.testing.assert_allclose(minres_residuals(r), expect)
    assert minres_residuals([1.0, 0.0])[1] == 0.0


@pytest.mark.parametrize("ell,c", [(15.0, 0.3), (3.0, 0.1), (8.0, 0.5)])
def test_johnstone_closed_form_matches_factor(ell, c):
    L = johnstone_cholesky(ell, c)
    curve = cg_prediction(L, None, 12)
    r, e = johnstone_closed_form(ell, c, np.arange(13))
    np.testing.assert_allclose(curve.r_norm, r, rtol=1e-13)
    np.testing.assert_allclose(curve.e_norm, e, rtol=1e-12)
    assert curve.inv_moment == pytest.approx(1 / ((1 + ell) * (1 - c)), rel=1e-13)


def test_johnstone_estimate_matches_closed_form():
    spec = identity_population(0.3).with_spikes([Spike(0, 15.0)])
    est = estimate_vesd(VesdSpec.spike_direction(spec), 12)
    r, e = johnstone_closed_form(15.0, 0.3, np.arange(13))
    np.testing.assert_allclose(est.curve.r_norm, r, rtol=1e-9)
    np.testing.assert_allclose(est.curve.e_norm, e, rtol=1e-9)
    assert est.jacobi.diag[0] == pytest.approx(16.0, rel=1e-10)
    assert est.outliers.locations == pytest.approx([16.32])


def test_identity_estimate():
    c = 0.3
    est = estimate_vesd(VesdSpec.isotropic(identity_population(c)), 20)
    np.testing.assert_allclose(est.curve.r_norm, c ** (np.arange(21) / 2), rtol=1e-10)
    assert est.curve.inv_moment == pytest.approx(1 / (1 - c), rel=1e-10)
    assert est.inv_moment_contour == pytest.approx(1 / (1 - c), rel=1e-10)
    assert est.curve.asymptotic_rate == pytest.approx(0.5477225575, abs=1e-10)


def test_normal_equation_estimate_identity():
    c = 0.5
    est = estimate_normal_equation(identity_population(c), 10)
    assert est.w == pytest.approx(c)
    # ||Y a||^2 -> w and ||e_0||_W^2 -> w * m with m = bulk_mass / w
    assert est.curve.r_norm[0] == pytest.approx(math.sqrt(c))
    assert est.curve.e_norm[0] == pytest.approx(math.sqrt(c), rel=1e-9)
    assert np.all(np.diff(est.curve.r_norm) < 0)
    with_spikes = estimate_normal_equation(identity_population(c).with_spikes([Spike(0, 15.0)]), 10)
    np.testing.assert_allclose(with_spikes.curve.r_norm, est.curve.r_norm)


def _curve(values):
    v = np.asarray(values, float)
    return PredictionCurve(v, v, v, np.full(v.size, np.nan), 1.0)


def test_halting_time_basic_and_ties():
    tr, te = halting_time(_curve([1.0, 0.1, 1e-3, 1e-5]), 1e-4)
    assert tr.index == 3 and not tr.tie
    tie = halting_time(_curve([1.0, 1e-2, 1e-4, 1e-6]), 1e-4)[0]
    assert tie.tie and tie.candidates == (2, 3)
    sat = halting_time(_curve([1.0, 0.5]), 1e-4)[0]
    assert sat.saturated and sat.index is None and sat.candidates == ()
    with pytest.raises(ValueError):
        halting_time(_curve([1.0]), 0.0)
    assert HaltingTime(1e-4, 5).candidates == (5,)


def test_identity_halting_time():
    est = estimate_vesd(VesdSpec.isotropic(identity_population(0.3)), 30)
    tau_r, tau_e = est.curve.halting(1e-4)
    # 0.3^{k/2} < 1e-4 first at k = 16
    assert tau_r.index == 16
    assert tau_e.index >= tau_r.index
    assert log_halting_estimate(math.sqrt(0.3), 1e-4) == 16


def test_chebyshev_bound():
    b = chebyshev_bound(0.25, 2.25, [0, 1, 2])
    np.testing.assert_allclose(b, 2 * 0.5 ** np.array([0, 1, 2]))
    with pytest.raises(ValueError):
        chebyshev_bound(1.0, 1.0, 1)


def test_chebyshev_bound_dominates_error():
    # CG error in the W-norm relative to ||e_0||_W is below the Chebyshev bound
    est = estimate_vesd(VesdSpec.isotropic(identity_population(0.3)), 20)
    sup = est.support
    rel = est.curve.e_norm / est.curve.e_norm[0]
    assert np.all(rel <= chebyshev_bound(sup.gamma_minus, sup.gamma_plus, np.arange(21)) + 1e-15)


def _simplenormal(L, w, m, k_max):
    # w (m - alpha_0^{-2} sum_l prod_j beta_{j-1}^2 / alpha_j^2)
    alpha, beta = L.coefficients(k_max + 1)
    terms = [1 / alpha[0] ** 2]
    for j in range(1, k_max):
        terms.append(terms[-1] * beta[j - 1] ** 2 / alpha[j] ** 2)
    partial = np.concatenate([[0.0], np.cumsum(terms)])
    return w * (m - partial)


def test_normal_equation_error_matches_closed_sum_identity():
    est = estimate_normal_equation(identity_population(0.4), 12)
    # for Sigma = I the normalized measure has unit inverse moment
    assert est.curve.inv_moment == pytest.approx(1.0, rel=1e-10)
    ref = _simplenormal(est.cholesky, est.w, 1.0, 12)
    # m - partial cancels, so the agreement is absolute
    np.testing.assert_allclose(est.curve.e_norm**2, ref, rtol=0, atol=1e-10)


def test_normal_equation_error_matches_closed_sum_general():
    from krylov_rmt.spectrum import uniform_population

    est = estimate_normal_equation(uniform_population(1, 3, 0.5), 12)
    ref = _simplenormal(est.cholesky, est.w, est.curve.inv_moment, 12)
    # m - partial cancels, so the agreement is absolute
    np.testing.assert_allclose(est.curve.e_norm**2, ref, rtol=0, atol=1e-10)


def _worked_examples():
    from krylov_rmt.spectrum import ar1_population, mp_population, uniform_population

    johnstone = identity_population(0.3).with_spikes([Spike(0, 15.0)])
    return {
        "identity": VesdSpec.isotropic(identity_population(0.3)),
        "uniform": VesdSpec.isotropic(uniform_population(1, 3, 0.5)),
        "product_mp": VesdSpec.isotropic(mp_population(0.5, 0.5)),
        "ar1": VesdSpec.isotropic(ar1_population(0.4, 0.5)),
        "johnstone": VesdSpec.spike_direction(johnstone),
    }


@pytest.fixture(scope="module")
def worked_estimates():
    return {name: estimate_vesd(v, 30) for name, v in _worked_examples().items()}


@pytest.mark.parametrize("name", ["identity", "uniform", "product_mp", "ar1", "johnstone"])
def test_error_formulas_agree_on_worked_examples(worked_estimates, name):
    est = worked_estimates[name]
    # the partial-sum form cancels, so it runs in extended precision on a long section
    exact = error_norm_partial_exact(est.jacobi.truncated(400), 30)
    np.testing.assert_allclose(est.curve.e_norm, exact, rtol=1e-10)


@pytest.mark.parametrize("name", ["identity", "uniform", "product_mp", "ar1"])
def test_rate_reaches_limit(worked_estimates, name):
    curve = worked_estimates[name].curve
    assert abs(curve.rate[30] - curve.asymptotic_rate) < 1e-6


def test_supercritical_spike_is_transient(worked_estimates):
    spiked = worked_estimates["johnstone"].curve.rate
    plain = worked_estimates["identity"].curve.rate
    assert abs(spiked[1] - plain[1]) > 0.1
    np.testing.assert_array_less(np.abs(spiked[15:] - plain[15:]), 1e-3)


@pytest.mark.parametrize("name", ["identity", "uniform", "product_mp", "ar1", "johnstone"])
def test_factorization_round_trip(worked_estimates, name):
    est = worked_estimates[name]
    n = 40
    a, b = est.jacobi.coefficients(n)
    T = np.diag(a) + np.diag(b, 1) + np.diag(b, -1)
    alpha, beta = est.cholesky.coefficients(n)
    # bidiagonal with alpha on the diagonal and beta below; drop the last row's coupling
    L = np.diag(alpha) + np.diag(beta[: n - 1], -1)
    np.testing.assert_allclose(L @ L.T, T, atol=1e-12 * np.abs(T).max())
