"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

from __future__ import annotations

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import linregress

from krylov_rmt.cli import cmd_universality, load_config, parse_config, predict_model, run_trials
from krylov_rmt.measures import VesdSpec, discretize_vesd, moments_contour, spiked_moments_residue
from krylov_rmt.orthopoly import (
    JacobiOperator,
    asymptotic_jacobi,
    hankel_recurrence,
    hankel_system,
    recurrence_from_discretized,
)
from krylov_rmt.predictor import (
    cg_prediction,
    error_norm_partial_exact,
    inverse_moment_series,
    jacobi_cholesky,
    johnstone_closed_form,
    log_halting_estimate,
    minres_prediction,
    tail_sums,
)
from krylov_rmt.simulate import EntryDistribution, lambda_max, run_cg, run_minres, sample_matrix
from krylov_rmt.spectrum import (
    Spike,
    ar1_population,
    find_bulk_edges,
    identity_population,
    mp_population,
    product_mp_edges,
    uniform_population,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
WORKERS = os.cpu_count() or 1


def _report(capsys, n: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def _johnstone(c=0.3, d=15.0):
    return identity_population(c).with_spikes([Spike(0, d)])


def _per_trial_rate(r, k_lo, k_hi):
    ratios = r[:, k_lo : k_hi + 1] / r[:, k_lo - 1 : k_hi]
    return float(np.median(ratios))


@pytest.fixture(scope="module")
def identity_runs():
    cfg = load_config(CONFIGS / "identity_c03.yaml")
    est = predict_model(cfg.model, cfg.k_max)
    seeds = range(cfg.base_seed, cfg.base_seed + cfg.trials)
    res = run_trials(cfg.model, cfg.distribution, seeds, cfg.k_max, workers=WORKERS, errors=False)
    return cfg, est, np.array([x["residual"] for x in res])


@pytest.fixture(scope="module")
def johnstone_runs():
    cfg = load_config(CONFIGS / "johnstone.yaml")
    dist = EntryDistribution()
    lam, r, e, quad = [], [], [], []
    for seed in range(cfg.base_seed, cfg.base_seed + cfg.trials):
        s = sample_matrix(cfg.model, dist, seed)
        tr = run_cg(s.W, s.b, cfg.k_max, error_method="residual")
        lam.append(lambda_max(s.W))
        r.append(tr.residual)
        e.append(tr.error)
        quad.append(float(s.b @ s.W @ s.b))
    return cfg, np.array(lam), np.array(r), np.array(e), np.array(quad)


def test_criterion_01_identity_edges(capsys):
    t0 = time.perf_counter()
    sup = find_bulk_edges(identity_population(0.25))
    dt = time.perf_counter() - t0
    err = max(abs(sup.gamma_minus - 0.25), abs(sup.gamma_plus - 2.25))
    ok = err <= 1e-10 and dt < 1.0
    _report(capsys, 1, ok, f"gamma = ({sup.gamma_minus:.12f}, {sup.gamma_plus:.12f}), err {err:.1e}, {dt:.3f} s")


def test_criterion_02_product_mp_edges(capsys):
    t0 = time.perf_counter()
    sup = find_bulk_edges(mp_population(0.5, 0.5))
    dt = time.perf_counter() - t0
    lo, hi = product_mp_edges(0.5)
    err = max(abs(sup.gamma_minus - lo), abs(sup.gamma_plus - hi))
    # reference values printed to five decimals
    ref_ok = abs(hi - 4.40915) <= 5e-6 and abs(lo - 0.02835) <= 5e-6
    ok = err <= 1e-8 and ref_ok and dt < 1.0
    _report(
        capsys, 2, ok,
        f"numeric ({sup.gamma_minus:.8f}, {sup.gamma_plus:.8f}) vs closed form ({lo:.8f}, {hi:.8f}), "
        f"err {err:.1e}, {dt:.3f} s",
    )


def test_criterion_03_section_examples(capsys):
    t0 = time.perf_counter()
    u = find_bulk_edges(uniform_population(1.0, 3.0, 0.5))
    a = find_bulk_edges(ar1_population(0.4, 0.5))
    dt = time.perf_counter() - t0
    u_ok = abs(u.gamma_minus - 0.15) <= 0.05 and abs(u.gamma_plus - 6.4) <= 0.05
    a_ok = abs(a.gamma_minus - 0.086) <= 0.005 and abs(a.gamma_plus - 4.385) <= 0.005
    ok = u_ok and a_ok and dt < 5.0
    _report(
        capsys, 3, ok,
        f"uniform ({u.gamma_minus:.4f}, {u.gamma_plus:.4f}) {'ok' if u_ok else 'off'}; "
        f"AR(1) ({a.gamma_minus:.4f}, {a.gamma_plus:.4f}) vs (0.086, 4.385) {'ok' if a_ok else 'off'}; {dt:.2f} s",
    )


def test_criterion_04_recurrence_asymptotics(capsys):
    t0 = time.perf_counter()
    n = np.arange(5, 26)
    mp_spec = identity_population(0.25)
    mp_sup = find_bulk_edges(mp_spec)
    T = recurrence_from_discretized(discretize_vesd(VesdSpec.isotropic(mp_spec), 400, support=mp_sup), 40)
    a_inf, b_inf = asymptotic_jacobi(mp_sup)
    a_err, b_err = abs(T.diag[29] - 1.25), abs(T.offdiag[28] - 0.5)
    # MP itself sits on its limit from n = 1, so its deviations are round-off
    mp_floor = float(np.abs(T.diag[1:] - a_inf).max())
    fits = {}
    for name, spec in [("product-MP", mp_population(0.5, 0.5)), ("AR(1)", ar1_population(0.4, 0.5))]:
        sup = find_bulk_edges(spec)
        Ts = recurrence_from_discretized(discretize_vesd(VesdSpec.isotropic(spec), 400, support=sup), 30)
        dev = np.abs(Ts.diag - asymptotic_jacobi(sup)[0])
        fit = linregress(n, np.log(dev[n]))
        fits[name] = (fit.slope, fit.rvalue**2)
    dt = time.perf_counter() - t0
    fit_ok = all(s < 0 and r2 > 0.9 for s, r2 in fits.values())
    ok = a_err <= 1e-6 and b_err <= 1e-6 and mp_floor <= 1e-13 and fit_ok and dt < 5.0
    detail = ", ".join(f"{k} slope {s:.3f} R2 {r2:.3f}" for k, (s, r2) in fits.items())
    _report(
        capsys, 4, ok,
        f"|a_29 - 1.25| = {a_err:.1e}, |b_28 - 0.5| = {b_err:.1e}, MP deviation floor {mp_floor:.1e}; "
        f"{detail}; {dt:.2f} s",
    )


def test_criterion_05_dual_recurrence_routes(capsys):
    worst = {}
    for name, vesd in [
        ("MP", VesdSpec.isotropic(identity_population(0.25))),
        ("Johnstone", VesdSpec.spike_direction(_johnstone())),
    ]:
        table = moments_contour(vesd, 0, 12, dps=50)
        a_h, b_h = hankel_recurrence(hankel_system(table, 6), 6)
        T = recurrence_from_discretized(discretize_vesd(vesd, 400), 8)
        worst[name] = max(np.abs(a_h - T.diag[:6]).max(), np.abs(b_h - T.offdiag[:6]).max())
    ok = all(v <= 1e-8 for v in worst.values())
    _report(capsys, 5, ok, ", ".join(f"{k} max diff {v:.1e}" for k, v in worst.items()))


def test_criterion_06_cholesky_limits(capsys):
    spec = identity_population(0.25)
    sup = find_bulk_edges(spec)
    T = recurrence_from_discretized(discretize_vesd(VesdSpec.isotropic(spec), 400, support=sup), 60)
    L = jacobi_cholesky(T.attach_tail(asymptotic_jacobi(sup)))
    alpha, beta = L.coefficients(80)
    da = float(np.abs(alpha[40:] - 1.0).max())
    db = float(np.abs(beta[40:] - 0.5).max())
    ok = da <= 1e-6 and db <= 1e-6
    _report(capsys, 6, ok, f"max_k>=40 |alpha_k - 1| = {da:.1e}, |beta_k - 0.5| = {db:.1e}")


def test_criterion_07_inverse_moment_identities(capsys):
    rng = np.random.default_rng(7)
    worst = 0.0
    for n in (5, 20, 50):
        T = JacobiOperator(rng.uniform(2.0, 3.0, n), rng.uniform(0.5, 1.0, n - 1))
        direct = np.linalg.solve(T.matrix(), np.eye(n)[0])[0]
        worst = max(worst, abs(inverse_moment_series(jacobi_cholesky(T)) - direct) / direct)
    spec = identity_population(0.25)
    sup = find_bulk_edges(spec)
    T = recurrence_from_discretized(discretize_vesd(VesdSpec.isotropic(spec), 400, support=sup), 60)
    tails = tail_sums(jacobi_cholesky(T.attach_tail(asymptotic_jacobi(sup))), 60)
    target = 1 / math.sqrt(sup.gamma_minus * sup.gamma_plus)
    tail_err = abs(tails[60] - target)
    ok = worst <= 1e-10 and tail_err <= 1e-6
    _report(
        capsys, 7, ok,
        f"finite series vs solve rel err {worst:.1e}; tail sum {tails[60]:.10f} vs {target:.10f} (err {tail_err:.1e})",
    )


def test_criterion_08_finite_deterministic_exactness(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    n = 50
    worst = dict(cg=0.0, minres=0.0, e_tail=0.0, e_partial=0.0)

    def rel(x, y):
        return float(np.max(np.abs(x - y) / np.abs(y)))

    for _ in range(20):
        T = JacobiOperator(rng.uniform(2.0, 2.5, n), rng.uniform(0.7, 1.0, n - 1))
        W, f1 = T.matrix(), np.eye(n)[0]
        L = jacobi_cholesky(T)
        curve = cg_prediction(L, None, n - 1)
        cg = run_cg(W, f1, n - 1, error_method="residual")
        mr = run_minres(W, f1, n - 1)
        k = cg.residual.size
        worst["cg"] = max(worst["cg"], rel(cg.residual, curve.r_norm[:k]))
        worst["minres"] = max(worst["minres"], rel(mr.residual, minres_prediction(L, n - 1)[: mr.residual.size]))
        worst["e_tail"] = max(worst["e_tail"], rel(curve.e_norm[:k], cg.error))
        worst["e_partial"] = max(worst["e_partial"], rel(error_norm_partial_exact(T, k - 1), cg.error))
    dt = time.perf_counter() - t0
    ok = all(v <= 1e-8 for v in worst.values()) and dt < 10.0
    _report(capsys, 8, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {dt:.2f} s")


@pytest.mark.slow
def test_criterion_09_concentration(capsys, identity_runs):
    cfg, est, r = identity_runs
    band = 5 / math.sqrt(cfg.model.m)
    dev = np.abs(r[:, :13] - est.curve.r_norm[:13]).max(axis=1)
    frac = float(np.mean(dev <= band))
    ok = frac >= 0.95
    _report(
        capsys, 9, ok,
        f"{frac:.3f} of {len(r)} trials within 5/sqrt(M) = {band:.4f} for k <= 12 "
        f"(max scaled deviation {dev.max() * math.sqrt(cfg.model.m):.2f})",
    )


@pytest.mark.slow
def test_criterion_10_rate(capsys, identity_runs):
    _, est, r = identity_runs
    rate = _per_trial_rate(r, 4, 10)
    ok = abs(rate - 0.5477) <= 0.02
    _report(capsys, 10, ok, f"median ratio over k = 4..10 is {rate:.4f}; J = {est.curve.asymptotic_rate:.4f}")


@pytest.mark.slow
def test_criterion_11_spike_location(capsys, johnstone_runs):
    cfg, lam, *_ = johnstone_runs
    frac = float(np.mean(np.abs(lam - 16.32) <= 0.15))
    ok = frac >= 0.9
    _report(
        capsys, 11, ok,
        f"{frac:.2f} of {lam.size} trials within 16.32 +- 0.15; mean {lam.mean():.4f}, sd {lam.std(ddof=1):.4f}",
    )


@pytest.mark.slow
def test_criterion_12_spike_transience(capsys):
    cfg = load_config(CONFIGS / "figure1_spiked.yaml")
    seeds = range(cfg.base_seed, cfg.base_seed + cfg.trials)
    res = run_trials(cfg.model, cfg.distribution, seeds, cfg.k_max, workers=WORKERS, errors=False)
    r = np.array([x["residual"] for x in res])
    spiked_rate = _per_trial_rate(r, 8, 14)
    J = predict_model(cfg.model.without_spikes(), 5).curve.asymptotic_rate
    ok = abs(spiked_rate - J) <= 0.03
    _report(capsys, 12, ok, f"spiked empirical rate over k = 8..14 is {spiked_rate:.4f}; non-spiked J = {J:.4f}")


@pytest.mark.slow
def test_criterion_13_halting_time(capsys, identity_runs):
    _, est, r = identity_runs
    eps = 1e-4
    tau = est.curve.halting(eps)[0].index
    log_est = log_halting_estimate(est.curve.asymptotic_rate, eps)
    hits = [int(np.flatnonzero(row < eps)[0]) if np.any(row < eps) else -1 for row in r]
    counts = {k: hits.count(k) for k in sorted(set(hits))}
    mass = float(np.mean([h in (tau, tau + 1) for h in hits]))
    ok = mass >= 0.9 and log_est == 16
    _report(
        capsys, 13, ok,
        f"tau_r = {tau}, log estimate {log_est}, histogram {counts}, mass on (tau, tau + 1) = {mass:.3f}",
    )


@pytest.mark.slow
def test_criterion_14_johnstone_closed_form(capsys, johnstone_runs):
    cfg, _, r, e, _ = johnstone_runs
    ks = np.arange(9)
    r_cf, e_cf = johnstone_closed_form(15.0, 0.3, ks)
    band = 5 / math.sqrt(cfg.model.m)
    dr = np.abs(r[:, :9].mean(axis=0) - r_cf).max()
    de = np.abs(e[:, :9].mean(axis=0) - e_cf).max()
    ok = dr <= band and de <= band
    _report(capsys, 14, ok, f"max_k<=8 |mean - closed form|: residual {dr:.2e}, error {de:.2e}; band {band:.4f}")


@pytest.mark.slow
def test_criterion_15_normal_equations(capsys):
    cfg = load_config(CONFIGS / "normal_eq.yaml")
    seeds = range(cfg.base_seed, cfg.base_seed + cfg.trials)
    spiked = run_trials(cfg.model, cfg.distribution, seeds, cfg.k_max, workers=WORKERS, errors=False)
    plain = run_trials(cfg.model.without_spikes(), cfg.distribution, seeds, cfg.k_max, workers=WORKERS, errors=False)
    rs = np.array([x["residual"] for x in spiked])
    rp = np.array([x["residual"] for x in plain])
    est = predict_model(cfg.model, cfg.k_max)
    band = 5 / math.sqrt(cfg.model.m)
    paired = float(np.abs(rs - rp).max())
    mean_dev = float(np.abs(rp.mean(axis=0) - est.curve.r_norm).max())
    mean_dev_spiked = float(np.abs(rs.mean(axis=0) - est.curve.r_norm).max())
    ok = paired <= band and mean_dev <= band and mean_dev_spiked <= band
    _report(
        capsys, 15, ok,
        f"max paired |spiked - plain| {paired:.2e}; prediction vs means {mean_dev:.2e} (plain), "
        f"{mean_dev_spiked:.2e} (spiked); band {band:.4f}",
    )


@pytest.mark.slow
def test_criterion_16_universality(capsys, tmp_path):
    raw = dict(load_config(CONFIGS / "universality.yaml").raw)
    raw["distributions"] = [{"kind": "gaussian"}, {"kind": "three_point"}]
    side, ok = cmd_universality(parse_config(raw), tmp_path, WORKERS)
    parts = [f"{c['against']} KS {c['ks']:.4f}" for c in side["comparisons"]]
    ok = ok and abs(side["threshold"] - 0.103) <= 1e-3
    _report(capsys, 16, ok, ", ".join(parts) + f"; threshold {side['threshold']:.4f}")


@pytest.mark.slow
def test_criterion_17_spiked_moment_routes(capsys, johnstone_runs):
    cfg, *_, quad = johnstone_runs
    vesd = VesdSpec.spike_direction(_johnstone())
    a = moments_contour(vesd, 0, 2)
    b_printed = spiked_moments_residue(vesd, 2)
    b_plus = spiked_moments_residue(vesd, 2, sign=1.0)
    band = 5 / math.sqrt(cfg.model.m)
    mass_ok = abs(a[0] - 1.0) <= 1e-8
    mc_ok = abs(a[1] - quad.mean()) <= band and abs(a[1] - 16.0) <= 1e-8
    ok = mass_ok and mc_ok
    _report(
        capsys, 17, ok,
        f"route A m0 = {a[0]:.12f}, m1 = {a[1]:.10f}, Monte-Carlo m1 = {quad.mean():.4f}; "
        f"route B m0/m1 = {b_printed[0]:.4f}/{b_printed[1]:.4f} (printed sign), "
        f"{b_plus[0]:.4f}/{b_plus[1]:.4f} (plus sign); discrepancy reported only",
    )
