"""Command-line experiment runner.

Subcommands ``predict``, ``simulate``, ``universality`` and ``normal-eq``
read a YAML config, write CSV curves and a JSON sidecar into ``--out`` and
exit with 0 on success, 2 when ``--assert`` checks fail and 3 on regime
errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.stats import ks_2samp

from .errors import ContourError, UnsupportedRegimeError
from .predictor import Estimate, estimate_normal_equation, estimate_vesd, log_halting_estimate
from .simulate import EntryDistribution, SampleModel, lambda_max, run_cg, run_minres, sample_matrix

__all__ = [
    "ExperimentConfig",
    "load_config",
    "predict_model",
    "run_trials",
    "cmd_predict",
    "cmd_simulate",
    "cmd_universality",
    "cmd_normal_equation",
    "main",
]

log = logging.getLogger("krylov_rmt")

EXIT_OK, EXIT_ASSERT, EXIT_REGIME = 0, 2, 3

PREDICT_COLUMNS = ("k", "r_pred", "e_pred", "rate", "minres_r_pred")
CURVE_COLUMNS = (
    "k",
    "r_pred",
    "e_pred",
    "minres_r_pred",
    "r_emp_mean",
    "r_emp_p5",
    "r_emp_p95",
    "e_emp_mean",
    "e_emp_p5",
    "e_emp_p95",
)

_TOP_KEYS = {
    "model",
    "distribution",
    "distributions",
    "trials",
    "k_max",
    "epsilon",
    "base_seed",
    "band",
    "check_k",
    "universality_k",
    "minres",
    "outputs",
}
_MODEL_KEYS = {"n", "m", "sigma", "params", "spikes", "rhs", "rhs_params", "allow_wide"}
_DIST_KEYS = {"kind", "values", "probs"}
_OUTPUT_KEYS = {"traces"}


@dataclass(frozen=True)
class ExperimentConfig:
    """Parsed experiment description.

    ``band`` is the concentration constant ``C`` in ``C / sqrt(M)``;
    ``check_k`` the last iteration included in the band checks.
    """

    model: SampleModel
    distribution: EntryDistribution = EntryDistribution()
    distributions: tuple[EntryDistribution, ...] = ()
    trials: int = 100
    k_max: int = 20
    epsilon: tuple[float, ...] = (1e-4,)
    base_seed: int = 0
    band: float = 5.0
    check_k: int = 12
    universality_k: tuple[int, ...] = (3,)
    minres: bool = False
    traces: bool = False
    raw: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if any(not 0 < e < 1 for e in self.epsilon):
            raise ValueError("epsilon values must lie in (0, 1)")
        if self.k_max < 1:
            raise ValueError("k_max must be positive")


def _reject_unknown(section: dict, allowed: set[str], where: str) -> None:
    extra = set(section) - allowed
    if extra:
        raise ValueError(f"unknown key(s) in {where}: {sorted(extra)}")


def _distribution(raw: dict) -> EntryDistribution:
    _reject_unknown(raw, _DIST_KEYS, "distribution")
    return EntryDistribution(
        raw.get("kind", "gaussian"),
        tuple(float(v) for v in raw.get("values", ())),
        tuple(float(p) for p in raw.get("probs", ())),
    )


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a config mapping; unknown keys are errors."""
    if not isinstance(raw, dict) or "model" not in raw:
        raise ValueError("config needs a 'model' section")
    _reject_unknown(raw, _TOP_KEYS, "config")
    mraw = dict(raw["model"])
    _reject_unknown(mraw, _MODEL_KEYS, "model")
    if "rhs_params" in mraw and "coeffs" in mraw["rhs_params"]:
        mraw["rhs_params"] = dict(mraw["rhs_params"])
        mraw["rhs_params"]["coeffs"] = {int(k): float(v) for k, v in mraw["rhs_params"]["coeffs"].items()}
    model = SampleModel(
        int(mraw["n"]),
        int(mraw["m"]),
        mraw.get("sigma", "identity"),
        mraw.get("params", {}),
        tuple(tuple(s) for s in mraw.get("spikes", ())),
        mraw.get("rhs", "uniform"),
        mraw.get("rhs_params", {}),
        bool(mraw.get("allow_wide", False)),
    )
    outputs = raw.get("outputs", {}) or {}
    _reject_unknown(outputs, _OUTPUT_KEYS, "outputs")
    eps = raw.get("epsilon", [1e-4])
    eps = [eps] if np.isscalar(eps) else eps
    uk = raw.get("universality_k", [3])
    uk = [uk] if np.isscalar(uk) else uk
    return ExperimentConfig(
        model=model,
        distribution=_distribution(raw.get("distribution", {}) or {}),
        distributions=tuple(_distribution(d) for d in raw.get("distributions", ())),
        trials=int(raw.get("trials", 100)),
        k_max=int(raw.get("k_max", 20)),
        epsilon=tuple(float(e) for e in eps),
        base_seed=int(raw.get("base_seed", 0)),
        band=float(raw.get("band", 5.0)),
        check_k=int(raw.get("check_k", 12)),
        universality_k=tuple(int(k) for k in uk),
        minres=bool(raw.get("minres", False)),
        traces=bool(outputs.get("traces", False)),
        raw=raw,
    )


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(yaml.safe_load(fh))


def predict_model(model: SampleModel, k_max: int) -> Estimate:
    """Deterministic prediction for the limiting version of ``model``."""
    if model.rhs == "normal_equation":
        return estimate_normal_equation(model.population().without_spikes(), k_max)
    return estimate_vesd(model.vesd(), k_max)


def _sidecar(est: Estimate, epsilons) -> dict:
    curve = est.curve
    halting = {}
    for eps in epsilons:
        tr, te = curve.halting(eps)
        halting[repr(eps)] = {
            "tau_r": tr.index,
            "tau_e": te.index,
            "tie_r": tr.tie,
            "tie_e": te.tie,
            "log_estimate": log_halting_estimate(curve.asymptotic_rate, eps),
        }
    return {
        "gamma_minus": est.support.gamma_minus,
        "gamma_plus": est.support.gamma_plus,
        "rate_J": curve.asymptotic_rate,
        "outliers": [o.location for o in est.outliers.supercritical],
        "w": est.w,
        "inv_moment": curve.inv_moment,
        "halting": halting,
    }


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _trial(args) -> dict:
    """One seeded trial; module-level so that worker processes can run it."""
    model, dist, seed, k_max, minres, want_errors = args
    sample = sample_matrix(model, dist, seed)
    trace = run_cg(sample.W, sample.b, k_max, errors=want_errors, error_method="residual")
    out = {
        "seed": seed,
        "residual": _pad(trace.residual, k_max),
        "error": _pad(trace.error, k_max) if want_errors else None,
        "lambda_max": lambda_max(sample.W),
    }
    if minres:
        out["minres"] = _pad(run_minres(sample.W, sample.b, k_max).residual, k_max)
    return out


def _pad(values, k_max: int) -> np.ndarray:
    out = np.zeros(k_max + 1)
    out[: min(values.size, k_max + 1)] = values[: k_max + 1]
    return out


def run_trials(
    model: SampleModel,
    dist: EntryDistribution,
    seeds,
    k_max: int,
    *,
    workers: int | None = None,
    minres: bool = False,
    errors: bool = True,
) -> list[dict]:
    """Run seeded CG trials, merged in seed order whatever the worker count."""
    jobs = [(model, dist, int(s), k_max, minres, errors) for s in seeds]
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or len(jobs) == 1:
        return [_trial(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_trial, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def _halting_index(curve: np.ndarray, eps: float) -> int | None:
    below = np.flatnonzero(curve < eps)
    return int(below[0]) if below.size else None


def comparison_report(
    est: Estimate, results: list[dict], cfg: ExperimentConfig
) -> tuple[list[list], dict]:
    """Curve rows and summary statistics of empirical versus predicted norms."""
    k_max = cfg.k_max
    m = cfg.model.m
    curve = est.curve
    r = np.array([res["residual"] for res in results])
    e = np.array([res["error"] for res in results]) if results[0]["error"] is not None else None
    rows = []
    for k in range(k_max + 1):
        row = [k, curve.r_norm[k], curve.e_norm[k], curve.minres_r[k]]
        row += [r[:, k].mean(), np.percentile(r[:, k], 5), np.percentile(r[:, k], 95)]
        if e is not None:
            row += [e[:, k].mean(), np.percentile(e[:, k], 5), np.percentile(e[:, k], 95)]
        else:
            row += [math.nan] * 3
        rows.append(row)
    kc = min(cfg.check_k, k_max)
    dev = np.abs(r[:, : kc + 1] - curve.r_norm[: kc + 1]).max(axis=1) * math.sqrt(m)
    summary = {
        "trials": len(results),
        "max_scaled_deviation": dev.tolist(),
        "max_scaled_deviation_per_k": (np.abs(r - curve.r_norm).max(axis=0) * math.sqrt(m)).tolist(),
        "fraction_within_band": float(np.mean(dev <= cfg.band)),
        "band": cfg.band,
        "check_k": kc,
        "lambda_max": [res["lambda_max"] for res in results],
        "halting_histogram": {},
    }
    for eps in cfg.epsilon:
        tau = curve.halting(eps)[0].index
        hits = [_halting_index(res["residual"], eps) for res in results]
        hist: dict[str, int] = {}
        for h in hits:
            key = "none" if h is None else str(h)
            hist[key] = hist.get(key, 0) + 1
        mass = sum(1 for h in hits if tau is not None and h in (tau, tau + 1)) / len(hits)
        summary["halting_histogram"][repr(eps)] = {
            "tau_r": tau,
            "counts": hist,
            "mass_on_tau_tau1": mass,
        }
    return rows, summary


def cmd_predict(cfg: ExperimentConfig, out: Path) -> tuple[dict, bool]:
    est = predict_model(cfg.model, cfg.k_max)
    c = est.curve
    rows = [[k, c.r_norm[k], c.e_norm[k], c.rate[k], c.minres_r[k]] for k in range(cfg.k_max + 1)]
    _write_csv(out / "prediction.csv", PREDICT_COLUMNS, rows)
    side = _sidecar(est, cfg.epsilon)
    _write_json(out / "prediction.json", side)
    ok = bool(np.all(np.diff(c.e_norm) <= 0) and np.all(np.diff(c.minres_r) <= 0))
    return side, ok


def _seeds(cfg: ExperimentConfig, offset: int = 0) -> range:
    start = cfg.base_seed + offset
    return range(start, start + cfg.trials)


def cmd_simulate(cfg: ExperimentConfig, out: Path, workers: int | None) -> tuple[dict, bool]:
    est = predict_model(cfg.model, cfg.k_max)
    results = run_trials(
        cfg.model, cfg.distribution, _seeds(cfg), cfg.k_max, workers=workers, minres=cfg.minres
    )
    rows, summary = comparison_report(est, results, cfg)
    _write_csv(out / "curves.csv", CURVE_COLUMNS, rows)
    if cfg.traces:
        _write_csv(
            out / "traces.csv",
            ("seed", "k", "residual", "error"),
            [
                [res["seed"], k, res["residual"][k], res["error"][k]]
                for res in results
                for k in range(cfg.k_max + 1)
            ],
        )
    side = _sidecar(est, cfg.epsilon)
    side["report"] = summary
    _write_json(out / "simulation.json", side)
    ok = summary["fraction_within_band"] >= 0.95 and all(
        h["mass_on_tau_tau1"] >= 0.9 for h in summary["halting_histogram"].values()
    )
    return side, ok


def ks_threshold(n: int, m: int, alpha: float = 0.01) -> float:
    """Asymptotic two-sample KS critical value at level ``alpha``."""
    c = math.sqrt(-0.5 * math.log(alpha / 2))
    return c * math.sqrt((n + m) / (n * m))


def cmd_universality(cfg: ExperimentConfig, out: Path, workers: int | None) -> tuple[dict, bool]:
    """KS distances of ``sqrt(M) (||r_k|| - r_k(L))`` between entry laws.

    The first distribution is the reference. Every other one is compared
    with it on the same seed schedule, and the reference is compared
    with itself on a disjoint schedule as a control.
    """
    dists = cfg.distributions or (cfg.distribution, EntryDistribution("three_point"))
    if cfg.trials < 100:
        log.warning("universality with fewer than 100 trials has little power")
    k_top = max(cfg.universality_k)
    est = predict_model(cfg.model, k_top)
    scale = math.sqrt(cfg.model.m)

    def fluct(dist, offset):
        res = run_trials(cfg.model, dist, _seeds(cfg, offset), k_top, workers=workers, errors=False)
        r = np.array([x["residual"] for x in res])
        return {k: scale * (r[:, k] - est.curve.r_norm[k]) for k in cfg.universality_k}

    ref = fluct(dists[0], 0)
    control = fluct(dists[0], cfg.trials)
    thresh = ks_threshold(cfg.trials, cfg.trials)
    comparisons = []
    rows = []
    for label, dist, sample in [("control", dists[0], control)] + [
        (d.kind, d, None) for d in dists[1:]
    ]:
        sample = sample if sample is not None else fluct(dist, 0)
        for k in cfg.universality_k:
            stat = ks_2samp(ref[k], sample[k])
            fourth = dist.standardized_moments()[3]
            entry = {
                "against": label,
                "k": k,
                "ks": float(stat.statistic),
                "p_value": float(stat.pvalue),
                "fourth_moment": fourth,
                "matched": abs(fourth - 3.0) < 1e-9 and abs(dist.standardized_moments()[2]) < 1e-9,
            }
            comparisons.append(entry)
            qs = np.percentile(sample[k], [5, 25, 50, 75, 95])
            rows.append([label, k, entry["ks"], *qs])
    _write_csv(
        out / "universality.csv",
        ("against", "k", "ks", "q05", "q25", "q50", "q75", "q95"),
        rows,
    )
    side = {"reference": dists[0].kind, "threshold": thresh, "comparisons": comparisons}
    _write_json(out / "universality.json", side)
    ok = all(c["ks"] < thresh for c in comparisons if c["matched"] or c["against"] == "control")
    return side, ok


def cmd_normal_equation(cfg: ExperimentConfig, out: Path, workers: int | None) -> tuple[dict, bool]:
    """Spiked and spike-free normal equations on shared ``X`` and ``a``."""
    if cfg.model.rhs != "normal_equation":
        raise ValueError("normal-eq needs rhs: normal_equation")
    est = predict_model(cfg.model, cfg.k_max)
    seeds = _seeds(cfg)
    spiked = run_trials(cfg.model, cfg.distribution, seeds, cfg.k_max, workers=workers)
    plain = run_trials(cfg.model.without_spikes(), cfg.distribution, seeds, cfg.k_max, workers=workers)
    rs = np.array([x["residual"] for x in spiked])
    rp = np.array([x["residual"] for x in plain])
    es = np.array([x["error"] for x in spiked])
    ep = np.array([x["error"] for x in plain])
    band = cfg.band / math.sqrt(cfg.model.m)
    kc = min(cfg.check_k, cfg.k_max)
    diff_r = np.abs(rs - rp)[:, : kc + 1]
    diff_e = np.abs(es - ep)[:, : kc + 1]
    curve = est.curve
    rows = []
    for k in range(cfg.k_max + 1):
        rows.append(
            [
                k,
                curve.r_norm[k],
                curve.e_norm[k],
                rs[:, k].mean(),
                rp[:, k].mean(),
                np.abs(rs[:, k] - rp[:, k]).max(),
                es[:, k].mean(),
                ep[:, k].mean(),
                np.abs(es[:, k] - ep[:, k]).max(),
            ]
        )
    _write_csv(
        out / "normal_equation.csv",
        ("k", "r_pred", "e_pred", "r_spiked_mean", "r_plain_mean", "r_max_diff",
         "e_spiked_mean", "e_plain_mean", "e_max_diff"),
        rows,
    )
    side = _sidecar(est, cfg.epsilon)
    mean_dev = np.abs(rs.mean(axis=0) - curve.r_norm)[: kc + 1]
    side["report"] = {
        "band": band,
        "max_residual_difference": float(diff_r.max()),
        "max_error_difference": float(diff_e.max()),
        "max_mean_deviation": float(mean_dev.max()),
        "check_k": kc,
    }
    _write_json(out / "normal_equation.json", side)
    ok = diff_r.max() <= band and mean_dev.max() <= band
    return side, ok


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="krylov-rmt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("predict", "simulate", "universality", "normal-eq"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path, default=Path("."))
        p.add_argument("--seed", type=int, default=None, help="override base_seed")
        p.add_argument("--trials", type=int, default=None, help="override trials")
        p.add_argument("--assert", dest="check", action="store_true", help="exit 2 on failed checks")
        p.add_argument("--workers", type=int, default=None, help="worker processes (default: cores)")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None or args.trials is not None:
            raw = dict(cfg.raw)
            if args.seed is not None:
                raw["base_seed"] = args.seed
            if args.trials is not None:
                raw["trials"] = args.trials
            cfg = parse_config(raw)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "predict":
            _, ok = cmd_predict(cfg, args.out)
        elif args.command == "simulate":
            _, ok = cmd_simulate(cfg, args.out, args.workers)
        elif args.command == "universality":
            _, ok = cmd_universality(cfg, args.out, args.workers)
        else:
            _, ok = cmd_normal_equation(cfg, args.out, args.workers)
    except (UnsupportedRegimeError, ContourError) as exc:
        log.error("regime error: %s", exc)
        return EXIT_REGIME
    if args.check and not ok:
        log.error("assertion checks failed")
        return EXIT_ASSERT
    log.info("%s finished; outputs in %s", args.command, args.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
