"""Named experiments. Each returns an ``Outcome`` mapping file names to their text."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .actions import (
    CauchyError,
    HyperbolicAction,
    convergence_report,
    limit_tree,
    rescaled_family,
)
from .config import ConfigError, ExperimentConfig, check_r
from .groups import ConvergenceError, rescaling_factor, word_from_str, word_to_str
from .schottky import (
    ElementaryMeasureError,
    SchottkyCertificate,
    SearchExhausted,
    brute_check,
    certify_family,
    probe_words,
    search,
)
from .walk import (
    EntropyCapError,
    WalkConfig,
    check_distance_increase,
    estimate_dimension,
    estimate_drift,
    estimate_entropy,
    estimate_tail,
    simulate,
)

ESTIMATOR_ERRORS = (ArithmeticError, RuntimeError, ValueError)


class EstimatorFailure(RuntimeError):
    pass


@dataclass
class Outcome:
    files: dict[str, str]
    ok: bool = True
    messages: list[str] = field(default_factory=list)


# ----------------------------------------------------------------------------
# formatting


def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _header(cfg: ExperimentConfig) -> list[str]:
    return [f"# experiment={cfg.experiment}", f"# config_sha256={cfg.sha256}", f"# seed={cfg.seed}",
            f"# version={__version__}"]


def to_csv(cfg: ExperimentConfig, columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    buf.write("\n".join(_header(cfg)) + "\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow([_num(x) for x in r])
    return buf.getvalue()


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def to_json(cfg: ExperimentConfig, payload: dict) -> str:
    doc = {"experiment": cfg.experiment, "config_sha256": cfg.sha256, "seed": cfg.seed,
           "version": __version__, "result": payload}
    return json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(fn, items))


class _Bound:
    """Picklable partial application fn(cfg, x)."""

    def __init__(self, fn, cfg):
        self.fn, self.cfg = fn, cfg

    def __call__(self, x):
        return self.fn(self.cfg, x)


def _tail_params(cfg: ExperimentConfig) -> list[float]:
    grid = list(cfg.family.grid)
    return [p for p in grid if cfg.tail_from is None or p >= cfg.tail_from]


# ----------------------------------------------------------------------------
# drift sweep


def _drift_row(cfg: ExperimentConfig, p: float) -> dict:
    try:
        rho = cfg.family.representation(p)
        R = rescaling_factor(rho, cfg.F()).value
        est = estimate_drift(WalkConfig(cfg.build_measure(), HyperbolicAction(rho), cfg.walk.steps,
                                        cfg.walk.trials, cfg.seed))
        return {"param": p, "drift": est.mean, "ci_low": est.ci_low, "ci_high": est.ci_high, "R_rho": R,
                "drift_over_R": est.mean / R if R > 0 else None, "note": ""}
    except ESTIMATOR_ERRORS as exc:
        return {"param": p, "drift": None, "ci_low": None, "ci_high": None, "R_rho": None,
                "drift_over_R": None, "note": f"{type(exc).__name__}: {exc}"}


DRIFT_COLUMNS = ("param", "drift", "ci_low", "ci_high", "R_rho", "drift_over_R", "note")


def drift_sweep(cfg: ExperimentConfig, jobs: int = 1, fmt: str = "csv") -> Outcome:
    rows = _map(_Bound(_drift_row, cfg), list(cfg.family.grid), jobs)
    files = {}
    if fmt == "json":
        files["drift_sweep.json"] = to_json(cfg, {"rows": rows})
    else:
        files["drift_sweep.csv"] = to_csv(cfg, DRIFT_COLUMNS, [[r[c] for c in DRIFT_COLUMNS] for r in rows])
    files["drift_sweep_plot_drift.csv"] = to_csv(cfg, ("param", "drift"), [[r["param"], r["drift"]] for r in rows])
    files["drift_sweep_plot_ratio.csv"] = to_csv(cfg, ("param", "drift_over_R"),
                                                 [[r["param"], r["drift_over_R"]] for r in rows])
    bad = [r for r in rows if r["note"]]
    return Outcome(files, True, [f"row {r['param']}: {r['note']}" for r in bad])


# ----------------------------------------------------------------------------
# semicontinuity


def _rescaled_drift(cfg: ExperimentConfig, p: float) -> dict:
    fam = rescaled_family(cfg.family.representation, cfg.F(), cfg.rescale_multiplier)
    act = fam(p)
    est = estimate_drift(WalkConfig(cfg.build_measure(), act, cfg.walk.steps, cfg.walk.trials, cfg.seed))
    return {"param": p, "R": act.factor / cfg.rescale_multiplier, "drift": est.mean, "ci_low": est.ci_low,
            "ci_high": est.ci_high}


def semicontinuity(cfg: ExperimentConfig, jobs: int = 1, fmt: str = "json",
                   tolerance: float | None = None) -> Outcome:
    tol = float(cfg.raw.get("semicontinuity", {}).get("tolerance", 0.05)) if tolerance is None else tolerance
    grid = list(cfg.family.grid)
    F = cfg.F()
    fam = rescaled_family(cfg.family.representation, F, cfg.rescale_multiplier)
    try:
        if cfg.limit == "tree":
            lim = limit_tree(cfg.family.representation, F, grid)
            limit_desc = {"kind": "tree", "weights": list(lim.weights)}
        else:
            lim = fam(grid[-1])
            limit_desc = {"kind": "last", "param": grid[-1]}
        lim_est = estimate_drift(WalkConfig(cfg.build_measure(), lim, cfg.walk.steps, cfg.walk.trials, cfg.seed))
        rows = _map(_Bound(_rescaled_drift, cfg), grid, jobs)
        report = convergence_report(fam, lim, cfg.words(), grid)
    except (CauchyError, ConvergenceError) as exc:
        raise EstimatorFailure(str(exc)) from exc
    tail = set(_tail_params(cfg))
    diffs = [r["drift"] - lim_est.mean for r in rows if r["param"] in tail]
    min_diff = min(diffs)
    if report.flagged:
        check = "not-applicable"
    else:
        check = "pass" if min_diff >= -tol else "fail"
    payload = {
        "limit": limit_desc,
        "limit_drift": lim_est.to_dict(),
        "rescaled_drifts": rows,
        "tail_params": sorted(tail),
        "min_tail_difference": min_diff,
        "tolerance": tol,
        "inequality_check": check,
        "convergence": report.to_dict(),
        "rescale_multiplier": cfg.rescale_multiplier,
    }
    files = {}
    if fmt == "csv":
        cols = ("param", "R", "drift", "ci_low", "ci_high", "limit_drift", "difference")
        files["semicontinuity.csv"] = to_csv(cfg, cols, [[r["param"], r["R"], r["drift"], r["ci_low"],
                                                          r["ci_high"], lim_est.mean, r["drift"] - lim_est.mean]
                                                         for r in rows])
    else:
        files["semicontinuity.json"] = to_json(cfg, payload)
    files["convergence.csv"] = "\n".join(_header(cfg)) + "\n" + report.to_csv()
    msgs = [] if check != "not-applicable" else ["convergence report flagged; inequality check not applicable"]
    return Outcome(files, True, msgs)


# ----------------------------------------------------------------------------
# dimension drop


def _dimension_row(cfg: ExperimentConfig, p: float, ent) -> dict:
    entropy_upper = ent.extrapolated
    rho = cfg.family.representation(p)
    est = estimate_drift(WalkConfig(cfg.build_measure(), HyperbolicAction(rho), cfg.walk.steps,
                                    cfg.walk.trials, cfg.seed))
    row = {"param": p, "entropy_upper": entropy_upper, "drift": est.mean, "drift_ci_low": est.ci_low,
           "drift_ci_high": est.ci_high, "dimension": None, "note": ""}
    if entropy_upper == 0.0:
        row["dimension"] = 0.0
        return row
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            row["dimension"] = estimate_dimension(ent, est)
        except ValueError as exc:
            row["note"] = str(exc)
    if caught:
        row["note"] = str(caught[0].message)
    return row


class _DimRow:
    def __init__(self, cfg, h):
        self.cfg, self.h = cfg, h

    def __call__(self, p):
        return _dimension_row(self.cfg, p, self.h)


def dimension_drop(cfg: ExperimentConfig, jobs: int = 1, fmt: str = "csv") -> Outcome:
    mu = cfg.build_measure()
    try:
        ent = estimate_entropy(mu, cfg.entropy_n_max)
    except EntropyCapError as exc:
        raise EstimatorFailure(str(exc)) from exc
    rows = _map(_DimRow(cfg, ent), list(cfg.family.grid), jobs)
    tail = [r["dimension"] for r in rows if r["param"] in set(_tail_params(cfg)) and r["dimension"] is not None]
    monotone = all(b < a for a, b in zip(tail, tail[1:]))
    summary = {"entropy": ent.to_dict(), "monotone_decreasing_tail": monotone,
               "final_dimension": rows[-1]["dimension"], "rows": rows}
    cols = ("param", "entropy_upper", "drift", "dimension", "drift_ci_low", "drift_ci_high", "note")
    files = {}
    if fmt == "json":
        files["dimension_drop.json"] = to_json(cfg, summary)
    else:
        files["dimension_drop.csv"] = to_csv(cfg, cols, [[r[c] for c in cols] for r in rows])
        files["dimension_drop_summary.json"] = to_json(cfg, {k: v for k, v in summary.items() if k != "rows"})
    return Outcome(files, True, [f"row {r['param']}: {r['note']}" for r in rows if r["note"]])


# ----------------------------------------------------------------------------
# schottky certification


def _family_action(cfg: ExperimentConfig):
    if cfg.schottky.rescaled:
        return rescaled_family(cfg.family.representation, cfg.F(), cfg.rescale_multiplier)
    return lambda p: HyperbolicAction(cfg.family.representation(p))


def schottky_certify(cfg: ExperimentConfig, jobs: int = 1, fmt: str = "json") -> Outcome:
    sch = cfg.schottky
    base = cfg.family.grid[0] if sch.base_param is None else sch.base_param
    act = HyperbolicAction(cfg.family.representation(base))
    delta = act.delta if sch.delta is None else sch.delta
    mu = cfg.build_measure()
    bundle = {"base_param": base, "delta": delta, "eta_target": sch.eta_target, "D_target": sch.D_target}
    try:
        res = search(mu, act, delta, sch.eta_target, sch.D_target, sch.max_power)
    except (ElementaryMeasureError, SearchExhausted) as exc:
        bundle["error"] = {"type": type(exc).__name__, "message": str(exc)}
        name = "schottky_certificate.json"
        return Outcome({name: to_json(cfg, bundle)}, False, [str(exc)])
    if sch.A is not None and res.cert.eta * sch.A < res.cert.C:
        raise ConfigError(f"eta * A = {res.cert.eta * sch.A:.6g} < C = {res.cert.C:.6g}")
    rng = np.random.default_rng([cfg.seed, 1])
    probes = probe_words(cfg.rank, sch.probe_len, sch.probe_extra, rng=rng)
    violations = brute_check(res.cert, act, probes, sch.pair_samples, rng)
    fam = certify_family(_family_action(cfg), res.S, None, list(cfg.family.grid))
    bundle.update({"search": res.to_dict(), "probe_count": len(probes), "pair_samples": sch.pair_samples,
                   "violations": [v.to_dict() for v in violations], "family": fam.to_dict()})
    files = {}
    if fmt == "csv":
        cols = ("param", "certified", "c1", "c2", "delta", "margin", "C", "D")
        rows = []
        for p, r in zip(fam.params, fam.results):
            ok = isinstance(r, SchottkyCertificate)
            rows.append([p, ok, r.c1, r.c2, r.delta, r.margin, r.C if ok else None, r.D if ok else None])
        files["schottky_family.csv"] = to_csv(cfg, cols, rows)
        files["schottky_violations.csv"] = to_csv(
            cfg, ("condition", "witnesses", "measured", "threshold"),
            [[v.condition, " ".join(word_to_str(w) or "e" for w in v.witnesses), v.measured, v.threshold]
             for v in violations])
    else:
        files["schottky_certificate.json"] = to_json(cfg, bundle)
    msgs = [f"{len(violations)} violations"] if violations else []
    return Outcome(files, True, msgs)


# ----------------------------------------------------------------------------
# tails


def _tail_action(cfg: ExperimentConfig):
    if cfg.tree_weights is not None:
        return cfg.tree()
    return HyperbolicAction(cfg.family.representation(cfg.family.grid[0]))


def _tail_one(cfg: ExperimentConfig, a: float) -> dict:
    tl = cfg.tail
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        te = estimate_tail(cfg.build_measure(), _tail_action(cfg), a, tl.n_grid, tl.trials, cfg.seed, tl.tilt)
    return {"estimate": te, "warnings": [str(w.message) for w in caught]}


def tail(cfg: ExperimentConfig, jobs: int = 1, fmt: str = "csv") -> Outcome:
    tl = cfg.tail
    mu = cfg.build_measure()
    action = _tail_action(cfg)
    drift = estimate_drift(WalkConfig(mu, action, max(tl.n_grid), cfg.walk.trials, cfg.seed))
    lemma = None
    if tl.lemma is not None:
        lm = tl.lemma
        if lm.Q_mean is not None:
            EQ = lm.Q_mean
        else:
            steps = max(1, int(round(lm.N * lm.A)))
            EQ = float(np.mean(simulate(mu, action, steps, cfg.walk.trials, cfg.seed + 3)["dist"][:, 0]))
        bound = check_r(lm, EQ)
        lemma = {"eta": lm.eta, "N": lm.N, "A": lm.A, "alpha": lm.alpha, "r": lm.r, "C": lm.C, "EQ": EQ,
                 "r_bound": bound}
    a_values = list(tl.a_values) or [f * drift.mean for f in tl.a_fractions]
    results = _map(_Bound(_tail_one, cfg), a_values, jobs)
    inc = check_distance_increase(mu, action, word_from_str(tl.g), tl.horizon, tl.epsilon, cfg.walk.trials,
                                  cfg.seed)
    prob_rows, fits = [], []
    for a, res in zip(a_values, results):
        te = res["estimate"]
        for n, lp, cens in zip(te.n_grid, te.log_probs, te.censored):
            prob_rows.append([a, n, 0.0 if cens else math.exp(lp), lp, cens])
        if te.warning:
            status, kappa, r2 = "rate not below drift", None, None
        elif te.kappa_hat is None:
            status, kappa, r2 = "censored", "inf", None
        else:
            status, kappa, r2 = "ok", te.kappa_hat, te.r_squared
        fits.append({"a": a, "kappa_hat": kappa, "r_squared": r2, "tilt": te.tilt, "status": status,
                     "censored_cells": int(sum(te.censored)), "warnings": res["warnings"]})
    files = {}
    summary = {"drift": drift.to_dict(), "fits": fits, "distance_increase": inc.to_dict(), "lemma": lemma}
    if fmt == "json":
        summary["probabilities"] = [dict(zip(("a", "n", "empirical_prob", "log_prob", "censored"), r))
                                    for r in prob_rows]
        files["tail.json"] = to_json(cfg, summary)
    else:
        files["tail.csv"] = to_csv(cfg, ("a", "n", "empirical_prob", "log_prob", "censored_flag"), prob_rows)
        files["tail_fit.csv"] = to_csv(cfg, ("a", "kappa_hat", "r_squared", "tilt", "status"),
                                       [[f["a"], f["kappa_hat"], f["r_squared"], f["tilt"], f["status"]]
                                        for f in fits])
        files["tail_summary.json"] = to_json(cfg, summary)
    return Outcome(files, True, [w for f in fits for w in f["warnings"]])


COMMANDS = {
    "drift-sweep": drift_sweep,
    "semicontinuity": semicontinuity,
    "dimension-drop": dimension_drop,
    "schottky-certify": schottky_certify,
    "tail": tail,
}

DEFAULT_FORMAT = {"drift-sweep": "csv", "semicontinuity": "json", "dimension-drop": "csv",
                  "schottky-certify": "json", "tail": "csv"}
