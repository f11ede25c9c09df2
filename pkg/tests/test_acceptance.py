"""Acceptance criteria 1-9. Each test records one PASS/FAIL line, printed after the run."""

import csv
import dataclasses
import io
import json
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from hypwalk import hplane as hp
from hypwalk.actions import HyperbolicAction, WeightedTreeAction, four_point_delta
from hypwalk.cli import run
from hypwalk.groups import GeneratorSet, make_family, rep_eval, uniform_generators, words_up_to
from hypwalk.schottky import SchottkyCertificate, brute_check, certify, probe_words, schottky_set, search
from hypwalk.walk import WalkConfig, estimate_drift
from oracles import mp_displacement, mp_schottky, mp_word, srw_drift, srw_kappa

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
COMMANDS = {
    "drift-sweep": "drift_sweep.toml",
    "semicontinuity": "semicontinuity.toml",
    "dimension-drop": "dimension_drop.toml",
    "schottky-certify": "schottky_certify.toml",
    "tail": "tail.toml",
}
MU = uniform_generators(2)


def _record(k, ok, detail, elapsed, limit):
    ok = ok and elapsed < limit
    ACCEPTANCE_LINES.append(f"criterion {k}: {'PASS' if ok else 'FAIL'} {detail} [{elapsed:.1f}s < {limit}s]")
    assert ok, detail


def _rows(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(lines))))


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Each shipped config run once; values are (output dir, seconds)."""
    out = {}
    for cmd, name in COMMANDS.items():
        d = tmp_path_factory.mktemp(cmd)
        t0 = time.perf_counter()
        code = run([cmd, "--config", str(CONFIGS / name), "--out", str(d)])
        assert code == 0, cmd
        out[cmd] = (d, time.perf_counter() - t0)
    return out


def test_criterion_1_geometry():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)

    def point():
        return hp.HPoint(rng.uniform(-5, 5), math.exp(rng.uniform(-3, 3)))

    def isometry():
        k = hp.rotation(rng.uniform(-math.pi, math.pi))
        a = hp.diagonal(math.exp(rng.uniform(-1.5, 1.5)))
        n = hp.from_matrix(((1.0, rng.uniform(-3, 3)), (0.0, 1.0)))
        return hp.compose_all([k, a, n])

    worst_tri = worst_inv = 0.0
    for _ in range(10_000):
        x, y, z = point(), point(), point()
        worst_tri = max(worst_tri, hp.distance(x, z) - hp.distance(x, y) - hp.distance(y, z))
        g = isometry()
        worst_inv = max(worst_inv, abs(hp.distance(hp.apply(g, x), hp.apply(g, y)) - hp.distance(x, y)))
    # log-scaled against plain float products (small t) and exact products (large t)
    worst_scale = 0.0
    letters = [1, -1, 2, -2]
    for t in (0.5, 1.0, 8.0, 24.0):
        rho = make_family("schottky", t=t, theta=math.pi / 2)
        gens = mp_schottky(t, math.pi / 2) if t > 1 else None
        for _ in range(100):
            w = [letters[i] for i in rng.integers(0, 4, size=rng.integers(1, 31))]
            got = hp.displacement(rep_eval(rho, tuple(w)))
            if gens is None:
                m = np.eye(2)
                for x in w:
                    g = rho.images[abs(x) - 1]
                    g = g if x > 0 else hp.inverse(g)
                    m = m @ np.array(g.m).reshape(2, 2) * math.exp(g.logscale)
                ref = math.acosh(max(1.0, float(np.sum(m * m)) / 2))
            else:
                ref = mp_displacement(mp_word(gens, w))
            worst_scale = max(worst_scale, abs(got - ref))
    ok = worst_tri <= 1e-9 and worst_inv <= 1e-9 and worst_scale <= 1e-8
    _record(1, ok, f"triangle excess {worst_tri:.1e}, invariance {worst_inv:.1e}, log-scale {worst_scale:.1e}",
            time.perf_counter() - t0, 10)


def test_criterion_2_tree_hyperbolicity():
    t0 = time.perf_counter()
    ws = words_up_to(2, 4)
    worst = max(four_point_delta(WeightedTreeAction(W), ws) for W in ((1.0, 1.0), (0.3, 2.7)))
    _record(2, worst <= 1e-12, f"delta {worst:.1e} over {len(ws)} words", time.perf_counter() - t0, 30)


def test_criterion_3_tree_drift():
    t0 = time.perf_counter()
    est = estimate_drift(WalkConfig(MU, WeightedTreeAction((1.0, 1.0)), 10_000, 200, 3))
    exact = srw_drift(2, 10_000)
    ok = abs(est.mean - 0.5) <= 0.01 and abs(est.mean - exact) <= 0.01
    _record(3, ok, f"drift {est.mean:.4f} +- {est.half_width:.4f}, chain {exact:.6f}", time.perf_counter() - t0, 60)


def test_criterion_4_schottky():
    t0 = time.perf_counter()
    tree = WeightedTreeAction((1.0, 1.0))
    plane = HyperbolicAction(make_family("schottky", t=10.0, theta=math.pi / 2))
    cases = [
        (tree, certify(GeneratorSet.from_strings(["aa", "AA", "bb", "BB"]), tree, 0.0)),
        (plane, search(MU, plane, plane.delta, 0.5, 1.0).cert),
        (plane, certify(schottky_set((1,), (2,), 1), plane, plane.delta)),
        (tree, search(MU, tree, 0.0, 0.25, 3.0).cert),
    ]
    rng = np.random.default_rng([4, 0])
    probes = probe_words(2, 3, extra=200, rng=rng)
    pairs = 10_000
    clean = caught = 0
    for act, cert in cases:
        assert isinstance(cert, SchottkyCertificate)
        clean += brute_check(cert, act, probes, pairs, rng) == []
        bad_C = dataclasses.replace(cert, C=cert.C - cert.c2)
        bad_D = dataclasses.replace(cert, D=cert.c2 + 1)
        v = brute_check(bad_C, act, probes[:60], 500, rng) + brute_check(bad_D, act, [()], 1, rng)
        caught += {1, 3} <= {x.condition for x in v}
    ok = clean == len(cases) and caught == len(cases)
    _record(4, ok, f"{clean}/{len(cases)} certificates clean over {pairs} pairs, {caught}/{len(cases)} perturbations "
            "caught", time.perf_counter() - t0, 60)


def test_criterion_5_properness(runs):
    out, elapsed = runs["drift-sweep"]
    rows = _rows(out / "drift_sweep.csv")
    t = [float(r["param"]) for r in rows]
    assert t == [float(x) for x in range(2, 25)]
    separated = all(float(a["ci_high"]) < float(b["ci_low"]) for a, b in zip(rows, rows[1:]))
    ratio = [float(r["drift_over_R"]) for r in rows if float(r["param"]) >= 10]
    variation = (max(ratio) - min(ratio)) / min(ratio)
    lowest = min(float(r["drift_over_R"]) for r in rows)
    ok = separated and lowest > 0 and variation <= 0.2
    _record(5, ok, f"CIs separated: {separated}, min drift/R {lowest:.3f}, tail variation {variation:.3f}",
            elapsed, 300)


def test_criterion_6_semicontinuity(runs):
    out, elapsed = runs["semicontinuity"]
    rep = json.loads((out / "semicontinuity.json").read_text())["result"]
    tree = rep["limit_drift"]["mean"]
    drifts = {r["param"]: r["drift"] for r in rep["rescaled_drifts"]}
    conv = rep["convergence"]
    dev24 = conv["deviations"][conv["params"].index(24.0)]
    margin = min(d - (tree - 0.05) for d in drifts.values())
    ok = sorted(drifts) == [16.0, 20.0, 24.0] and margin >= 0 and dev24 < 0.1
    _record(6, ok, f"tree drift {tree:.4f}, min rescaled {min(drifts.values()):.4f}, deviation at 24 {dev24:.4f}",
            elapsed, 300)


def test_criterion_7_large_deviations(runs):
    out, elapsed = runs["tail"]
    summary = json.loads((out / "tail_summary.json").read_text())["result"]
    fit = summary["fits"][0]
    a = fit["a"]
    assert a == pytest.approx(0.5 * summary["drift"]["mean"])
    grid = sorted({int(r["n"]) for r in _rows(out / "tail.csv")})
    assert grid == list(range(50, 401, 50))
    exact = srw_kappa(2, a, grid)
    k = fit["kappa_hat"]
    ok = fit["status"] == "ok" and k > 0 and fit["r_squared"] >= 0.9 and abs(k - exact) <= 0.3 * exact
    _record(7, ok, f"a {a:.4f}, kappa {k:.4f} vs chain {exact:.4f}, r2 {fit['r_squared']:.3f}", elapsed, 120)


def test_criterion_8_dimension(runs):
    out, elapsed = runs["dimension-drop"]
    rows = _rows(out / "dimension_drop.csv")
    below = all(float(r["entropy_upper"]) <= float(r["drift_ci_high"]) for r in rows)
    dims = [float(r["dimension"]) for r in rows]
    decreasing = all(b < a for a, b in zip(dims, dims[1:]))
    ok = below and decreasing and dims[-1] < 0.1
    _record(8, ok, f"entropy bound below drift: {below}, decreasing: {decreasing}, final {dims[-1]:.4f}",
            elapsed, 300)


def test_criterion_9_determinism(runs, tmp_path):
    t0 = time.perf_counter()
    same = []
    for cmd, name in COMMANDS.items():
        first = runs[cmd][0]
        again = tmp_path / cmd
        assert run([cmd, "--config", str(CONFIGS / name), "--out", str(again)]) == 0
        a = {p.name: p.read_bytes() for p in first.iterdir()}
        b = {p.name: p.read_bytes() for p in again.iterdir()}
        same.append(a == b)
        shutil.rmtree(again)
    _record(9, all(same), f"{sum(same)}/{len(same)} commands byte-identical", time.perf_counter() - t0, 600)
