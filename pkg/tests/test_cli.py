import csv
import hashlib
import io
import json
import math
import subprocess
import sys
import textwrap

import pytest

from hypwalk.cli import EXIT_CONFIG, EXIT_ESTIMATOR, EXIT_OK, run
from oracles import weighted_tree_drift

THETA = math.pi / 2

SWEEP = f"""
experiment = "drift-sweep"
seed = 11
[family]
tag = "schottky"
vary = "t"
grid = [2, 4, 8]
params = {{ theta = {THETA} }}
[walk]
steps = 300
trials = 40
"""

SEMI = f"""
experiment = "semicontinuity"
seed = 12
[family]
tag = "schottky"
vary = "t"
grid = [16, 20, 24]
params = {{ theta = {THETA} }}
[walk]
steps = 400
trials = 60
[rescaling]
F = ["e", "a", "A", "b", "B"]
"""

DIM = f"""
experiment = "dimension-drop"
seed = 13
[family]
tag = "schottky"
vary = "t"
grid = [4, 12, 24]
params = {{ theta = {THETA} }}
[walk]
steps = 300
trials = 40
[entropy]
n_max = 6
"""

CERT = f"""
experiment = "schottky-certify"
seed = 14
[family]
tag = "schottky"
vary = "t"
grid = [10, 16, 24]
params = {{ theta = {THETA} }}
[schottky]
pair_samples = 300
probe_len = 2
probe_extra = 20
"""

TAIL = """
experiment = "tail"
seed = 15
[tree]
weights = [1.0, 1.0]
[walk]
steps = 100
trials = 60
[tail]
a_values = [0.25]
n_grid = [20, 40, 60, 80]
trials = 400
horizon = 200
"""


def _write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return p


def _run(tmp_path, cmd, text, *extra, out="out"):
    cfg = _write(tmp_path, text)
    code = run([cmd, "--config", str(cfg), "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


def _rows(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(lines))))


def _json(path):
    return json.loads(path.read_text())["result"]


# -- each command --------------------------------------------------------------------

def test_drift_sweep(tmp_path):
    code, out = _run(tmp_path, "drift-sweep", SWEEP)
    assert code == EXIT_OK
    rows = _rows(out / "drift_sweep.csv")
    assert [float(r["param"]) for r in rows] == [2.0, 4.0, 8.0]
    drifts = [float(r["drift"]) for r in rows]
    assert drifts == sorted(drifts)
    for r in rows:
        assert float(r["drift_over_R"]) == pytest.approx(float(r["drift"]) / float(r["R_rho"]))
    assert len(_rows(out / "drift_sweep_plot_drift.csv")) == 3
    assert list(_rows(out / "drift_sweep_plot_ratio.csv")[0]) == ["param", "drift_over_R"]


def test_drift_sweep_constant_family(tmp_path):
    text = SWEEP.replace('vary = "t"', 'vary = "k"').replace(f"{{ theta = {THETA} }}", f"{{ t = 3.0, theta = {THETA} }}")
    code, out = _run(tmp_path, "drift-sweep", text)
    assert code == EXIT_OK
    rows = _rows(out / "drift_sweep.csv")
    assert len({r["drift"] for r in rows}) == 1


def test_drift_sweep_records_row_errors(tmp_path, capsys):
    text = SWEEP.replace("grid = [2, 4, 8]", "grid = [2, 4, -1]")
    code, out = _run(tmp_path, "drift-sweep", text)
    # the grid's first point validates; the bad point fails only its own row
    assert code == EXIT_OK
    rows = _rows(out / "drift_sweep.csv")
    assert rows[2]["drift"] == "" and "t must be > 0" in rows[2]["note"]
    assert "row -1.0" in capsys.readouterr().err


def test_semicontinuity(tmp_path):
    code, out = _run(tmp_path, "semicontinuity", SEMI)
    assert code == EXIT_OK
    rep = _json(out / "semicontinuity.json")
    assert rep["limit"]["weights"] == pytest.approx([1.0, 1.0], abs=1e-6)
    oracle = weighted_tree_drift(rep["limit"]["weights"])
    assert rep["limit_drift"]["mean"] == pytest.approx(oracle, abs=0.03)
    assert rep["inequality_check"] == "pass"
    assert rep["min_tail_difference"] >= -0.05
    assert (out / "convergence.csv").read_text().startswith("# experiment=semicontinuity")


def test_semicontinuity_constant_family_against_itself(tmp_path):
    text = SEMI.replace('vary = "t"', 'vary = "k"').replace(f"{{ theta = {THETA} }}", f"{{ t = 5.0, theta = {THETA} }}")
    text += '[semicontinuity]\nlimit = "last"\n'
    code, out = _run(tmp_path, "semicontinuity", text)
    assert code == EXIT_OK
    rep = _json(out / "semicontinuity.json")
    assert rep["min_tail_difference"] == pytest.approx(0.0, abs=1e-12)
    assert rep["inequality_check"] == "pass"


def test_semicontinuity_misscaled_is_not_applicable(tmp_path, capsys):
    code, out = _run(tmp_path, "semicontinuity", SEMI.replace('["e", "a", "A", "b", "B"]',
                                                              '["e", "a", "A", "b", "B"]\nmultiplier = 2.0'))
    assert code == EXIT_OK
    rep = _json(out / "semicontinuity.json")
    assert rep["convergence"]["flagged"]
    assert rep["inequality_check"] == "not-applicable"
    assert "not applicable" in capsys.readouterr().err


def test_semicontinuity_cauchy_failure(tmp_path, capsys):
    text = """
    experiment = "semicontinuity"
    [family]
    tag = "fricke"
    vary = "y"
    grid = [3.5, 10.0, 100.0]
    params = { x = 3.0 }
    [walk]
    steps = 50
    trials = 10
    """
    code, _ = _run(tmp_path, "semicontinuity", text)
    assert code == EXIT_ESTIMATOR
    assert "convergent" in capsys.readouterr().err


def test_dimension_drop(tmp_path):
    code, out = _run(tmp_path, "dimension-drop", DIM)
    assert code == EXIT_OK
    rows = _rows(out / "dimension_drop.csv")
    dims = [float(r["dimension"]) for r in rows]
    assert dims == sorted(dims, reverse=True)
    assert dims[-1] < 0.1
    for r in rows:
        assert float(r["dimension"]) == pytest.approx(float(r["entropy_upper"]) / float(r["drift"]))
        assert float(r["dimension"]) <= 1.0
    summary = _json(out / "dimension_drop_summary.json")
    assert summary["monotone_decreasing_tail"]


def test_dimension_drop_point_mass(tmp_path):
    code, out = _run(tmp_path, "dimension-drop", DIM + "[measure]\natoms = { ab = 1.0 }\n")
    assert code == EXIT_OK
    assert all(float(r["dimension"]) == 0.0 for r in _rows(out / "dimension_drop.csv"))


def test_schottky_certify(tmp_path):
    code, out = _run(tmp_path, "schottky-certify", CERT)
    assert code == EXIT_OK
    b = _json(out / "schottky_certificate.json")
    assert b["violations"] == []
    assert b["family"]["uniform"]
    assert b["search"]["certificate"]["size"] == 4
    assert b["pair_samples"] == 300


def test_schottky_certify_small_eta(tmp_path):
    text = CERT.replace("pair_samples = 300", "pair_samples = 30\neta_target = 0.01")
    code, out = _run(tmp_path, "schottky-certify", text, "--format", "csv")
    assert code == EXIT_OK
    assert _rows(out / "schottky_violations.csv") == []
    fam = _rows(out / "schottky_family.csv")
    assert all(r["certified"] == "true" for r in fam)
    code, out = _run(tmp_path, "schottky-certify", text, out="json")
    assert _json(out / "schottky_certificate.json")["search"]["certificate"]["size"] >= 200


def test_schottky_certify_elementary_measure(tmp_path, capsys):
    code, out = _run(tmp_path, "schottky-certify", CERT + "[measure]\natoms = { a = 1.0 }\n")
    assert code == EXIT_ESTIMATOR
    b = _json(out / "schottky_certificate.json")
    assert b["error"]["type"] == "ElementaryMeasureError"
    assert "elementary" in capsys.readouterr().err


def test_schottky_certify_rejects_small_A(tmp_path, capsys):
    code, _ = _run(tmp_path, "schottky-certify", CERT.replace("[schottky]", "[schottky]\nA = 0.1"))
    assert code == EXIT_CONFIG
    assert "eta * A" in capsys.readouterr().err


def test_tail(tmp_path):
    code, out = _run(tmp_path, "tail", TAIL)
    assert code == EXIT_OK
    rows = _rows(out / "tail.csv")
    assert [int(r["n"]) for r in rows] == [20, 40, 60, 80]
    fit = _rows(out / "tail_fit.csv")[0]
    assert fit["status"] == "ok" and float(fit["kappa_hat"]) > 0
    summary = _json(out / "tail_summary.json")
    assert summary["distance_increase"]["E_hat"] >= 0
    assert summary["lemma"] is None


def test_tail_zero_rate_and_above_drift(tmp_path, capsys):
    text = TAIL.replace("a_values = [0.25]", "a_values = [0.0, 1.5]").replace("[20, 40, 60, 80]", "[21, 41, 61]")
    code, out = _run(tmp_path, "tail", text)
    assert code == EXIT_OK
    rows = [r for r in _rows(out / "tail.csv") if float(r["a"]) == 0.0]
    assert all(r["censored_flag"] == "true" and float(r["empirical_prob"]) == 0.0 for r in rows)
    fits = _rows(out / "tail_fit.csv")
    assert fits[0]["status"] == "censored" and fits[0]["kappa_hat"] == "inf"
    assert fits[1]["status"] == "rate not below drift" and fits[1]["kappa_hat"] == ""
    assert "rate not below drift" in capsys.readouterr().err


def test_tail_lemma_checks(tmp_path, capsys):
    ok = TAIL + "[tail.lemma]\neta = 0.01\nN = 10\nA = 5.0\nalpha = 0.5\nr = 0.1\nQ_mean = 20.0\n"
    code, out = _run(tmp_path, "tail", ok)
    assert code == EXIT_OK
    assert _json(out / "tail_summary.json")["lemma"]["r_bound"] == pytest.approx(0.6 * 20 / 50 - 0.02)
    code, _ = _run(tmp_path, "tail", ok.replace("r = 0.1", "r = 0.5"))
    assert code == EXIT_CONFIG
    assert "0.22" in capsys.readouterr().err
    jumps = TAIL + "[tail.lemma]\neta = 0.01\nN = 2\nA = 5.0\nalpha = 0.5\nr = 0.9\nQ = \"jumps\"\n"
    code, _ = _run(tmp_path, "tail", jumps)
    assert code == EXIT_CONFIG
    assert "violates" in capsys.readouterr().err
    code, _ = _run(tmp_path, "tail", TAIL + "[tail.lemma]\neta = 0.01\nN = 10\nA = 5.0\nalpha = 0.5\nC = 1.0\n")
    assert code == EXIT_CONFIG
    assert "eta * A" in capsys.readouterr().err


# -- config errors --------------------------------------------------------------------

@pytest.mark.parametrize("text,needle", [
    ("experiment = \n", "cfg.toml"),
    ('experiment = "nope"\n', "unknown experiment"),
    ('experiment = "drift-sweep"\n', "[family]"),
    (SWEEP.replace("steps = 300", "steps = 0"), "walk.steps"),
    (SWEEP.replace('tag = "schottky"', 'tag = "moebius"'), "moebius"),
    (SWEEP + "[measure]\natoms = { a = 0.5 }\n", "measure"),
])
def test_config_errors(tmp_path, capsys, text, needle):
    code, _ = _run(tmp_path, "drift-sweep", text)
    assert code == EXIT_CONFIG
    assert needle in capsys.readouterr().err


def test_experiment_mismatch(tmp_path, capsys):
    code, _ = _run(tmp_path, "tail", SWEEP)
    assert code == EXIT_CONFIG
    assert "not 'tail'" in capsys.readouterr().err


def test_bad_flags(tmp_path):
    assert _run(tmp_path, "drift-sweep", SWEEP, "--jobs", "0")[0] == EXIT_CONFIG
    assert _run(tmp_path, "drift-sweep", SWEEP, "--seed", "-4")[0] == EXIT_CONFIG


# -- reproducibility --------------------------------------------------------------------

def _digest(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


@pytest.mark.parametrize("cmd,text", [("drift-sweep", SWEEP), ("tail", TAIL), ("schottky-certify", CERT)])
def test_reruns_are_byte_identical(tmp_path, cmd, text):
    assert _run(tmp_path, cmd, text, out="a")[0] == EXIT_OK
    assert _run(tmp_path, cmd, text, out="b")[0] == EXIT_OK
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_jobs_do_not_change_output(tmp_path):
    _run(tmp_path, "drift-sweep", SWEEP, out="serial")
    _run(tmp_path, "drift-sweep", SWEEP, "--jobs", "3", out="parallel")
    assert _digest(tmp_path / "serial") == _digest(tmp_path / "parallel")


def test_outputs_embed_hash_and_seed(tmp_path):
    cfg = _write(tmp_path, SWEEP)
    digest = hashlib.sha256(cfg.read_bytes()).hexdigest()
    run(["drift-sweep", "--config", str(cfg), "--out", str(tmp_path / "o")])
    for p in (tmp_path / "o").iterdir():
        text = p.read_text()
        assert f"# config_sha256={digest}" in text and "# seed=11" in text
    run(["drift-sweep", "--config", str(cfg), "--out", str(tmp_path / "j"), "--format", "json", "--seed", "99"])
    doc = json.loads((tmp_path / "j" / "drift_sweep.json").read_text())
    assert doc["config_sha256"] == digest and doc["seed"] == 99


def test_seed_override_changes_results(tmp_path):
    _run(tmp_path, "drift-sweep", SWEEP, out="a")
    _run(tmp_path, "drift-sweep", SWEEP, "--seed", "12", out="b")
    ra, rb = _rows(tmp_path / "a" / "drift_sweep.csv"), _rows(tmp_path / "b" / "drift_sweep.csv")
    assert [r["drift"] for r in ra] != [r["drift"] for r in rb]
    for x, y in zip(ra, rb):
        # different seeds agree within the combined intervals
        assert abs(float(x["drift"]) - float(y["drift"])) <= (float(x["ci_high"]) - float(x["ci_low"])
                                                              + float(y["ci_high"]) - float(y["ci_low"]))


def test_console_script(tmp_path):
    cfg = _write(tmp_path, TAIL)
    res = subprocess.run([sys.executable, "-m", "hypwalk.cli", "tail", "--config", str(cfg), "--out",
                          str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "o" / "tail_fit.csv").exists()
