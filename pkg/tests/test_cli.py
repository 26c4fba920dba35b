"""End-to-end command-line runs: file outputs, error handling, determinism."""

import csv
import json
import math
import re
import shutil
import subprocess
import sys

import numpy as np
import pytest

from gammkit.cli import main


def _write(path, text):
    path.write_text(text)
    return str(path)


def _basic_data(path, n=60, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, n)
    cond = rng.integers(0, 2, n)
    y = np.sin(2 * np.pi * x) + 0.4 * (0.5 - cond) \
        + 0.2 * rng.standard_normal(n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y", "x", "cond"])
        for yi, xi, ci in zip(y, x, cond):
            w.writerow([repr(float(yi)), repr(float(xi)), "ab"[ci]])
    return str(path)


BASIC_SPEC = """\
response: y
parametric: cond
smooth: cr(x) k=8
"""

SERIES_SPEC = """\
response: y
series: subject order: trial
"""

SCENARIO = """\
n_subjects: 8
n_trials: 60
rho: 0.3
sigma: 1.0
seed: 7
"""


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# fit


def test_fit_writes_every_output(tmp_path):
    data = _basic_data(tmp_path / "d.csv")
    spec = _write(tmp_path / "m.spec", BASIC_SPEC)
    out = tmp_path / "out"
    assert main(["fit", "--data", data, "--spec", spec,
                 "--out", str(out)]) == 0
    for name in ("summary.txt", "coefficients.csv", "residuals.csv",
                 "fit.json", "partial_cr_x.csv"):
        assert (out / name).is_file(), name
    record = json.loads((out / "fit.json").read_text())
    assert record["response"] == "y"
    assert record["n"] == 60 and record["p"] == 9
    assert record["converged"] is True
    assert len(record["lambdas"]) == 1
    coefs = _read_csv(out / "coefficients.csv")
    assert coefs[0] == ["name", "estimate", "se"]
    assert len(coefs) == 10
    partial = _read_csv(out / "partial_cr_x.csv")
    assert partial[0] == ["x", "effect", "se"]
    assert len(partial) == 101


def test_fit_intercept_only_has_no_smooth_section(tmp_path):
    rng = np.random.default_rng(1)
    with open(tmp_path / "d.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y"])
        for v in rng.standard_normal(30):
            w.writerow([repr(float(v))])
    spec = _write(tmp_path / "m.spec", "response: y\n")
    out = tmp_path / "out"
    assert main(["fit", "--data", str(tmp_path / "d.csv"), "--spec", spec,
                 "--out", str(out)]) == 0
    summary = (out / "summary.txt").read_text()
    assert "(Intercept)" in summary
    assert "(none)" in summary
    assert len(_read_csv(out / "coefficients.csv")) == 2


def test_fit_reruns_byte_identical_except_timestamp(tmp_path):
    data = _basic_data(tmp_path / "d.csv")
    spec = _write(tmp_path / "m.spec", BASIC_SPEC)
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert main(["fit", "--data", data, "--spec", spec,
                 "--out", str(out1)]) == 0
    assert main(["fit", "--data", data, "--spec", spec,
                 "--out", str(out2)]) == 0
    for name in ("summary.txt", "coefficients.csv", "residuals.csv",
                 "partial_cr_x.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name
    j1 = json.loads((out1 / "fit.json").read_text())
    j2 = json.loads((out2 / "fit.json").read_text())
    j1.pop("timestamp"), j2.pop("timestamp")
    assert j1 == j2


def test_fit_summary_t_is_estimate_over_se(tmp_path):
    data = _basic_data(tmp_path / "d.csv")
    spec = _write(tmp_path / "m.spec", BASIC_SPEC)
    out = tmp_path / "out"
    assert main(["fit", "--data", data, "--spec", spec, "--out", str(out),
                 "--format", "delimited"]) == 0
    coefs = {row[0]: (float(row[1]), float(row[2]))
             for row in _read_csv(out / "coefficients.csv")[1:]}
    lines = (out / "summary.txt").read_text().splitlines()
    start = lines.index("A. parametric coefficients") + 2
    checked = 0
    for line in lines[start:]:
        parts = line.split("\t")
        if len(parts) != 5:
            break
        est, se = coefs[parts[0]]
        assert abs(float(parts[3]) - est / se) < 1e-3 * (1 + abs(est / se))
        checked += 1
    assert checked == 2


def test_fit_rho_flag_overrides_spec_file(tmp_path):
    scen = _write(tmp_path / "s.scn", SCENARIO)
    sim_out = tmp_path / "sim"
    assert main(["simulate", "--spec", scen, "--out", str(sim_out)]) == 0
    spec = _write(tmp_path / "m.spec", SERIES_SPEC + "rho: 0.4\n")
    out = tmp_path / "out"
    assert main(["fit", "--data", str(sim_out / "simulated.csv"),
                 "--spec", spec, "--out", str(out), "--rho", "0.0"]) == 0
    assert json.loads((out / "fit.json").read_text())["rho"] == 0.0


def test_fit_unknown_key_exits_one_and_leaves_nothing(tmp_path, capsys):
    data = _basic_data(tmp_path / "d.csv")
    spec = _write(tmp_path / "m.spec", "response: y\nfrobnicate: 2\n")
    out = tmp_path / "out"
    assert main(["fit", "--data", data, "--spec", spec,
                 "--out", str(out)]) == 1
    err = capsys.readouterr().err
    assert err.startswith("gammkit: error at stage 'parse-spec':")
    assert "\n" == err[-1] and err.count("\n") == 1
    assert not out.exists() or not any(out.iterdir())


def test_fit_bad_cell_reports_load_stage(tmp_path, capsys):
    with open(tmp_path / "d.csv", "w", newline="") as fh:
        fh.write("y,x\n1.0,0.1\noops,0.2\n")
    spec = _write(tmp_path / "m.spec", "response: y\nsmooth: cr(x) k=4\n")
    assert main(["fit", "--data", str(tmp_path / "d.csv"), "--spec", spec,
                 "--out", str(tmp_path / "out")]) == 1
    err = capsys.readouterr().err
    assert "stage 'load-data'" in err
    assert "row" in err


def test_fit_unknown_smooth_function_rejected(tmp_path, capsys):
    data = _basic_data(tmp_path / "d.csv")
    spec = _write(tmp_path / "m.spec", "response: y\nsmooth: wiggle(x)\n")
    assert main(["fit", "--data", data, "--spec", spec,
                 "--out", str(tmp_path / "out")]) == 1
    assert "stage 'parse-spec'" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# predict and compare


def test_predict_writes_series_rows(tmp_path):
    scen = _write(tmp_path / "s.scn", SCENARIO)
    sim_out = tmp_path / "sim"
    assert main(["simulate", "--spec", scen, "--out", str(sim_out)]) == 0
    spec = _write(tmp_path / "m.spec", SERIES_SPEC)
    out = tmp_path / "out"
    assert main(["predict", "--data", str(sim_out / "simulated.csv"),
                 "--spec", spec, "--out", str(out)]) == 0
    rows = _read_csv(out / "predictions.csv")
    assert rows[0] == ["series", "order", "observed", "fit", "se"]
    assert len(rows) == 8 * 60 + 1
    assert all(float(r[4]) > 0 for r in rows[1:])


def test_compare_reports_a_verdict(tmp_path):
    data = _basic_data(tmp_path / "d.csv")
    spec0 = _write(tmp_path / "m0.spec", "response: y\nparametric: cond\n")
    spec1 = _write(tmp_path / "m1.spec", BASIC_SPEC)
    out = tmp_path / "out"
    assert main(["compare", "--data", data, "--spec", spec0,
                 "--spec", spec1, "--out", str(out)]) == 0
    text = (out / "comparison.txt").read_text()
    assert text.count("model: ") == 2
    assert "AIC = " in text and "params = " in text
    assert re.search(r"comparison: (Chisq = .* df = \d+ {2}p = .*"
                     r"|the model with fewer parameters)", text)


def test_compare_identical_specs_exit_one(tmp_path, capsys):
    data = _basic_data(tmp_path / "d.csv")
    spec = _write(tmp_path / "m.spec", BASIC_SPEC)
    assert main(["compare", "--data", data, "--spec", spec, "--spec", spec,
                 "--out", str(tmp_path / "out")]) == 1
    assert "identical" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# diagnostics commands


def test_acf_white_noise_stays_inside_the_band(tmp_path):
    scen = _write(tmp_path / "s.scn",
                  "n_subjects: 6\nn_trials: 80\nrho: 0.0\nseed: 3\n")
    sim_out = tmp_path / "sim"
    assert main(["simulate", "--spec", scen, "--out", str(sim_out)]) == 0
    spec = _write(tmp_path / "m.spec", SERIES_SPEC)
    out = tmp_path / "out"
    assert main(["acf", "--data", str(sim_out / "simulated.csv"),
                 "--spec", spec, "--out", str(out), "--max-lag", "10"]) == 0
    assert (out / "acf_whitened.csv").is_file()
    rows = _read_csv(out / "acf_raw.csv")
    assert rows[0] == ["group", "lag", "acf", "band", "n"]
    pooled = [r for r in rows[1:] if r[0] == "pooled" and int(r[1]) > 0]
    assert len(pooled) == 10
    inside = sum(abs(float(r[2])) < float(r[3]) for r in pooled)
    assert inside >= 9


def test_suggest_rho_round_trip(tmp_path):
    scen = _write(tmp_path / "s.scn",
                  "n_subjects: 10\nn_trials: 100\nrho: 0.3\nseed: 5\n")
    sim_out = tmp_path / "sim"
    assert main(["simulate", "--spec", scen, "--out", str(sim_out)]) == 0
    spec = _write(tmp_path / "m.spec", SERIES_SPEC)
    out = tmp_path / "out"
    assert main(["suggest-rho", "--data", str(sim_out / "simulated.csv"),
                 "--spec", spec, "--out", str(out)]) == 0
    rho = float((out / "rho.txt").read_text())
    assert 0.2 < rho < 0.4
    rows = _read_csv(out / "rho_by_group.csv")
    assert rows[0] == ["group", "lag1"]
    assert len(rows) == 11


def test_permtest_counts_file_has_exactly_two_lines(tmp_path):
    scen = _write(tmp_path / "s.scn",
                  "n_subjects: 6\nn_trials: 40\nrho: 0.0\n"
                  "subject_intercept_sd: 0.4\nseed: 9\n")
    sim_out = tmp_path / "sim"
    assert main(["simulate", "--spec", scen, "--out", str(sim_out)]) == 0
    spec = _write(tmp_path / "m.spec", SERIES_SPEC)
    out = tmp_path / "out"
    assert main(["permtest", "--data", str(sim_out / "simulated.csv"),
                 "--spec", spec, "--out", str(out), "--n-perm", "8"]) == 0
    lines = (out / "permtest_counts.txt").read_text().splitlines()
    assert len(lines) == 2
    assert re.fullmatch(r"alpha=0\.05 rejections=\d+ of 8", lines[0])
    assert re.fullmatch(r"alpha=0\.01 rejections=\d+ of 8", lines[1])
    pvals = _read_csv(out / "permtest_pvalues.csv")
    assert pvals[0] == ["perm", "p"]
    assert len(pvals) == 9
    assert all(0.0 <= float(r[1]) <= 1.0 for r in pvals[1:] if r[1])


# ---------------------------------------------------------------------------
# simulate


def test_simulate_is_deterministic_and_seed_sensitive(tmp_path):
    scen = _write(tmp_path / "s.scn", SCENARIO)
    o1, o2, o3 = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for o in (o1, o2):
        assert main(["simulate", "--spec", scen, "--out", str(o)]) == 0
    assert (o1 / "simulated.csv").read_bytes() == \
        (o2 / "simulated.csv").read_bytes()
    assert (o1 / "truth.json").read_bytes() == (o2 / "truth.json").read_bytes()
    assert main(["simulate", "--spec", scen, "--out", str(o3),
                 "--seed", "99"]) == 0
    assert (o1 / "simulated.csv").read_bytes() != \
        (o3 / "simulated.csv").read_bytes()
    truth = json.loads((o3 / "truth.json").read_text())
    assert truth["scenario"]["seed"] == 99


def test_simulate_truth_record_structure(tmp_path):
    scen = _write(tmp_path / "s.scn", SCENARIO)
    out = tmp_path / "out"
    assert main(["simulate", "--spec", scen, "--out", str(out)]) == 0
    truth = json.loads((out / "truth.json").read_text())
    assert set(truth) == {"scenario", "effects", "subject_intercepts",
                          "trends", "errors"}
    assert len(truth["trends"]) == 8
    assert all(len(row) == 60 for row in truth["trends"])
    rows = _read_csv(out / "simulated.csv")
    assert rows[0] == ["subject", "trial", "y"]
    assert len(rows) == 481
    assert rows[1][0] == "s000" and rows[1][1] == "1"


def test_simulate_rejects_bad_fixed_effect(tmp_path, capsys):
    scen = _write(tmp_path / "s.scn",
                  "n_subjects: 4\nn_trials: 10\n"
                  "fixed: factor3(c) effect=1.0\n")
    assert main(["simulate", "--spec", scen,
                 "--out", str(tmp_path / "out")]) == 1
    assert "stage 'parse-scenario'" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# console entry point


@pytest.mark.skipif(shutil.which("gammkit") is None,
                    reason="console script not on PATH")
def test_console_script_runs_a_fit(tmp_path):
    data = _basic_data(tmp_path / "d.csv")
    spec = _write(tmp_path / "m.spec", BASIC_SPEC)
    out = tmp_path / "out"
    proc = subprocess.run(["gammkit", "fit", "--data", data, "--spec", spec,
                           "--out", str(out)],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert (out / "summary.txt").is_file()


def test_module_help_lists_all_commands():
    proc = subprocess.run([sys.executable, "-m", "gammkit.cli", "--help"],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0
    for cmd in ("fit", "predict", "compare", "acf", "suggest-rho",
                "permtest", "simulate"):
        assert cmd in proc.stdout
