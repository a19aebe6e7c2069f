import csv
import dataclasses
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from binagree import report
from binagree.cli import main
from binagree.simulation import SimConfig, generate, replicate_rng

from conftest import write_paired_csv

SVG = "{http://www.w3.org/2000/svg}"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A directory holding data.csv and the fit.state fitted from it."""
    d = tmp_path_factory.mktemp("cli")
    write_paired_csv(d / "data.csv", generate(SimConfig(n_subjects=25, n_raters=6), replicate_rng(8, 0)))
    assert main(["fit", str(d / "data.csv"), "-o", str(d), "--no-timestamp"]) == 0
    return d


def _kv(path):
    out = {}
    for line in path.read_text().splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            out.setdefault(k, v)
    return out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_fit_report(workdir):
    kv = _kv(workdir / "fit.txt")
    assert kv["converged"] == "true"
    for key in ("beta_1", "beta_2", "theta", "se_beta_1", "sigma2_gamma", "rho", "se_rho", "residual_scale", "p_value"):
        assert key in kv
    assert (workdir / "fit.state").read_text().startswith("binagree-fit-state 1")


def test_timestamp_header_toggle(workdir, tmp_path):
    assert main(["validate", str(workdir / "data.csv"), "-o", str(tmp_path)]) == 0
    assert (tmp_path / "validate.txt").read_text().startswith("# generated ")
    assert main(["validate", str(workdir / "data.csv"), "-o", str(tmp_path), "--no-timestamp"]) == 0
    text = (tmp_path / "validate.txt").read_text()
    assert text.startswith("[DATA]") and "n_subjects = 25" in text


def test_state_consumers(workdir, tmp_path):
    state = str(workdir / "fit.state")
    for cmd in ("test", "icc", "kappa"):
        assert main([cmd, state, "-o", str(tmp_path), "--no-timestamp"]) == 0
    assert 0 <= float(_kv(tmp_path / "test.txt")["p_value"]) <= 1
    icc = _kv(tmp_path / "icc.txt")
    assert 0 < float(icc["icc_m1"]) <= 1
    text = (tmp_path / "kappa.txt").read_text()
    assert "[MODEL_KAPPA]" in text and "[NAIVE_KAPPA]" in text


def test_ba_outputs_and_svg(workdir, tmp_path):
    assert main(["ba", str(workdir / "fit.state"), "-o", str(tmp_path), "--no-timestamp", "--delta", "2"]) == 0
    rows = _rows(tmp_path / "ba.csv")
    assert rows[0] == ["subject_label", "avg", "diff"] and len(rows) == 26
    kv = _kv(tmp_path / "ba.txt")
    assert kv["n_subjects"] == "25" and kv["within_margin"] in ("true", "false")
    root = ET.parse(tmp_path / "ba.svg").getroot()
    groups = {g.get("id"): g for g in root.iter(f"{SVG}g") if g.get("id")}
    assert len(list(groups["ba-points"].iter(f"{SVG}use"))) == 25
    for gid in ("ba-mean", "ba-loa-low", "ba-loa-high"):
        assert gid in groups
    assert "stroke-dasharray" in ET.tostring(groups["ba-mean"]).decode()


def _edited_state(workdir, tmp_path, **changes):
    fit, ds = report.load_fit_state((workdir / "fit.state").read_text())
    fit = dataclasses.replace(fit, **changes)
    path = tmp_path / "edited.state"
    path.write_text(report.dump_fit_state(fit, ds))
    return path


def test_ba_log_scale_drops_subjects(workdir, tmp_path, capsys):
    fit, _ = report.load_fit_state((workdir / "fit.state").read_text())
    gamma = fit.eblup_gamma.copy()
    gamma[[0, 3]] = -40.0
    path = _edited_state(workdir, tmp_path, eblup_gamma=gamma)
    assert main(["ba", str(path), "--scale", "log_probability", "-o", str(tmp_path), "--no-timestamp"]) == 0
    assert len(_rows(tmp_path / "ba.csv")) == 1 + 23
    assert _kv(tmp_path / "ba.txt")["n_dropped"] == "2"
    assert "dropping 2" in capsys.readouterr().err


def test_kappa_undefined_is_a_note(workdir, tmp_path):
    fit, _ = report.load_fit_state((workdir / "fit.state").read_text())
    fixed = dataclasses.replace(fit.fixed, beta_1=50.0, beta_2=50.0)
    path = _edited_state(workdir, tmp_path, fixed=fixed)
    assert main(["kappa", str(path), "-o", str(tmp_path), "--no-timestamp"]) == 0
    text = (tmp_path / "kappa.txt").read_text()
    assert "note = kappa undefined" in text


def test_nonconverged_fit_still_reports(workdir, tmp_path):
    code = main(["fit", str(workdir / "data.csv"), "--max-outer", "1", "--no-se", "-o", str(tmp_path), "--no-timestamp"])
    assert code == 0
    assert _kv(tmp_path / "fit.txt")["converged"] == "false"


def test_exit_codes(workdir, tmp_path):
    assert main([]) == 1
    assert main(["fit", str(workdir / "data.csv"), "--rater-effect", "maybe"]) == 1
    assert main(["fit", str(tmp_path / "missing.csv"), "-o", str(tmp_path)]) == 2
    assert main(["icc", str(tmp_path / "missing.state"), "-o", str(tmp_path)]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("id,time,method1,method2,rater1,rater2\nA,1,Yes,No,R1,R2\n")
    assert main(["validate", str(bad), "-o", str(tmp_path)]) == 2
    cfg = tmp_path / "x.cfg"
    cfg.write_text("no_such_key = 1\n")
    assert main(["simulate", "--config", str(cfg), "-o", str(tmp_path)]) == 1
    assert main(["power", "--grid", "2:0:1", "-o", str(tmp_path)]) == 1
    # a constant response leaves the working model singular
    const = tmp_path / "const.csv"
    const.write_text("id,time,method1,method2,rater1,rater2\n" + "".join(
        f"S{i},{t},Positive,Positive,R{t},R{t + 1}\n" for i in range(4) for t in range(1, 4)
    ))
    assert main(["fit", str(const), "-o", str(tmp_path), "--no-timestamp"]) == 3


def test_simulate_and_power(tmp_path, capsys):
    cfg = tmp_path / "small.cfg"
    cfg.write_text("# small campaign\nn_subjects = 20\nn_raters = 6\n")
    assert main(["simulate", "--config", str(cfg), "--replicates", "3", "--per-replicate", "-o", str(tmp_path)]) == 0
    assert "default seed 42" in capsys.readouterr().err
    rows = _rows(tmp_path / "simulate.csv")
    assert [r[0] for r in rows[1:]] == ["with_rater", "without_rater"]
    assert len(_rows(tmp_path / "replicates.csv")) == 1 + 6

    args = ["power", "--config", str(cfg), "--seed", "3", "--replicates", "10", "--grid", "1.6:0.6:2.2"]
    assert main(args + ["-o", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "power.csv")
    assert rows[0] == ["beta_1", "spec", "n_reps", "rejection_rate", "beta_diff", "n_converged"]
    assert len(rows) == 5
    assert {r[1] for r in rows[1:]} == {"with_rater", "without_rater"}
    np.testing.assert_allclose(sorted({float(r[4]) for r in rows[1:]}), [0.0, 0.6])
    root = ET.parse(tmp_path / "power.svg").getroot()
    ids = {g.get("id") for g in root.iter(f"{SVG}g")}
    assert {"power-with_rater", "power-without_rater", "power-alpha"} <= ids


def test_alpha_one_gives_full_rejection(tmp_path):
    cfg = tmp_path / "small.cfg"
    cfg.write_text("n_subjects = 20\nn_raters = 6\nseed = 1\n")
    assert main(["simulate", "--config", str(cfg), "--replicates", "2", "--alpha", "1", "--models", "with_rater",
                 "-o", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "simulate.csv")
    head = rows[0]
    assert float(rows[1][head.index("rejection_rate")]) == 1.0
