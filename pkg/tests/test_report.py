import dataclasses

import numpy as np
import pytest

from binagree import glmm, report
from binagree.glmm import FitOptions, ModelSpec
from binagree.simulation import SimConfig, generate, replicate_rng


def test_parse_config():
    cfg = report.parse_config("# comment\nn_subjects = 20\n\nrho = 0.3  # trailing\n")
    assert cfg == {"n_subjects": "20", "rho": "0.3"}
    with pytest.raises(report.ConfigError, match="duplicate"):
        report.parse_config("a = 1\na = 2\n")
    with pytest.raises(report.ConfigError, match="key = value"):
        report.parse_config("just words\n")


def test_typed_section():
    sim = report.typed_section(SimConfig, {"n_subjects": "20", "rho": "0.3", "other": "x"}, seed=5)
    assert (sim.n_subjects, sim.rho, sim.seed) == (20, 0.3, 5)
    opts = report.typed_section(FitOptions, {"compute_se": "false"})
    assert opts.compute_se is False
    with pytest.raises(report.ConfigError, match="int"):
        report.typed_section(SimConfig, {"n_subjects": "many"})
    with pytest.raises(report.ConfigError):
        report.typed_section(SimConfig, {"rho": "1.5"})
    assert "fixed_vc" not in report.config_fields(FitOptions)


def test_format_report():
    text = report.format_report([("A", {"x": 1.5, "ok": True, "n": np.int64(3)}), ("B", {"v": float("nan")})], "hdr")
    assert text == "# hdr\n\n[A]\nx = 1.5\nok = true\nn = 3\n\n[B]\nv = nan\n"


def test_fit_state_round_trip():
    ds = generate(SimConfig(n_subjects=15, n_raters=5), replicate_rng(1, 0))
    fit = glmm.fit(ds, ModelSpec(), FitOptions(compute_se=False))
    text = report.dump_fit_state(fit, ds)
    assert text.startswith("binagree-fit-state 1\n")
    fit2, ds2 = report.load_fit_state(text)
    np.testing.assert_array_equal(dataclasses.astuple(fit2.vc), dataclasses.astuple(fit.vc))
    assert fit2.spec == fit.spec
    np.testing.assert_array_equal(fit2.fixed.cov, fit.fixed.cov)
    np.testing.assert_array_equal(fit2.eblup_alpha, fit.eblup_alpha)
    np.testing.assert_array_equal(ds2.y, ds.y)
    assert ds2.rater_labels == ds.rater_labels
    assert report.dump_fit_state(fit2, ds2) == text


def test_fit_state_rejects_bad_input():
    with pytest.raises(report.ConfigError, match="not a fit-state"):
        report.load_fit_state("hello\n")
    with pytest.raises(report.ConfigError, match="version"):
        report.load_fit_state("binagree-fit-state 9\n")
    with pytest.raises(report.ConfigError, match="incomplete"):
        report.load_fit_state("binagree-fit-state 1\nfixed.beta_1 = 1.0\n")


def test_write_csv(tmp_path):
    p = tmp_path / "x.csv"
    report.write_csv(p, ["a", "b"], [["s,1", 0.25], ["t", float("nan")]])
    assert p.read_bytes() == b'a,b\r\n"s,1",0.25\r\nt,nan\r\n'
