"""Command-line front end.

Subcommands::

    validate  data summary and quality flags for a paired CSV
    fit       fit the GLMM; writes fit.txt and fit.state
    test      Wald test of equal method effects from fit.state
    ba        Bland-Altman CSV, summary and SVG from fit.state
    kappa     model-based and naive Cohen's kappa from fit.state
    icc       per-method ICCs from fit.state
    simulate  Monte Carlo recovery/size campaign
    power     power curve over a grid of beta_1 values

Exit codes: 0 success (also for a non-converged fit, which is reported with a
warning), 1 usage or configuration error, 2 input/output error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import agreement, report
from .data import DEFAULT_COLUMNS, DataError, read_wide_csv, validate, widen_to_long
from .glmm import FitError, FitOptions, ModelSpec, fit, wald_test
from .report import ConfigError
from .simulation import (
    ESTIMATE_FIELDS,
    CampaignError,
    SimConfig,
    beta_grid,
    run_replicates,
    summarize,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_SEED = 42
STATE_FILE = "fit.state"
CAMPAIGN_KEYS = ("replicates", "alpha", "jobs", "grid_start", "grid_step", "grid_stop", "models")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("-o", "--out", default=".", help="output directory (created if absent)")
    p.add_argument("--no-timestamp", action="store_true", help="omit the timestamp header line")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("input", help="paired (wide) CSV file")
    p.add_argument("--positive", default="Positive", help="outcome label coded as 1")
    p.add_argument("--negative", default="Negative", help="outcome label coded as 0")
    for key, default in DEFAULT_COLUMNS.items():
        p.add_argument(f"--col-{key.replace('_', '-')}", dest=f"col_{key}", default=default,
                       help=f"column name (default {default!r})")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--time-trend", choices=("none", "linear"))
    p.add_argument("--residual-correlation", choices=("independent", "ar1"))
    p.add_argument("--rater-effect", choices=("included", "omitted"))
    p.add_argument("--residual-scale", choices=("fixed", "estimated"))
    p.add_argument("--tol", type=float)
    p.add_argument("--max-outer", type=int)
    p.add_argument("--level", type=float, help="confidence level (default 0.95)")


def _add_state(p: argparse.ArgumentParser) -> None:
    p.add_argument("state", nargs="?", default=STATE_FILE, help=f"fit state file (default {STATE_FILE})")


def _add_campaign(p: argparse.ArgumentParser, default_reps: int) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--replicates", type=int, help=f"replicates per campaign (default {default_reps})")
    p.add_argument("--alpha", type=float, help="test level (default 0.05)")
    p.add_argument("--jobs", type=int, help="worker processes (default 1)")
    p.add_argument("--models", choices=("both", "with_rater", "without_rater"),
                   help="models to fit (default both)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="binagree", description="Agreement of two binary methods with repeated measurements.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="summarize and check a paired CSV")
    _add_data(p)
    _add_output(p)

    p = sub.add_parser("fit", help="fit the probit GLMM")
    _add_data(p)
    _add_model(p)
    _add_output(p)
    p.add_argument("--no-se", action="store_true", help="skip variance-component standard errors")

    p = sub.add_parser("test", help="Wald test of beta_1 = beta_2")
    _add_state(p)
    p.add_argument("--level", type=float, default=0.95)
    _add_output(p)

    p = sub.add_parser("ba", help="Bland-Altman analysis")
    _add_state(p)
    p.add_argument("--scale", default="latent", choices=tuple(agreement.SCALES))
    p.add_argument("--delta", type=float, help="pre-specified agreement margin")
    p.add_argument("--rater-average", choices=("subject", "all"), default="subject")
    p.add_argument("--reweight", action="store_true", help="apply the conditional-mean shrinkage weight")
    p.add_argument("--no-plot", action="store_true")
    _add_output(p)

    p = sub.add_parser("kappa", help="model-based and naive Cohen's kappa")
    _add_state(p)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--rater-average", choices=("subject", "all"), default="subject")
    _add_output(p)

    p = sub.add_parser("icc", help="per-method intraclass correlations")
    _add_state(p)
    _add_output(p)

    p = sub.add_parser("simulate", help="Monte Carlo recovery and size campaign")
    _add_campaign(p, 200)
    p.add_argument("--per-replicate", action="store_true", help="also write replicates.csv")
    _add_output(p)

    p = sub.add_parser("power", help="power curve over beta_1")
    _add_campaign(p, 200)
    p.add_argument("--grid", help="start:step:stop (default 1.6:0.1:2.8)")
    p.add_argument("--per-replicate", action="store_true", help="also write replicates.csv")
    p.add_argument("--no-plot", action="store_true")
    _add_output(p)
    return parser


# -- helpers -----------------------------------------------------------------


def _notice(msg: str) -> None:
    print(f"binagree: {msg}", file=sys.stderr)


def _header(args) -> str | None:
    if args.no_timestamp:
        return None
    return "generated " + datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _require_file(path: str) -> None:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"input not found: {path}")


def _load_config(args, allowed: Sequence[str]) -> dict[str, str]:
    if not getattr(args, "config", None):
        return {}
    _require_file(args.config)
    cfg = report.read_config(args.config)
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    return cfg


def _field_names(*classes) -> list[str]:
    return [name for cls in classes for name in report.config_fields(cls)]


def _read_dataset(args):
    _require_file(args.input)
    cols = {k: getattr(args, f"col_{k}") for k in DEFAULT_COLUMNS}
    paired = read_wide_csv(
        args.input, label_positive=args.positive, label_negative=args.negative, columns=cols
    )
    return widen_to_long(paired)


def _load_state(args):
    _require_file(args.state)
    with open(args.state, encoding="utf-8") as fh:
        return report.load_fit_state(fh.read())


def _glmm_section(res) -> dict:
    se = res.fixed.std_errors
    vc = res.vc
    out = {
        "beta_1": res.fixed.beta_1,
        "beta_2": res.fixed.beta_2,
        "theta": res.fixed.theta,
        "se_beta_1": se[0],
        "se_beta_2": se[1],
        "se_theta": se[2] if res.fixed.theta is not None else None,
        "sigma2_gamma": vc.sigma2_gamma,
        "sigma2_alpha1": vc.sigma2_alpha1,
        "sigma2_alpha2": vc.sigma2_alpha2,
        "rho": vc.rho,
        "se_sigma2_gamma": vc.se_sigma2_gamma,
        "se_sigma2_alpha1": vc.se_sigma2_alpha1,
        "se_sigma2_alpha2": vc.se_sigma2_alpha2,
        "se_rho": vc.se_rho,
        "residual_scale": vc.scale,
        "converged": res.converged,
        "n_iter": res.n_outer_iterations,
        "final_change": res.final_change,
        "reml_criterion": res.reml_criterion,
    }
    if res.spec.rater_effect == "omitted":
        for k in ("sigma2_alpha1", "sigma2_alpha2"):
            out[k] = None
    return out


def _test_section(t) -> dict:
    return {
        "estimate": t.estimate,
        "std_error": t.std_error,
        "z": t.statistic,
        "p_value": t.p_value,
        "level": t.level,
        "ci_low": t.ci_low,
        "ci_high": t.ci_high,
    }


def _kappa_section(k) -> dict:
    return {
        "a": k.a,
        "b": k.b,
        "c": k.c,
        "d": k.d,
        "n": k.n,
        "p_o": k.p_o,
        "p_e": k.p_e,
        "kappa": k.kappa,
        "std_error": k.std_error,
        "level": k.level,
        "ci_low": k.ci_low,
        "ci_high": k.ci_high,
    }


def _kappa_or_note(fn, *args, **kw) -> dict:
    try:
        return _kappa_section(fn(*args, **kw))
    except ValueError as exc:
        _notice(f"warning: {exc}")
        return {"kappa": float("nan"), "note": str(exc)}


# -- subcommands -------------------------------------------------------------


def cmd_validate(args) -> int:
    ds = _read_dataset(args)
    rep = validate(ds)
    out = _outdir(args)
    _write_text(out / "validate.txt", report.format_report([("DATA", rep.as_dict())], _header(args)))
    for flag in rep.flags:
        _notice(f"warning: {flag}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _load_config(args, _field_names(ModelSpec, FitOptions))
    spec = report.typed_section(
        ModelSpec,
        cfg,
        time_trend=args.time_trend,
        residual_correlation=args.residual_correlation,
        rater_effect=args.rater_effect,
        residual_scale=args.residual_scale,
    )
    opts = report.typed_section(
        FitOptions,
        cfg,
        tol=args.tol,
        max_outer=args.max_outer,
        level=args.level,
        compute_se=False if args.no_se else None,
    )
    ds = _read_dataset(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = fit(ds, spec, opts)
        test = wald_test(res, opts.level)
    for w in caught:
        _notice(f"warning: {w.message}")
    out = _outdir(args)
    data = {"n_records": len(ds), "n_subjects": ds.n_subjects, "n_raters": ds.n_raters}
    sections = [("DATA", data), ("GLMM", _glmm_section(res)), ("TEST", _test_section(test))]
    _write_text(out / "fit.txt", report.format_report(sections, _header(args)))
    _write_text(out / STATE_FILE, report.dump_fit_state(res, ds))
    return EXIT_OK


def cmd_test(args) -> int:
    res, _ = _load_state(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        t = wald_test(res, args.level)
    for w in caught:
        _notice(f"warning: {w.message}")
    out = _outdir(args)
    _write_text(out / "test.txt", report.format_report([("TEST", _test_section(t))], _header(args)))
    return EXIT_OK


def cmd_ba(args) -> int:
    res, ds = _load_state(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        summ = agreement.eblup_summary(res, ds, rater_average=args.rater_average, reweight=args.reweight)
        ba = agreement.ba_summary(summ, args.scale, args.delta)
    for w in caught:
        _notice(f"warning: {w.message}")
    out = _outdir(args)
    labels = {s.subject_index: s.label for s in summ}
    rows = [(labels[i], a, d) for i, a, d in zip(ba.subject_indices, ba.avg, ba.diff)]
    report.write_csv(out / "ba.csv", ("subject_label", "avg", "diff"), rows)
    summary = {
        "scale": ba.scale,
        "n_subjects": len(ba.subject_indices),
        "n_dropped": len(ba.dropped),
        "mean_diff": ba.mean_diff,
        "sd_diff": ba.sd_diff,
        "loa_multiplier": agreement.LOA_MULTIPLIER,
        "loa_low": ba.loa_low,
        "loa_high": ba.loa_high,
        "pct_within": ba.pct_within,
        "corr_avg_diff": ba.corr_avg_diff,
    }
    if ba.delta is not None:
        summary["delta"] = ba.delta
        summary["within_margin"] = ba.within_margin
    _write_text(out / "ba.txt", report.format_report([("BLAND_ALTMAN", summary)], _header(args)))
    if not args.no_plot:
        from . import plotting

        plotting.save_svg(plotting.ba_figure(ba), out / "ba.svg")
    return EXIT_OK


def cmd_kappa(args) -> int:
    res, ds = _load_state(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        summ = agreement.eblup_summary(res, ds, rater_average=args.rater_average)
        model = _kappa_or_note(agreement.model_kappa, summ, level=args.level)
        naive = _kappa_or_note(agreement.naive_kappa, ds, level=args.level)
    for w in caught:
        _notice(f"warning: {w.message}")
    out = _outdir(args)
    sections = [("MODEL_KAPPA", model), ("NAIVE_KAPPA", naive)]
    _write_text(out / "kappa.txt", report.format_report(sections, _header(args)))
    return EXIT_OK


def cmd_icc(args) -> int:
    res, _ = _load_state(args)
    ic = agreement.icc(res.vc)
    out = _outdir(args)
    vals = {
        "sigma2_gamma": res.vc.sigma2_gamma,
        "sigma2_alpha1": res.vc.sigma2_alpha1,
        "sigma2_alpha2": res.vc.sigma2_alpha2,
        "icc_m1": ic.icc_m1,
        "icc_m2": ic.icc_m2,
    }
    _write_text(out / "icc.txt", report.format_report([("ICC", vals)], _header(args)))
    return EXIT_OK


def _campaign_setup(args, default_reps: int):
    allowed = _field_names(SimConfig, ModelSpec, FitOptions) + list(CAMPAIGN_KEYS)
    cfg = _load_config(args, allowed)
    seed = args.seed
    if seed is None and "seed" not in cfg:
        seed = DEFAULT_SEED
        _notice(f"no seed given; using default seed {DEFAULT_SEED}")
    sim = report.typed_section(SimConfig, cfg, seed=seed)
    base = report.typed_section(ModelSpec, cfg)
    reps = args.replicates if args.replicates is not None else int(cfg.get("replicates", default_reps))
    alpha = args.alpha if args.alpha is not None else float(cfg.get("alpha", 0.05))
    jobs = args.jobs if args.jobs is not None else int(cfg.get("jobs", 1))
    models = args.models or cfg.get("models", "both")
    if reps < 1:
        raise UsageError("--replicates must be >= 1")
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    if not 0 < alpha <= 1:
        raise UsageError("--alpha must be in (0, 1]")
    specs = {
        "with_rater": dataclasses.replace(base, rater_effect="included"),
        "without_rater": dataclasses.replace(base, rater_effect="omitted"),
    }
    if models not in ("both", *specs):
        raise ConfigError(f"models must be both, with_rater or without_rater, got {models!r}")
    if models != "both":
        specs = {models: specs[models]}
    return cfg, sim, specs, reps, alpha, jobs


def _replicate_rows(records_by_model, beta_1=None):
    fields = [f.name for f in dataclasses.fields(next(iter(records_by_model.values()))[0])]
    header = (["beta_1"] if beta_1 is not None else []) + fields
    rows = []
    for recs in records_by_model.values():
        for r in recs:
            vals = [getattr(r, f) for f in fields]
            rows.append(([beta_1] if beta_1 is not None else []) + vals)
    return header, rows


def cmd_simulate(args) -> int:
    _, sim, specs, reps, alpha, jobs = _campaign_setup(args, 200)
    recs = run_replicates(sim, reps, specs, alpha, jobs)
    results = {name: summarize(sim, name, r) for name, r in recs.items()}
    out = _outdir(args)
    header = ["model", "n_replicates", "n_converged", "alpha", "rejection_rate"]
    header += [f"{s}_{f}" for f in ESTIMATE_FIELDS for s in ("mean", "sd")]
    rows = []
    for name, res in results.items():
        row = [name, res.n_replicates, res.n_converged, alpha, res.rejection_rate]
        row += [v for f in ESTIMATE_FIELDS for v in (res.mean[f], res.sd[f])]
        rows.append(row)
    report.write_csv(out / "simulate.csv", header, rows)
    if args.per_replicate:
        report.write_csv(out / "replicates.csv", *_replicate_rows(recs))
    cfg_section = {k: v for k, v in dataclasses.asdict(sim).items() if k != "times"}
    sections = [("SIMULATION", {**cfg_section, "replicates": reps, "alpha": alpha})]
    for name, res in results.items():
        sections.append((name.upper(), {"n_converged": res.n_converged, "rejection_rate": res.rejection_rate,
                                        **{f"mean_{f}": res.mean[f] for f in ESTIMATE_FIELDS}}))
    _write_text(out / "simulate.txt", report.format_report(sections, _header(args)))
    return EXIT_OK


def _parse_grid(text: str) -> list[float]:
    try:
        start, step, stop = (float(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"--grid expects start:step:stop, got {text!r}") from None
    if step <= 0 or stop < start:
        raise UsageError("--grid needs step > 0 and stop >= start")
    return beta_grid(start, stop, step)


def cmd_power(args) -> int:
    cfg, sim, specs, reps, alpha, jobs = _campaign_setup(args, 200)
    if args.grid:
        grid = _parse_grid(args.grid)
    else:
        grid = beta_grid(
            float(cfg.get("grid_start", 1.6)), float(cfg.get("grid_stop", 2.8)), float(cfg.get("grid_step", 0.1))
        )
    rows = []
    per_rep_rows: list = []
    per_rep_header: list = []
    curves: dict[str, list[float]] = {name: [] for name in specs}
    for b1 in grid:
        cfg_b = dataclasses.replace(sim, beta_1=b1)
        recs = run_replicates(cfg_b, reps, specs, alpha, jobs)
        for name, r in recs.items():
            res = summarize(cfg_b, name, r)
            rows.append([b1, name, res.n_replicates, res.rejection_rate, b1 - sim.beta_2, res.n_converged])
            curves[name].append(res.rejection_rate)
        if args.per_replicate:
            per_rep_header, more = _replicate_rows(recs, b1)
            per_rep_rows += more
    out = _outdir(args)
    report.write_csv(
        out / "power.csv", ("beta_1", "spec", "n_reps", "rejection_rate", "beta_diff", "n_converged"), rows
    )
    if args.per_replicate:
        report.write_csv(out / "replicates.csv", per_rep_header, per_rep_rows)
    if not args.no_plot:
        from . import plotting

        diffs = [b - sim.beta_2 for b in grid]
        plotting.save_svg(plotting.power_figure(diffs, curves, alpha), out / "power.svg")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "fit": cmd_fit,
    "test": cmd_test,
    "ba": cmd_ba,
    "kappa": cmd_kappa,
    "icc": cmd_icc,
    "simulate": cmd_simulate,
    "power": cmd_power,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _notice(f"error: {exc}")
        return EXIT_USAGE
    except ConfigError as exc:
        _notice(f"configuration error: {exc}")
        return EXIT_USAGE
    except FileNotFoundError as exc:
        msg = str(exc) if str(exc).startswith("input not found") else f"input not found: {exc.filename}"
        _notice(f"error: {msg}")
        return EXIT_IO
    except (DataError, OSError) as exc:
        _notice(f"error: {exc}")
        return EXIT_IO
    except (FitError, CampaignError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        _notice(f"numerical failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
