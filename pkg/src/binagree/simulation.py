"""Synthetic data from the probit GLMM and Monte Carlo campaigns.

Every replicate draws from its own Philox stream keyed by (seed, replicate),
so campaign results do not depend on execution order or worker count.  Grid
campaigns reuse the same replicate streams at each grid point (common random
numbers), which keeps power curves smooth.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .data import LongDataset
from .glmm import FitError, FitOptions, ModelSpec, ar1_matrix, fit, wald_test
from . import agreement

__all__ = [
    "SimConfig",
    "ReplicateRecord",
    "SimCampaignResult",
    "CampaignError",
    "MODEL_1",
    "MODEL_2",
    "replicate_rng",
    "generate",
    "generate_with_effects",
    "run_replicates",
    "run_recovery",
    "run_size_power",
    "power_grid",
    "beta_grid",
    "summarize",
    "DEFAULT_SPECS",
]


class CampaignError(RuntimeError):
    """Too many replicates failed to converge."""


@dataclass(frozen=True)
class SimConfig:
    n_subjects: int = 100
    n_raters: int = 30
    n_times: int = 5
    beta_1: float = 1.6
    beta_2: float = 1.6
    time_slope: float = -0.5
    sigma2_gamma: float = 0.8
    sigma2_alpha1: float = 0.2
    sigma2_alpha2: float = 0.4
    rho: float = 0.1
    seed: int = 42
    times: tuple[tuple[float, ...], ...] | None = None
    rater_assignment: str = "fresh"  # fresh pair per visit, or "persistent"

    def __post_init__(self):
        if self.n_subjects < 2 or self.n_raters < 2:
            raise ValueError("n_subjects and n_raters must be >= 2")
        if self.n_times < 1:
            raise ValueError("n_times must be >= 1")
        if min(self.sigma2_gamma, self.sigma2_alpha1, self.sigma2_alpha2) < 0:
            raise ValueError("variances must be >= 0")
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be < 1")
        if self.times is not None and len(self.times) != self.n_subjects:
            raise ValueError("times must list one time vector per subject")
        if self.rater_assignment not in ("fresh", "persistent"):
            raise ValueError(f"unknown rater_assignment {self.rater_assignment!r}")

    def subject_times(self, i: int) -> np.ndarray:
        if self.times is not None:
            return np.sort(np.asarray(self.times[i], dtype=float))
        return np.arange(1, self.n_times + 1, dtype=float)


MODEL_1 = SimConfig()
MODEL_2 = SimConfig(beta_1=2.2)


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Independent counter-based stream for one replicate."""
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(replicate),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class TrueEffects:
    gamma: np.ndarray
    alpha: np.ndarray  # (J, 2)
    latent_error: np.ndarray  # aligned with the dataset's records


def generate_with_effects(config: SimConfig, rng: np.random.Generator):
    """Simulate one dataset; also returns the generating random effects."""
    I, J = config.n_subjects, config.n_raters
    gamma = rng.normal(0.0, math.sqrt(config.sigma2_gamma), I)
    alpha = np.column_stack(
        [
            rng.normal(0.0, math.sqrt(config.sigma2_alpha1), J),
            rng.normal(0.0, math.sqrt(config.sigma2_alpha2), J),
        ]
    )
    beta = (config.beta_1, config.beta_2)
    chol_cache: dict[tuple, np.ndarray] = {}
    subject, rater, method, time, y, err = [], [], [], [], [], []
    for i in range(I):
        t = config.subject_times(i)
        key = tuple(t)
        L = chol_cache.get(key)
        if L is None:
            L = chol_cache[key] = np.linalg.cholesky(ar1_matrix(t, config.rho))
        T = len(t)
        if config.rater_assignment == "persistent":
            j1 = np.full(T, rng.integers(J))
            j2 = np.full(T, (j1[0] + 1 + rng.integers(J - 1)) % J)
        else:
            j1 = rng.integers(J, size=T)
            j2 = (j1 + 1 + rng.integers(J - 1, size=T)) % J
        for m, jm in ((1, j1), (2, j2)):
            e = L @ rng.standard_normal(T)
            mu = beta[m - 1] + config.time_slope * t + gamma[i] + alpha[jm, m - 1]
            subject.append(np.full(T, i))
            rater.append(jm)
            method.append(np.full(T, m))
            time.append(t)
            y.append((mu + e > 0).astype(np.int64))
            err.append(e)
    subject = np.concatenate(subject)
    rater = np.concatenate(rater)
    # relabel raters densely; unused raters (possible for small I*T) are dropped
    used, rater_dense = np.unique(rater, return_inverse=True)
    ds = LongDataset.from_arrays(
        subject,
        rater_dense,
        np.concatenate(method),
        np.concatenate(time),
        np.concatenate(y),
        rater_labels=[f"R{j}" for j in used],
    )
    # generation order is already (subject, method, time) sorted
    return ds, TrueEffects(gamma, alpha[used], np.concatenate(err))


def generate(config: SimConfig, rng: np.random.Generator) -> LongDataset:
    return generate_with_effects(config, rng)[0]


@dataclass(frozen=True)
class ReplicateRecord:
    """Estimates and derived metrics of one fitted replicate."""

    replicate: int
    model: str
    converged: bool
    beta_1: float = math.nan
    beta_2: float = math.nan
    theta: float = math.nan
    sigma2_gamma: float = math.nan
    sigma2_alpha1: float = math.nan
    sigma2_alpha2: float = math.nan
    rho: float = math.nan
    scale: float = math.nan
    icc_1: float = math.nan
    icc_2: float = math.nan
    diff_estimate: float = math.nan
    diff_se: float = math.nan
    p_value: float = math.nan
    reject: bool = False
    ba_mean_diff: float = math.nan
    ba_sd_diff: float = math.nan
    ba_corr: float = math.nan
    ba_pct_within: float = math.nan
    kappa_model: float = math.nan
    kappa_naive: float = math.nan
    n_outer: int = 0
    error: str = ""


ESTIMATE_FIELDS = (
    "beta_1",
    "beta_2",
    "theta",
    "sigma2_gamma",
    "sigma2_alpha1",
    "sigma2_alpha2",
    "rho",
    "scale",
    "icc_1",
    "icc_2",
    "diff_estimate",
    "ba_mean_diff",
    "ba_sd_diff",
    "ba_corr",
    "ba_pct_within",
    "kappa_model",
    "kappa_naive",
)


@dataclass(frozen=True)
class SimCampaignResult:
    """Aggregate of one model fitted over a set of replicates.

    Means and standard deviations run over converged replicates only.
    """

    config: SimConfig
    model: str
    n_replicates: int
    n_converged: int
    rejection_rate: float
    mean: dict[str, float]
    sd: dict[str, float]
    records: tuple[ReplicateRecord, ...] = field(default=(), repr=False)

    @property
    def n_failed(self) -> int:
        return self.n_replicates - self.n_converged

    @property
    def mean_icc_1(self) -> float:
        return self.mean["icc_1"]

    @property
    def mean_icc_2(self) -> float:
        return self.mean["icc_2"]


DEFAULT_SPECS = {
    "with_rater": ModelSpec(),
    "without_rater": ModelSpec(rater_effect="omitted"),
}
_CAMPAIGN_OPTS = FitOptions(compute_se=False)


def _safe(fn, *args) -> float:
    try:
        return float(fn(*args))
    except (ValueError, FloatingPointError):
        return math.nan


def _fit_record(ds: LongDataset, rep: int, name: str, spec: ModelSpec, alpha: float) -> ReplicateRecord:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            res = fit(ds, spec, _CAMPAIGN_OPTS)
            test = wald_test(res)
        except FitError as exc:
            return ReplicateRecord(rep, name, False, error=str(exc))
        summ = agreement.eblup_summary(res, ds)
        ba = agreement.ba_summary(summ)
        ic = agreement.icc(res.vc)
        k_model = _safe(lambda: agreement.model_kappa(summ).kappa)
        k_naive = _safe(lambda: agreement.naive_kappa(ds).kappa)
    v = res.vc
    return ReplicateRecord(
        replicate=rep,
        model=name,
        converged=res.converged,
        beta_1=res.fixed.beta_1,
        beta_2=res.fixed.beta_2,
        theta=math.nan if res.fixed.theta is None else res.fixed.theta,
        sigma2_gamma=v.sigma2_gamma,
        sigma2_alpha1=v.sigma2_alpha1,
        sigma2_alpha2=v.sigma2_alpha2,
        rho=v.rho,
        scale=v.scale,
        icc_1=ic.icc_m1,
        icc_2=ic.icc_m2,
        diff_estimate=test.estimate,
        diff_se=test.std_error,
        p_value=test.p_value,
        reject=bool(test.p_value <= alpha),
        ba_mean_diff=ba.mean_diff,
        ba_sd_diff=ba.sd_diff,
        ba_corr=ba.corr_avg_diff,
        ba_pct_within=ba.pct_within,
        kappa_model=k_model,
        kappa_naive=k_naive,
        n_outer=res.n_outer_iterations,
    )


def _replicate_task(args) -> list[ReplicateRecord]:
    config, rep, specs, alpha = args
    ds = generate(config, replicate_rng(config.seed, rep))
    return [_fit_record(ds, rep, name, spec, alpha) for name, spec in specs]


def run_replicates(
    config: SimConfig,
    n_replicates: int,
    specs: dict[str, ModelSpec] | None = None,
    alpha: float = 0.05,
    jobs: int = 1,
) -> dict[str, list[ReplicateRecord]]:
    """Generate and fit ``n_replicates`` datasets with every model in ``specs``.

    Each replicate's dataset is fitted by all models, and replicate ``r``
    always uses stream ``(config.seed, r)``; records come back in replicate
    order whatever ``jobs`` is.
    """
    if n_replicates < 1:
        raise ValueError("n_replicates must be >= 1")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    specs = dict(specs or DEFAULT_SPECS)
    items = tuple(specs.items())
    tasks = [(config, rep, items, alpha) for rep in range(n_replicates)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_replicate_task, tasks, chunksize=max(1, n_replicates // (4 * jobs))))
    else:
        results = [_replicate_task(t) for t in tasks]
    out: dict[str, list[ReplicateRecord]] = {name: [] for name in specs}
    for recs in results:
        for rec in recs:
            out[rec.model].append(rec)
    return out


def summarize(
    config: SimConfig, model: str, records: Sequence[ReplicateRecord], max_failure: float = 0.10
) -> SimCampaignResult:
    """Aggregate replicate records.

    Raises:
        CampaignError: More than ``max_failure`` of the replicates failed to
            converge.
    """
    n = len(records)
    ok = [r for r in records if r.converged]
    failed = n - len(ok)
    if failed > max_failure * n:
        raise CampaignError(
            f"{failed} of {n} replicates failed to converge for model {model!r} "
            f"(limit {max_failure:.0%})"
        )
    mean, sd = {}, {}
    for name in ESTIMATE_FIELDS:
        vals = np.array([getattr(r, name) for r in ok], dtype=float)
        vals = vals[np.isfinite(vals)]
        mean[name] = float(vals.mean()) if len(vals) else math.nan
        sd[name] = float(vals.std(ddof=1)) if len(vals) > 1 else math.nan
    rate = float(np.mean([r.reject for r in ok])) if ok else math.nan
    return SimCampaignResult(config, model, n, len(ok), rate, mean, sd, tuple(records))


def run_recovery(
    config: SimConfig,
    n_replicates: int = 200,
    fit_spec: ModelSpec | None = None,
    alpha: float = 0.05,
    jobs: int = 1,
) -> SimCampaignResult:
    """Parameter-recovery campaign for one model (default: the full model)."""
    recs = run_replicates(config, n_replicates, {"with_rater": fit_spec or ModelSpec()}, alpha, jobs)
    return summarize(config, "with_rater", recs["with_rater"])


def run_size_power(
    config: SimConfig,
    n_replicates: int = 300,
    fit_specs: dict[str, ModelSpec] | None = None,
    alpha: float = 0.05,
    jobs: int = 1,
) -> dict[str, SimCampaignResult]:
    """Rejection rate of the equal-method-effect test for each model."""
    recs = run_replicates(config, n_replicates, fit_specs, alpha, jobs)
    return {name: summarize(config, name, r) for name, r in recs.items()}


def beta_grid(start: float = 1.6, stop: float = 2.8, step: float = 0.1) -> list[float]:
    """Inclusive grid of beta_1 values, rounded to suppress float drift."""
    n = int(round((stop - start) / step))
    return [round(start + k * step, 10) for k in range(n + 1)]


def power_grid(
    config: SimConfig,
    beta_1_values: Iterable[float] | None = None,
    n_replicates: int = 200,
    fit_specs: dict[str, ModelSpec] | None = None,
    alpha: float = 0.05,
    jobs: int = 1,
) -> list[tuple[float, dict[str, SimCampaignResult]]]:
    """Power curve over beta_1 with common random numbers across grid points."""
    values = beta_grid() if beta_1_values is None else [float(b) for b in beta_1_values]
    return [
        (b1, run_size_power(replace(config, beta_1=b1), n_replicates, fit_specs, alpha, jobs))
        for b1 in values
    ]
