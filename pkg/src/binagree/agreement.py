"""Agreement summaries derived from a fitted GLMM.

Each subject is reduced to one latent value per method, built from the fitted
fixed effects and the EBLUPs.  Those pairs feed a Bland-Altman analysis (on
the latent, probability or log-probability scale) and a model-based Cohen's
kappa on the predicted 0-1 scores.  The naive kappa on the raw repeated pairs
and the per-method ICCs are provided for comparison.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy import special, stats

from .data import LongDataset
from .glmm import FitResult, VarianceComponents

__all__ = [
    "SubjectSummary",
    "BASummary",
    "KappaResult",
    "ICCResult",
    "LOA_MULTIPLIER",
    "SCALES",
    "eblup_summary",
    "ba_summary",
    "predicted_binary_scores",
    "contingency",
    "cohen_kappa",
    "model_kappa",
    "naive_kappa",
    "icc",
]

LOA_MULTIPLIER = 1.96
_LOG_PHI_FLOOR = math.log(1e-12)

SCALES = ("latent", "probability", "log_probability")
Scale = Literal["latent", "probability", "log_probability"]


@dataclass(frozen=True)
class SubjectSummary:
    """Latent per-subject value of each method.

    ``posterior_var_m1``/``_m2`` hold ``(1/s2_gamma + J/s2_alpha_m)^-1``, the
    conditional variance of the subject's latent mean given its summary.
    """

    subject_index: int
    mu_hat_m1: float
    mu_hat_m2: float
    label: str = ""
    posterior_var_m1: float = float("nan")
    posterior_var_m2: float = float("nan")

    def mu_hat(self, method: int) -> float:
        return self.mu_hat_m1 if method == 1 else self.mu_hat_m2


@dataclass(frozen=True)
class BASummary:
    scale: str
    subject_indices: tuple[int, ...]
    avg: np.ndarray
    diff: np.ndarray
    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float
    pct_within: float
    dropped: tuple[int, ...] = ()
    delta: float | None = None

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.avg.tolist(), self.diff.tolist()))

    @property
    def within_margin(self) -> bool | None:
        """Whether both limits lie inside the pre-specified ``[-delta, delta]``."""
        if self.delta is None:
            return None
        return bool(-self.delta <= self.loa_low and self.loa_high <= self.delta)

    @property
    def corr_avg_diff(self) -> float:
        """Sample correlation between averages and differences (NaN if degenerate)."""
        if self.avg.std() == 0 or self.diff.std() == 0:
            return float("nan")
        return float(np.corrcoef(self.avg, self.diff)[0, 1])


@dataclass(frozen=True)
class KappaResult:
    a: int
    b: int
    c: int
    d: int
    kappa: float
    std_error: float
    ci_low: float
    ci_high: float
    p_o: float
    p_e: float
    level: float = 0.95

    @property
    def n(self) -> int:
        return self.a + self.b + self.c + self.d


@dataclass(frozen=True)
class ICCResult:
    icc_m1: float
    icc_m2: float

    def __getitem__(self, method: int) -> float:
        return self.icc_m1 if method == 1 else self.icc_m2


def _posterior_var(vc: VarianceComponents, n_raters: int, method: int) -> float:
    s2g, s2a = vc.sigma2_gamma, vc.sigma2_alpha(method)
    if s2g <= 0 or s2a <= 0:
        return 0.0
    return 1.0 / (1.0 / s2g + n_raters / s2a)


def eblup_summary(
    fit: FitResult,
    ds: LongDataset,
    rater_average: Literal["subject", "all"] = "subject",
    reweight: bool = False,
) -> list[SubjectSummary]:
    """Per-subject latent means from the fixed effects and EBLUPs.

    ``mu_hat_im = beta_m + mean_t(theta * x_t) + gamma_i + abar_im`` where the
    time average runs over subject ``i``'s observed times.  With the default
    ``rater_average="subject"``, ``abar_im`` averages the rater EBLUPs over the
    raters that actually measured subject ``i`` with method ``m`` (one term per
    visit), so ``mu_hat_im`` is the subject's mean conditional linear
    predictor.  ``"all"`` averages over every rater instead; the rater term
    is then common to all subjects and the per-subject differences are
    constant.  ``reweight=True`` multiplies ``gamma_i + abar_im`` by
    ``J s2_gamma / (J s2_gamma + s2_alpha_m)``, the shrinkage of the latent
    conditional mean (redundant on EBLUPs, which are already shrunken).
    """
    if not fit.converged:
        warnings.warn("summarizing a non-converged fit", RuntimeWarning, stacklevel=2)
    if rater_average not in ("subject", "all"):
        raise ValueError(f"rater_average must be 'subject' or 'all', got {rater_average!r}")
    I, J = ds.n_subjects, ds.n_raters
    theta = fit.fixed.theta or 0.0
    beta = (fit.fixed.beta_1, fit.fixed.beta_2)
    alpha = fit.eblup_alpha
    gamma = fit.eblup_gamma

    # sum and count of rater EBLUPs per (subject, method)
    key = ds.subject * 2 + (ds.method - 1)
    count = np.bincount(key, minlength=2 * I).reshape(I, 2)
    a_obs = alpha[ds.rater, ds.method - 1]
    a_sum = np.bincount(key, weights=a_obs, minlength=2 * I).reshape(I, 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        abar_subject = np.where(count > 0, a_sum / count, 0.0)
    abar_all = alpha.mean(axis=0)

    # g(x_t) averaged over each subject's distinct observed times
    t_mean = np.array([ds.times_for(i).mean() for i in range(I)])

    out = []
    for i in range(I):
        mus = []
        for m in (1, 2):
            abar = abar_subject[i, m - 1] if rater_average == "subject" else abar_all[m - 1]
            rand = gamma[i] + abar
            if reweight:
                s2g, s2a = fit.vc.sigma2_gamma, fit.vc.sigma2_alpha(m)
                denom = J * s2g + s2a
                rand *= J * s2g / denom if denom > 0 else 1.0
            mus.append(beta[m - 1] + theta * t_mean[i] + rand)
        out.append(
            SubjectSummary(
                subject_index=i,
                mu_hat_m1=float(mus[0]),
                mu_hat_m2=float(mus[1]),
                label=ds.subject_labels[i],
                posterior_var_m1=_posterior_var(fit.vc, J, 1),
                posterior_var_m2=_posterior_var(fit.vc, J, 2),
            )
        )
    return out


def _transform(mu: np.ndarray, scale: str) -> np.ndarray:
    if scale == "latent":
        return mu
    if scale == "probability":
        return special.ndtr(mu)
    if scale == "log_probability":
        return special.log_ndtr(mu)
    raise ValueError(f"unknown scale {scale!r}")


def ba_summary(
    summaries: Sequence[SubjectSummary],
    scale: Scale = "latent",
    delta: float | None = None,
) -> BASummary:
    """Bland-Altman statistics of the paired subject summaries.

    Values are transformed per subject first (``Phi`` for the probability
    scale, ``log Phi`` for the log-probability scale), then averaged and
    differenced.  On the log scale, subjects with ``Phi(mu) < 1e-12`` for
    either method are dropped with a warning.

    Args:
        summaries: One entry per subject.
        scale: ``"latent"``, ``"probability"`` or ``"log_probability"``.
        delta: Optional clinical margin; reported against, never assumed.

    Raises:
        ValueError: Fewer than two usable subjects.
    """
    if delta is not None and not delta > 0:
        raise ValueError("delta must be positive")
    idx = np.array([s.subject_index for s in summaries], dtype=np.int64)
    mu = np.array([[s.mu_hat_m1, s.mu_hat_m2] for s in summaries], dtype=float).reshape(-1, 2)
    v = _transform(mu, scale)
    dropped: tuple[int, ...] = ()
    if scale == "log_probability":
        bad = (v < _LOG_PHI_FLOOR).any(axis=1)
        if bad.any():
            dropped = tuple(int(i) for i in idx[bad])
            warnings.warn(
                f"dropping {bad.sum()} subject(s) with Phi(mu) < 1e-12 on the log scale: "
                f"{list(dropped)}",
                RuntimeWarning,
                stacklevel=2,
            )
            v, idx = v[~bad], idx[~bad]
    if len(v) < 2:
        raise ValueError("Bland-Altman analysis needs at least 2 subjects")
    avg = v.mean(axis=1)
    diff = v[:, 0] - v[:, 1]
    xi = float(diff.mean())
    nu = float(diff.std(ddof=1))
    lo, hi = xi - LOA_MULTIPLIER * nu, xi + LOA_MULTIPLIER * nu
    inside = float(np.mean((diff >= lo) & (diff <= hi)))
    return BASummary(
        scale=scale,
        subject_indices=tuple(int(i) for i in idx),
        avg=avg,
        diff=diff,
        mean_diff=xi,
        sd_diff=nu,
        loa_low=lo,
        loa_high=hi,
        pct_within=inside,
        dropped=dropped,
        delta=delta,
    )


def predicted_binary_scores(summaries: Sequence[SubjectSummary]) -> list[tuple[int, int]]:
    """0-1 score per subject and method: 1 iff the latent summary is > 0."""
    return [(int(s.mu_hat_m1 > 0), int(s.mu_hat_m2 > 0)) for s in summaries]


def contingency(pairs) -> tuple[int, int, int, int]:
    """Cell counts ``(a, b, c, d)`` of (method 1, method 2) outcome pairs.

    ``a``: both 0; ``b``: method 1 positive only; ``c``: method 2 positive
    only; ``d``: both 1.
    """
    p = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    y1, y2 = p[:, 0], p[:, 1]
    a = int(((y1 == 0) & (y2 == 0)).sum())
    b = int(((y1 == 1) & (y2 == 0)).sum())
    c = int(((y1 == 0) & (y2 == 1)).sum())
    d = int(((y1 == 1) & (y2 == 1)).sum())
    return a, b, c, d


def cohen_kappa(a: int, b: int, c: int, d: int, level: float = 0.95) -> KappaResult:
    """Cohen's kappa of a 2x2 table with its large-sample standard error.

    The standard error is the Fleiss-Cohen-Everitt large-sample variance with
    the full marginal terms; the confidence interval is truncated to [-1, 1].

    Raises:
        ValueError: Negative counts, an empty table, or chance agreement of 1
            (both methods constant on the same category), where kappa is
            undefined.
    """
    counts = np.array([a, b, c, d])
    if (counts < 0).any():
        raise ValueError("counts must be non-negative")
    n = int(counts.sum())
    if n < 1:
        raise ValueError("empty contingency table")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    # rows: method 2 outcome, columns: method 1 outcome
    p = np.array([[a, b], [c, d]], dtype=float) / n
    row = p.sum(axis=1)
    col = p.sum(axis=0)
    p_o = float(np.trace(p))
    p_e = float(row @ col)
    if p_e >= 1.0:
        raise ValueError("kappa undefined: chance agreement p_e = 1 (constant outcomes)")
    kappa = (p_o - p_e) / (1.0 - p_e)

    q = 1.0 - kappa
    term1 = sum(p[i, i] * (1.0 - (row[i] + col[i]) * q) ** 2 for i in range(2))
    term2 = q * q * sum(p[i, j] * (col[i] + row[j]) ** 2 for i in range(2) for j in range(2) if i != j)
    term3 = (kappa - p_e * q) ** 2
    var = (term1 + term2 - term3) / (n * (1.0 - p_e) ** 2)
    se = math.sqrt(max(var, 0.0))
    if se == 0.0:
        warnings.warn("kappa standard error is 0: degenerate confidence interval", RuntimeWarning, stacklevel=2)
    z = float(stats.norm.ppf(0.5 + level / 2.0))
    return KappaResult(
        a=int(a),
        b=int(b),
        c=int(c),
        d=int(d),
        kappa=float(kappa),
        std_error=se,
        ci_low=max(-1.0, kappa - z * se),
        ci_high=min(1.0, kappa + z * se),
        p_o=p_o,
        p_e=p_e,
        level=level,
    )


def model_kappa(summaries: Sequence[SubjectSummary], level: float = 0.95) -> KappaResult:
    """Kappa on the predicted 0-1 scores, one pair per subject."""
    return cohen_kappa(*contingency(predicted_binary_scores(summaries)), level=level)


def naive_kappa(ds: LongDataset, level: float = 0.95) -> KappaResult:
    """Kappa on the raw (method 1, method 2) pairs of every subject-time."""
    m1 = ds.method == 1
    k1 = dict(zip(zip(ds.subject[m1].tolist(), ds.time[m1].tolist()), ds.y[m1].tolist()))
    k2 = dict(zip(zip(ds.subject[~m1].tolist(), ds.time[~m1].tolist()), ds.y[~m1].tolist()))
    common = sorted(k1.keys() & k2.keys())
    if not common:
        raise ValueError("no (subject, time) has outcomes from both methods")
    if len(common) < max(len(k1), len(k2)):
        warnings.warn(
            f"{max(len(k1), len(k2)) - len(common)} unpaired record(s) ignored",
            RuntimeWarning,
            stacklevel=2,
        )
    pairs = [(k1[k], k2[k]) for k in common]
    return cohen_kappa(*contingency(pairs), level=level)


def icc(vc: VarianceComponents, residual_variance: float = 1.0) -> ICCResult:
    """Within-method ICC, ``(s2_gamma + 1) / (s2_gamma + s2_alpha_m + 1)``.

    The latent error variance of the probit model is 1; ``residual_variance``
    substitutes another value (for instance an estimated residual scale).
    """
    s2g = vc.sigma2_gamma
    vals = []
    for m in (1, 2):
        s2a = vc.sigma2_alpha(m)
        if min(s2g, s2a) < 0 or residual_variance <= 0:
            raise ValueError("variances must be non-negative")
        vals.append((s2g + residual_variance) / (s2g + s2a + residual_variance))
    return ICCResult(*vals)
