"""Probit GLMM for paired binary measurements from two methods.

The model on the latent scale is

    latent = beta_m + theta * x_t + gamma_i + alpha_jm + eps,

with subject effects ``gamma_i ~ N(0, s2_gamma)``, rater-within-method effects
``alpha_jm ~ N(0, s2_alpha_m)`` and errors that are AR(1) correlated over time
within each (subject, method) series.  The binary outcome is the sign of the
latent variable.

Fitting uses restricted pseudo-likelihood: the outer loop linearizes the probit
mean about the current conditional predictor ``X beta + Z u``; the inner loop
fits the resulting weighted linear mixed model by REML.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import linalg, optimize, sparse, special, stats

from .data import LongDataset

__all__ = [
    "ModelSpec",
    "FitOptions",
    "FixedEffects",
    "VarianceComponents",
    "FitResult",
    "WaldTest",
    "DesignBundle",
    "WorkingData",
    "FitError",
    "build_design",
    "ar1_matrix",
    "ar1_precision",
    "linearize",
    "reml_objective",
    "reml_gradient",
    "solve_mme",
    "probit_glm",
    "fit",
    "wald_test",
    "z_test",
]

VC_NAMES = ("sigma2_gamma", "sigma2_alpha1", "sigma2_alpha2", "rho")
_LOG2PI = math.log(2.0 * math.pi)
_ETA_CLIP = 8.0
_ATANH_MAX = 3.8  # |rho| <= 0.999
_LOG_VAR_MAX = math.log(1e3)


class FitError(RuntimeError):
    """Raised when the model cannot be fitted (bad design, singular system)."""


@dataclass(frozen=True)
class ModelSpec:
    """Model configuration.

    ``residual_scale="fixed"`` keeps the latent error variance at 1;
    ``"estimated"`` profiles a multiplicative scale on the R-side covariance
    of the working model (the overdispersion scale GLMM packages estimate by
    default alongside R-side structures).
    """

    time_trend: Literal["none", "linear"] = "linear"
    residual_correlation: Literal["independent", "ar1"] = "ar1"
    rater_effect: Literal["included", "omitted"] = "included"
    residual_scale: Literal["fixed", "estimated"] = "estimated"

    def __post_init__(self):
        choices = {
            "time_trend": ("none", "linear"),
            "residual_correlation": ("independent", "ar1"),
            "rater_effect": ("included", "omitted"),
            "residual_scale": ("fixed", "estimated"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")


@dataclass(frozen=True)
class FitOptions:
    tol: float = 1e-6
    max_outer: int = 100
    max_inner: int = 200
    var_floor: float = 1e-10
    init_variance: float = 0.1
    level: float = 0.95
    se_step: float = 1e-4
    compute_se: bool = True
    separation_ridge: float = 1e-6
    # (s2_gamma, s2_alpha1, s2_alpha2, rho) held fixed instead of estimated
    fixed_vc: tuple[float, float, float, float] | None = None


@dataclass(frozen=True)
class FixedEffects:
    beta_1: float
    beta_2: float
    theta: float | None
    cov: np.ndarray

    @property
    def values(self) -> np.ndarray:
        v = [self.beta_1, self.beta_2]
        if self.theta is not None:
            v.append(self.theta)
        return np.array(v)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


@dataclass(frozen=True)
class VarianceComponents:
    sigma2_gamma: float
    sigma2_alpha1: float
    sigma2_alpha2: float
    rho: float
    se_sigma2_gamma: float = float("nan")
    se_sigma2_alpha1: float = float("nan")
    se_sigma2_alpha2: float = float("nan")
    se_rho: float = float("nan")
    scale: float = 1.0

    def sigma2_alpha(self, method: int) -> float:
        return self.sigma2_alpha1 if method == 1 else self.sigma2_alpha2


@dataclass(frozen=True)
class FitResult:
    spec: ModelSpec
    fixed: FixedEffects
    vc: VarianceComponents
    eblup_gamma: np.ndarray
    eblup_alpha: np.ndarray  # (J, 2)
    converged: bool
    n_outer_iterations: int
    final_change: float
    reml_criterion: float
    warnings: tuple[str, ...] = ()
    tol: float = 1e-6


@dataclass(frozen=True)
class WaldTest:
    estimate: float
    std_error: float
    statistic: float
    p_value: float
    ci_low: float
    ci_high: float
    level: float = 0.95


@dataclass
class DesignBundle:
    """Fixed design, random-effect incidence and R-side block structure.

    Random-effect columns are ordered subjects first and then
    rater-within-method, column ``n_subjects + (m - 1) * n_raters + j``.
    Rows of one AR(1) block (a (subject, method) series) are contiguous and
    time-sorted; ``link`` holds the first row of every pair of consecutive
    rows inside a block.
    """

    X: np.ndarray
    fixed_names: tuple[str, ...]
    subject: np.ndarray
    rater_col: np.ndarray  # in [0, 2J), or -1 when rater effects are omitted
    time: np.ndarray
    n_subjects: int
    n_raters: int
    spec: ModelSpec
    block_starts: np.ndarray
    link: np.ndarray
    link_gap: np.ndarray
    Z: sparse.csr_matrix = field(repr=False)

    def __post_init__(self):
        n = self.n_obs
        k = self.link
        self.pair_r = np.concatenate([np.arange(n), k, k + 1])
        self.pair_s = np.concatenate([np.arange(n), k + 1, k])
        self.Zt = self.Z.T.tocsr()
        # flat (q x q) bin of every product z_r z_s' over the nonzero pairs
        q = self.n_random
        cols = [self.subject]
        if self.has_rater:
            cols.append(self.n_subjects + self.rater_col)
        self.idx_zz = np.concatenate(
            [a[self.pair_r] * q + b[self.pair_s] for a in cols for b in cols]
        )
        self.zz_rep = len(cols) ** 2

    @property
    def n_obs(self) -> int:
        return self.X.shape[0]

    @property
    def n_random(self) -> int:
        return self.Z.shape[1]

    @property
    def has_rater(self) -> bool:
        return self.spec.rater_effect == "included"

    @property
    def has_ar1(self) -> bool:
        return self.spec.residual_correlation == "ar1" and len(self.link) > 0

    @property
    def integer_gaps(self) -> bool:
        return bool(np.allclose(self.link_gap, np.round(self.link_gap)))

    def random_scale(self, variances) -> np.ndarray:
        """Per-column standard deviation of the random effects."""
        s = np.full(self.n_subjects, variances[0])
        if self.has_rater:
            s = np.concatenate(
                [s, np.full(self.n_raters, variances[1]), np.full(self.n_raters, variances[2])]
            )
        return np.sqrt(s)

    def blocks(self) -> list[slice]:
        stops = np.append(self.block_starts[1:], self.n_obs)
        return [slice(a, b) for a, b in zip(self.block_starts, stops)]


def build_design(ds: LongDataset, spec: ModelSpec) -> DesignBundle:
    """Assemble the matrices of the linearized model for ``ds``."""
    n = len(ds)
    I, J = ds.n_subjects, ds.n_raters
    cols = [(ds.method == 1).astype(float), (ds.method == 2).astype(float)]
    names = ["beta_1", "beta_2"]
    if spec.time_trend == "linear":
        cols.append(ds.time.astype(float))
        names.append("theta")
    X = np.column_stack(cols)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise FitError(f"fixed-effect design is rank deficient (columns {names})")

    rows = np.arange(n)
    if spec.rater_effect == "included":
        if J < 2:
            raise FitError("rater_effect='included' needs at least 2 raters")
        rater_col = (ds.method - 1) * J + ds.rater
        Z = sparse.csr_matrix(
            (np.ones(2 * n), (np.r_[rows, rows], np.r_[ds.subject, I + rater_col])),
            shape=(n, I + 2 * J),
        )
    else:
        rater_col = np.full(n, -1, dtype=np.int64)
        Z = sparse.csr_matrix((np.ones(n), (rows, ds.subject)), shape=(n, I))

    key = ds.subject * 2 + (ds.method - 1)
    same = key[1:] == key[:-1]
    if spec.residual_correlation == "ar1":
        starts = np.flatnonzero(np.r_[True, ~same])
        link = np.flatnonzero(same)
    else:
        starts = np.arange(n)
        link = np.array([], dtype=np.int64)
    return DesignBundle(
        X=X,
        fixed_names=tuple(names),
        subject=ds.subject.copy(),
        rater_col=rater_col,
        time=ds.time.copy(),
        n_subjects=I,
        n_raters=J,
        spec=spec,
        block_starts=starts,
        link=link,
        link_gap=ds.time[link + 1] - ds.time[link],
        Z=Z,
    )


def ar1_matrix(times, rho: float) -> np.ndarray:
    """Correlation matrix with entries ``rho ** |t - t'|``."""
    t = np.asarray(times, dtype=float)
    if not abs(rho) < 1.0:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    if not np.isfinite(t).all():
        raise ValueError("times must be finite")
    lag = np.abs(t[:, None] - t[None, :])
    if rho == 0:
        return np.eye(len(t))
    if rho < 0:
        if not np.allclose(lag, np.round(lag)):
            raise ValueError("negative rho requires integer time gaps")
        lag = np.round(lag)
    return np.power(rho, lag)


def _link_terms(gaps: np.ndarray, rho: float):
    """Lag correlation of consecutive times and ``1 - r**2``."""
    if rho == 0.0:
        r = np.zeros_like(gaps)
    elif rho < 0:
        if not np.allclose(gaps, np.round(gaps)):
            raise ValueError("negative rho requires integer time gaps")
        r = np.power(rho, np.round(gaps))
    else:
        r = np.power(rho, gaps)
    one_m = 1.0 - r * r
    if (one_m <= 0).any():
        raise ValueError("AR(1) block is singular (repeated time)")
    return r, one_m


def ar1_precision(times, rho: float) -> tuple[np.ndarray, float]:
    """Inverse and log-determinant of ``ar1_matrix(times, rho)``.

    The AR(1) process is Markov, so for sorted times the precision matrix is
    tridiagonal and both quantities have closed forms.
    """
    t = np.asarray(times, dtype=float)
    if not abs(rho) < 1.0:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    if (np.diff(t) <= 0).any():
        raise ValueError("times must be strictly increasing")
    r, one_m = _link_terms(np.diff(t), rho)
    a = r * r / one_m
    diag = np.ones(len(t))
    diag[:-1] += a
    diag[1:] += a
    Q = np.diag(diag)
    idx = np.arange(len(t) - 1)
    Q[idx, idx + 1] = Q[idx + 1, idx] = -r / one_m
    return Q, float(np.log(one_m).sum())


@dataclass
class WorkingData:
    """Linearized response ``P`` and working weights ``w`` for an inner fit."""

    design: DesignBundle
    P: np.ndarray
    w: np.ndarray
    ridge: float = 0.0

    def __post_init__(self):
        self.sw = np.sqrt(self.w)
        self.sw_link = self.sw[self.design.link] * self.sw[self.design.link + 1]
        self.XP = np.column_stack([self.design.X, self.P])
        self.sum_log_w = float(np.log(self.w).sum())

    @classmethod
    def from_arrays(cls, design: DesignBundle, P, w=None, ridge: float = 0.0) -> "WorkingData":
        P = np.asarray(P, dtype=float)
        w = np.ones_like(P) if w is None else np.asarray(w, dtype=float)
        return cls(design, P, w, ridge)


@dataclass
class _Eval:
    n: int
    logdet: float  # log|V| + log|X' V^-1 X| at unit residual scale
    rvr: float  # r' V^-1 r
    beta: np.ndarray
    cov_beta: np.ndarray  # (X' V^-1 X)^-1
    b: np.ndarray  # scaled random effects, u = scale * b
    scale: np.ndarray
    grad_logdet: np.ndarray | None = None  # d/dx, unconstrained coordinates
    grad_rvr: np.ndarray | None = None

    @property
    def n_free(self) -> int:
        return self.n - len(self.beta)

    def reml(self, residual_scale: float = 1.0) -> float:
        # V = phi V*: log|V| gains n log phi and log|X'V^-1X| loses p log phi
        return self.n_free * math.log(residual_scale) + self.logdet + self.rvr / residual_scale

    def profiled(self) -> float:
        nf = self.n_free
        return nf * math.log(self.rvr / nf) + self.logdet + nf

    def reml_grad(self) -> np.ndarray:
        return self.grad_logdet + self.grad_rvr

    def profiled_grad(self) -> np.ndarray:
        return self.grad_logdet + self.n_free * self.grad_rvr / self.rvr


def _omega_terms(r: np.ndarray, one_m: np.ndarray, working: WorkingData):
    """Diagonal and link entries of R^-1 = diag(sw) Q diag(sw)."""
    d = working.design
    k = d.link
    a = r * r / one_m
    q = np.ones(d.n_obs)
    np.add.at(q, k, a)
    np.add.at(q, k + 1, a)
    return q * working.w, (-r / one_m) * working.sw_link


def _cross(d: DesignBundle, working: WorkingData, dvals: np.ndarray, ovals: np.ndarray):
    """``[X Z P]' Omega [X Z P]`` for a symmetric tridiagonal-by-block Omega."""
    XP = working.XP
    k = d.link
    OXP = dvals[:, None] * XP
    OXP[k] += ovals[:, None] * XP[k + 1]
    OXP[k + 1] += ovals[:, None] * XP[k]
    p1 = XP.shape[1]
    q = d.n_random
    ZO = d.Zt @ OXP
    pv = np.concatenate([dvals, ovals, ovals])
    ZZ = np.bincount(d.idx_zz, weights=np.tile(pv, d.zz_rep), minlength=q * q).reshape(q, q)
    p = p1 - 1
    K = np.empty((p1 + q, p1 + q))
    xi = np.r_[0:p, p + q]  # X and P positions
    K[np.ix_(xi, xi)] = XP.T @ OXP
    K[p : p + q, p : p + q] = ZZ
    K[p : p + q][:, xi] = ZO
    K[np.ix_(xi, np.arange(p, p + q))] = ZO.T
    return K


def _evaluate(x: np.ndarray, working: WorkingData, floor: float, grad: bool = False):
    """REML pieces and the mixed-model solution at unconstrained ``x``.

    Works with the scaled mixed-model matrix
    ``C = [X, Z S]' R^-1 [X, Z S] + diag(0, I)`` where ``G = S S``, for which
    ``log|V| + log|X'V^-1X| = log|R| + log|C|``.  With ``grad=True`` the
    derivatives of the log-determinant and quadratic parts with respect to
    ``x`` are also returned, from the inverse of ``C``.
    """
    d = working.design
    var = np.maximum(np.exp(np.clip(x[:3], -700.0, 700.0)), floor)
    rho = math.tanh(x[3]) if d.has_ar1 else 0.0
    try:
        r, one_m = _link_terms(d.link_gap, rho)
    except ValueError:
        return None
    dvals, ovals = _omega_terms(r, one_m, working)
    K = _cross(d, working, dvals, ovals)
    p = d.X.shape[1]
    q = d.n_random
    s = d.random_scale(var)
    sc = np.concatenate([np.ones(p), s, [1.0]])
    K *= sc[:, None] * sc[None, :]
    m = p + q
    C = K[:m, :m]
    C[np.arange(p, m), np.arange(p, m)] += 1.0
    try:
        L = linalg.cholesky(C, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return None
    rhs = K[:m, m]
    sol = linalg.cho_solve((L, True), rhs, check_finite=False)
    rvr = float(K[m, m] - sol @ rhs)
    logdet = float(np.log(one_m).sum()) - working.sum_log_w + 2.0 * float(np.log(np.diag(L)).sum())
    if not (np.isfinite(rvr) and rvr > 0 and np.isfinite(logdet)):
        return None
    Cinv, info = linalg.lapack.dpotri(L, lower=1)
    if info:
        return None
    Cinv = np.tril(Cinv) + np.tril(Cinv, -1).T
    beta, b = sol[:p], sol[p:]
    ev = _Eval(d.n_obs, logdet, rvr, beta, Cinv[:p, :p], b, s)
    if not grad:
        return ev

    g_ld = np.zeros(4)
    g_rv = np.zeros(4)
    diag_inv = np.diag(Cinv)[p:]
    b2 = b * b
    I, J = d.n_subjects, d.n_raters
    blocks = [slice(0, I)]
    if d.has_rater:
        blocks += [slice(I, I + J), slice(I + J, I + 2 * J)]
    for c, blk in enumerate(blocks):
        g_ld[c] = (blk.stop - blk.start) - diag_inv[blk].sum()
        g_rv[c] = -b2[blk].sum()
    if d.has_ar1:
        g = d.link_gap
        if rho != 0:
            dr = g * r / rho
        else:
            dr = np.where(g == 1, 1.0, 0.0)
        om2 = one_m * one_m
        da = 2.0 * r * dr / om2
        do = -(1.0 + r * r) * dr / om2
        ddiag = np.zeros(d.n_obs)
        np.add.at(ddiag, d.link, da)
        np.add.at(ddiag, d.link + 1, da)
        ddiag *= working.w
        doff = do * working.sw_link
        dK = _cross(d, working, ddiag, doff)
        dK *= sc[:, None] * sc[None, :]
        jac = 1.0 - rho * rho
        dlogr = float((-2.0 * r * dr / one_m).sum())
        g_ld[3] = jac * (dlogr + float((Cinv * dK[:m, :m]).sum()))
        # r'V^-1 r = P'R^-1 P - sol' rhs; derivative is e' dR^-1 e at the solution
        sv = np.concatenate([sol, [-1.0]])
        g_rv[3] = jac * float(sv @ dK @ sv)
    ev.grad_logdet = g_ld
    ev.grad_rvr = g_rv
    return ev


def reml_objective(
    vc_unconstrained, working: WorkingData, residual_scale: float = 1.0, var_floor: float = 1e-10
) -> float:
    """-2 x restricted log-likelihood of the working LMM, without the 2*pi constant.

    ``vc_unconstrained`` is (log s2_gamma, log s2_alpha1, log s2_alpha2,
    atanh rho); components absent from the model are ignored.  At the default
    unit residual scale this is ``log|V| + log|X'V^-1X| + r'V^-1 r``.
    Returns ``inf`` where V is numerically singular.
    """
    x = np.array(vc_unconstrained, dtype=float)
    x[:3] -= math.log(residual_scale)
    ev = _evaluate(x, working, var_floor)
    return math.inf if ev is None else ev.reml(residual_scale)


def reml_gradient(
    vc_unconstrained, working: WorkingData, residual_scale: float = 1.0, var_floor: float = 1e-10
) -> np.ndarray:
    """Analytic gradient of :func:`reml_objective` in the unconstrained coordinates.

    Entries for components absent from the model are 0.  Returns NaNs where
    the objective is infinite.
    """
    x = np.array(vc_unconstrained, dtype=float)
    x[:3] -= math.log(residual_scale)
    ev = _evaluate(x, working, var_floor, grad=True)
    if ev is None:
        return np.full(4, np.nan)
    return ev.grad_logdet + ev.grad_rvr / residual_scale


def _to_unconstrained(vc: VarianceComponents, floor: float) -> np.ndarray:
    var = np.maximum([vc.sigma2_gamma, vc.sigma2_alpha1, vc.sigma2_alpha2], floor)
    return np.append(np.log(var), np.arctanh(vc.rho))


def solve_mme(
    working: WorkingData,
    vc: VarianceComponents,
    method: Literal["scaled", "henderson", "direct"] = "scaled",
    var_floor: float = 1e-10,
):
    """Fixed-effect estimates, random-effect predictions and cov(beta_hat).

    ``scaled`` is the factorization the fitter uses; ``henderson`` builds and
    solves Henderson's mixed-model equations literally; ``direct`` forms V and
    applies ``beta = (X'V^-1X)^-1 X'V^-1 P`` and ``u = G Z'V^-1 (P - X beta)``.
    All three return ``(beta_hat, u_hat, cov_beta)``.
    """
    d = working.design
    phi = vc.scale
    if method == "scaled":
        x = _to_unconstrained(vc, var_floor)
        x[:3] -= math.log(phi)
        ev = _evaluate(x, working, var_floor)
        if ev is None:
            raise FitError("singular mixed-model equations")
        return ev.beta, ev.scale * ev.b, phi * ev.cov_beta

    var = np.maximum([vc.sigma2_gamma, vc.sigma2_alpha1, vc.sigma2_alpha2], var_floor)
    Rinv = _dense_rinv(working, vc.rho) / phi
    X = d.X
    Z = d.Z.toarray()
    g = d.random_scale(var) ** 2
    P = working.P
    if method == "henderson":
        C = np.block(
            [[X.T @ Rinv @ X, X.T @ Rinv @ Z], [Z.T @ Rinv @ X, Z.T @ Rinv @ Z + np.diag(1.0 / g)]]
        )
        rhs = np.concatenate([X.T @ Rinv @ P, Z.T @ Rinv @ P])
        sol = np.linalg.solve(C, rhs)
        p = X.shape[1]
        return sol[:p], sol[p:], np.linalg.inv(C)[:p, :p]
    if method == "direct":
        V = (Z * g) @ Z.T + np.linalg.inv(Rinv)
        Vinv = np.linalg.inv(V)
        cov = np.linalg.inv(X.T @ Vinv @ X)
        beta = cov @ X.T @ Vinv @ P
        u = g * (Z.T @ Vinv @ (P - X @ beta))
        return beta, u, cov
    raise ValueError(f"unknown method {method!r}")


def _dense_rinv(working: WorkingData, rho: float) -> np.ndarray:
    """R^-1 at unit scale as a dense matrix, block by block."""
    d = working.design
    n = d.n_obs
    out = np.zeros((n, n))
    rho = rho if d.has_ar1 else 0.0
    for blk in d.blocks():
        Q = np.linalg.inv(ar1_matrix(d.time[blk], rho))
        sw = working.sw[blk]
        out[blk, blk] = sw[:, None] * Q * sw[None, :]
    return out


def _log_phi(eta):
    return -0.5 * eta * eta - 0.5 * _LOG2PI


def linearize(eta: np.ndarray, y: np.ndarray):
    """Working quantities of the probit model about ``eta``.

    Returns ``(mu, w, P)`` with ``mu = Phi(eta)``, weights
    ``w = phi(eta)^2 / (mu (1 - mu))`` and pseudo-response
    ``P = eta + (y - mu) / phi(eta)``.
    """
    eta = np.clip(eta, -_ETA_CLIP, _ETA_CLIP)
    lphi = _log_phi(eta)
    lcdf = special.log_ndtr(eta)
    lsf = special.log_ndtr(-eta)
    w = np.exp(2.0 * lphi - lcdf - lsf)
    step = np.where(y == 1, np.exp(lsf - lphi), -np.exp(lcdf - lphi))
    return np.exp(lcdf), w, eta + step


def probit_glm(X, y, tol: float = 1e-10, max_iter: int = 100, ridge: float = 0.0):
    """Independent-observation probit regression by Fisher scoring.

    Returns ``(beta, cov, converged)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    p = X.shape[1]
    beta = np.zeros(p)
    converged = False
    for _ in range(max_iter):
        _, w, P = linearize(X @ beta, y)
        XtW = X.T * w
        new = np.linalg.solve(XtW @ X + ridge * np.eye(p), XtW @ P)
        done = np.max(np.abs(new - beta)) < tol * (1.0 + np.max(np.abs(beta)))
        beta = new
        if done:
            converged = True
            break
    _, w, _ = linearize(X @ beta, y)
    cov = np.linalg.inv((X.T * w) @ X + ridge * np.eye(p))
    return beta, cov, converged


def _separation(ds: LongDataset) -> list[str]:
    if len(np.unique(ds.y)) == 1:
        return ["complete separation: constant response"]
    return [
        f"complete separation: constant response under method {m}"
        for m in (1, 2)
        if len(np.unique(ds.y[ds.method == m])) == 1
    ]


def _active(design: DesignBundle) -> np.ndarray:
    return np.array([True, design.has_rater, design.has_rater, design.has_ar1])


def _bounds(design: DesignBundle, floor: float) -> tuple[np.ndarray, np.ndarray]:
    lo_rho = -_ATANH_MAX if design.integer_gaps else 0.0
    lo = np.array([math.log(floor)] * 3 + [lo_rho])
    hi = np.array([_LOG_VAR_MAX] * 3 + [_ATANH_MAX])
    act = _active(design)
    return lo[act], hi[act]


class _Inner:
    """Inner REML optimizer (bounded quasi-Newton with analytic gradient)."""

    def __init__(self, design: DesignBundle, opts: FitOptions):
        self.opts = opts
        self.active = _active(design)
        self.bounds = list(zip(*_bounds(design, opts.var_floor)))
        self.profiled = design.spec.residual_scale == "estimated"

    def __call__(self, working: WorkingData, x0: np.ndarray) -> np.ndarray:
        floor = self.opts.var_floor
        act = self.active

        def f(z):
            x = x0.copy()
            x[act] = z
            ev = _evaluate(x, working, floor, grad=True)
            if ev is None:
                return 1e300, np.zeros(len(z))
            if self.profiled:
                return ev.profiled(), ev.profiled_grad()[act]
            return ev.reml(), ev.reml_grad()[act]

        lo, hi = np.array(self.bounds).T
        z0 = np.clip(x0[act], lo, hi)
        res = optimize.minimize(
            f,
            z0,
            jac=True,
            method="L-BFGS-B",
            bounds=self.bounds,
            options={"maxiter": self.opts.max_inner, "ftol": 1e-13, "gtol": 1e-7},
        )
        x = x0.copy()
        x[act] = res.x if np.isfinite(res.fun) and res.fun < 1e300 else z0
        return x


def _vc_se(working: WorkingData, x: np.ndarray, phi: float, opts: FitOptions) -> np.ndarray:
    """Standard errors of (s2_gamma, s2_alpha1, s2_alpha2, rho).

    Central finite-difference Hessian of the REML criterion on the
    unconstrained scale; components pinned at a bound get NaN.  With an
    estimated residual scale, log(scale) joins the Hessian as a nuisance
    coordinate.
    """
    design = working.design
    lo, hi = _bounds(design, opts.var_floor)
    act_idx = np.flatnonzero(_active(design))
    h = opts.se_step
    free = [k for k, a, b in zip(act_idx, lo, hi) if a + h < x[k] < b - h]
    se = np.full(4, np.nan)
    if not free:
        return se
    coords = list(free)
    if design.spec.residual_scale == "estimated":
        coords.append(4)
    base = np.append(x, math.log(phi))

    def f(v):
        return reml_objective(v[:4], working, math.exp(v[4]), opts.var_floor)

    dim = len(coords)
    H = np.empty((dim, dim))
    f0 = f(base)
    for a in range(dim):
        ea = np.zeros(5)
        ea[coords[a]] = h
        H[a, a] = (f(base + ea) - 2.0 * f0 + f(base - ea)) / h**2
        for b in range(a + 1, dim):
            eb = np.zeros(5)
            eb[coords[b]] = h
            H[a, b] = H[b, a] = (
                f(base + ea + eb) - f(base + ea - eb) - f(base - ea + eb) + f(base - ea - eb)
            ) / (4.0 * h * h)
    if not np.isfinite(H).all():
        return se
    cov = 2.0 * np.linalg.pinv(H)
    for a, k in enumerate(free):
        if cov[a, a] <= 0:
            continue
        s = math.sqrt(cov[a, a])
        se[k] = math.exp(x[k]) * s if k < 3 else (1.0 - math.tanh(x[k]) ** 2) * s
    return se


def _natural(x: np.ndarray, floor: float) -> np.ndarray:
    var = np.maximum(np.exp(x[:3]), floor)
    return np.append(var, math.tanh(x[3]))


def fit(ds: LongDataset, spec: ModelSpec | None = None, opts: FitOptions | None = None) -> FitResult:
    """Fit the probit GLMM by restricted pseudo-likelihood.

    Convergence is declared when the largest change of the fixed effects,
    variances, rho and residual scale between outer iterations, relative to
    ``max(|old|, 1)``, drops below ``opts.tol``.  A non-converged fit is
    returned with ``converged=False`` and a warning.
    """
    spec = spec or ModelSpec()
    opts = opts or FitOptions()
    design = build_design(ds, spec)
    notes = _separation(ds)
    ridge = opts.separation_ridge if notes else 0.0
    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)

    X, y = design.X, ds.y
    beta, _, _ = probit_glm(X, y, ridge=ridge, max_iter=50)
    eta = X @ beta
    active = _active(design)
    # rho starts off zero when gaps are fractional: d(rho**g)/d(rho) is unbounded there
    x = np.array([math.log(opts.init_variance)] * 3 + [0.0 if design.integer_gaps else 0.1])
    x[:3][~active[:3]] = math.log(opts.var_floor)
    profiled = spec.residual_scale == "estimated"
    n_free = design.n_obs - X.shape[1]

    inner = _Inner(design, opts)
    if opts.fixed_vc is not None:
        v = np.asarray(opts.fixed_vc, dtype=float)
        if v.shape != (4,) or (v[:3] < 0).any() or not abs(v[3]) < 1:
            raise ValueError("fixed_vc must be (s2_gamma, s2_alpha1, s2_alpha2, rho) with valid values")
        held = np.append(np.log(np.maximum(v[:3], opts.var_floor)), math.atanh(v[3]))
        held[~active] = x[~active]
    params = np.concatenate([beta, _natural(x, opts.var_floor), [1.0]])
    converged = False
    change = math.inf
    ev = working = None
    phi = 1.0
    it = 0
    for it in range(1, opts.max_outer + 1):
        _, w, P = linearize(eta, y)
        working = WorkingData(design, P, w, ridge)
        if opts.fixed_vc is None:
            x = inner(working, x)
        else:
            x = held.copy()
            x[:3] -= math.log(phi)
        ev = _evaluate(x, working, opts.var_floor)
        if ev is None:
            raise FitError("inner REML fit failed: singular working model")
        phi = ev.rvr / n_free if profiled else 1.0
        eta = X @ ev.beta + design.Z @ (ev.scale * ev.b)
        nat = _natural(x, opts.var_floor)
        nat[:3] *= phi
        new = np.concatenate([ev.beta, nat, [phi]])
        change = float(np.max(np.abs(new - params) / np.maximum(np.abs(params), 1.0)))
        params = new
        if change < opts.tol:
            converged = True
            break

    msgs = list(notes)
    if not converged:
        msg = (
            f"pseudo-likelihood did not converge in {opts.max_outer} outer iterations "
            f"(change {change:.3g})"
        )
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        msgs.append(msg)

    x_abs = x.copy()
    x_abs[:3] += math.log(phi)
    if opts.compute_se and opts.fixed_vc is None:
        se = _vc_se(working, x_abs, phi, opts)
    else:
        se = np.full(4, np.nan)
    var = np.maximum(np.exp(x[:3]), opts.var_floor) * phi
    if not design.has_rater:
        var[1:] = 0.0
    rho = math.tanh(x[3]) if design.has_ar1 else 0.0
    vc = VarianceComponents(
        float(var[0]), float(var[1]), float(var[2]), rho, *map(float, se), scale=phi
    )
    u = ev.scale * ev.b
    I, J = design.n_subjects, design.n_raters
    alpha = u[I:].reshape(2, J).T.copy() if design.has_rater else np.zeros((J, 2))
    cov = phi * 0.5 * (ev.cov_beta + ev.cov_beta.T)
    fixed = FixedEffects(
        float(ev.beta[0]),
        float(ev.beta[1]),
        float(ev.beta[2]) if spec.time_trend == "linear" else None,
        cov,
    )
    return FitResult(
        spec=spec,
        fixed=fixed,
        vc=vc,
        eblup_gamma=u[:I].copy(),
        eblup_alpha=alpha,
        converged=converged,
        n_outer_iterations=it,
        final_change=change,
        reml_criterion=ev.reml(phi),
        warnings=tuple(msgs),
        tol=opts.tol,
    )


def wald_test(fit_result: FitResult, level: float = 0.95) -> WaldTest:
    """z-test of equal method effects (beta_1 = beta_2)."""
    if not fit_result.converged:
        warnings.warn("Wald test on a non-converged fit", RuntimeWarning, stacklevel=2)
    cov = fit_result.fixed.cov
    c = np.zeros(cov.shape[0])
    c[:2] = (1.0, -1.0)
    var = float(c @ cov @ c)
    if not var > 0:
        raise FitError("degenerate fit: standard error of the method difference is 0")
    return z_test(fit_result.fixed.beta_1 - fit_result.fixed.beta_2, math.sqrt(var), level)


def z_test(estimate: float, se: float, level: float = 0.95) -> WaldTest:
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    z = estimate / se
    p = float(min(1.0, 2.0 * stats.norm.sf(abs(z))))
    half = float(stats.norm.ppf(0.5 + level / 2.0)) * se
    return WaldTest(estimate, se, z, p, estimate - half, estimate + half, level)
