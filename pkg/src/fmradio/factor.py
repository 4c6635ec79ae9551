"""Maximum-likelihood factor analysis on a shrunken correlation matrix.

The discrepancy

    F(Sigma; S) = ln|Sigma| + tr(S Sigma^{-1}) - ln|S| - p,

with Sigma = Lambda Lambda' + Psi, is minimized by concentrating the
loadings out: for fixed uniquenesses Psi the optimal Lambda follows from the
spectral decomposition of Psi^{-1/2} S Psi^{-1/2}, leaving

    F(Psi) = sum over the p - m smallest eigenvalues u of (u - ln u - 1),

which is driven to its minimum by a quasi-Newton iteration over log psi_jj.
This is the standard stable realization of the classical gradient scheme for
the ML normal equations and yields the canonical solution (Lambda' Psi^{-1}
Lambda diagonal with non-increasing diagonal) by construction.

The module also houses latent-dimension selection: the eigenvalue bound
(count of shrunken eigenvalues above 1), AIC/BIC, a sequential likelihood
ratio test, and the diagnostic battery (KMO, SMC bounds, explained variance,
loading thresholding, factor-score determinacy).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy import optimize
from scipy.stats import chi2

from .corr import ShrunkenCorrelation

__all__ = [
    "FactorModel",
    "DimensionDiagnostics",
    "SelectionTally",
    "ThresholdedLoadings",
    "fit_ml_factor",
    "fit_range",
    "guttman_bound",
    "ledermann_max",
    "kmo",
    "smc_lower_bounds",
    "variance_explained",
    "determinacy",
    "threshold_loadings",
    "select_aic",
    "select_bic",
    "select_lrt",
    "n_free_params",
    "lrt_df",
    "dimension_diagnostics",
]

PSI_FLOOR = 0.005


@dataclass(frozen=True)
class FactorModel:
    """Fitted loadings and uniquenesses with convergence metadata."""

    loadings: np.ndarray
    uniquenesses: np.ndarray
    m: int
    discrepancy: float
    iterations: int
    converged: bool
    heywood: np.ndarray
    trace: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        lam = np.atleast_2d(np.asarray(self.loadings, dtype=float))
        psi = np.asarray(self.uniquenesses, dtype=float)
        object.__setattr__(self, "loadings", lam)
        object.__setattr__(self, "uniquenesses", psi)
        object.__setattr__(self, "heywood", np.asarray(self.heywood, bool))
        if lam.shape != (psi.shape[0], self.m):
            raise ValueError("loadings must be p x m with p uniquenesses")
        if np.any(psi <= 0):
            raise ValueError("uniquenesses must be strictly positive")

    @property
    def p(self) -> int:
        return self.loadings.shape[0]

    def implied(self) -> np.ndarray:
        """Model-implied correlation matrix Lambda Lambda' + Psi."""
        return self.loadings @ self.loadings.T + np.diag(self.uniquenesses)

    def communalities(self) -> np.ndarray:
        return np.sum(self.loadings**2, axis=1)


@dataclass(frozen=True)
class ThresholdedLoadings:
    """Loadings with small entries zeroed plus per-factor strength counts."""

    loadings: np.ndarray
    omega: float
    significant_counts: np.ndarray
    weak_factors: np.ndarray


@dataclass(frozen=True)
class SelectionTally:
    """Chosen dimension plus the per-m criterion values that led there."""

    method: str
    chosen_m: int
    values: dict[int, float]
    accepted: bool = True
    skipped: tuple[int, ...] = ()


@dataclass(frozen=True)
class DimensionDiagnostics:
    """Decision-support numbers around a chosen latent dimension."""

    guttman_m: int
    eigen_gaps: np.ndarray
    kmo: float
    smc_lower: np.ndarray
    communalities: np.ndarray
    variance_per_factor: np.ndarray
    cumulative_variance: float
    determinacy: np.ndarray
    ledermann_max: int


def ledermann_max(p: int) -> int:
    """Largest m with (p - m)^2 - (p + m) >= 0 (non-negative model df)."""
    if p < 1:
        raise ValueError("p must be >= 1")
    m = int(math.floor((2 * p + 1 - math.sqrt(8 * p + 1)) / 2))
    while m > 0 and (p - m) ** 2 - (p + m) < 0:
        m -= 1
    while (p - (m + 1)) ** 2 - (p + m + 1) >= 0:
        m += 1
    return max(m, 0)


def n_free_params(p: int, m: int) -> int:
    """Free parameters of the m-factor model: p(m + 1) - m(m - 1)/2."""
    return p * (m + 1) - m * (m - 1) // 2


def lrt_df(p: int, m: int) -> int:
    """Degrees of freedom [(p - m)^2 - (p + m)] / 2 of the m-factor test."""
    num = (p - m) ** 2 - (p + m)
    if num % 2:
        raise ValueError(f"(p - m)^2 - (p + m) = {num} is odd; invalid (p, m)")
    return num // 2


def guttman_bound(s: ShrunkenCorrelation) -> tuple[int, np.ndarray]:
    """Count of shrunken eigenvalues above 1, plus the eigenvalue gaps.

    The gaps (1 - theta) * (d_j - 1) equal the eigenvalues of the shrunken
    matrix minus 1; for theta < 1 their signs do not depend on theta, so the
    count is invariant to the penalty value.
    """
    gaps = (1.0 - s.theta) * (s.eigenvalues - 1.0)
    return int(np.sum(gaps > 0)), gaps


def _concentrated(
    s_matrix: np.ndarray, rho: np.ndarray, m: int
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Discrepancy / gradient in log-uniquenesses, and the spectrum."""
    p = s_matrix.shape[0]
    q = p - m
    isq = np.exp(-0.5 * rho)
    a = s_matrix * np.outer(isq, isq)
    u, v = np.linalg.eigh(a)  # ascending
    tail_u, tail_v = u[:q], v[:, :q]
    f = float(np.sum(tail_u - np.log(tail_u) - 1.0))
    g = ((1.0 - tail_u) * tail_v**2).sum(axis=1)
    return f, g, u, v


def fit_ml_factor(
    s: ShrunkenCorrelation,
    m: int,
    *,
    psi_floor: float = PSI_FLOOR,
    max_iter: int = 500,
    f_tol: float = 1e-12,
    g_tol: float = 1e-7,
) -> FactorModel:
    """Fit the m-factor model to the shrunken correlation matrix by ML.

    The uniquenesses are optimized on the log scale with a quasi-Newton
    method; ``psi_floor`` bounds them away from zero (boundary hits are
    flagged per feature). The returned loadings satisfy the canonical
    constraint with columns ordered by non-increasing Lambda' Psi^{-1}
    Lambda diagonal.
    """
    s_matrix = s.values
    p = s_matrix.shape[0]
    m_max = ledermann_max(p)
    if not 1 <= m <= m_max:
        raise ValueError(f"m must be in [1, {m_max}] for p = {p}, got {m}")

    sinv_diag = np.diag(np.linalg.inv(s_matrix))
    psi0 = np.clip((1.0 - m / (2.0 * p)) / sinv_diag, psi_floor, None)
    lo, hi = math.log(psi_floor), math.log(4.0)
    rho0 = np.clip(np.log(psi0), lo, hi)

    def fun(rho):
        f, g, _, _ = _concentrated(s_matrix, rho, m)
        return f, g

    trace: list[float] = []

    def record(rho):
        trace.append(_concentrated(s_matrix, rho, m)[0])

    res = optimize.minimize(
        fun,
        rho0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(lo, hi)] * p,
        callback=record,
        options={
            "maxiter": max_iter,
            "ftol": f_tol,
            "gtol": g_tol,
            "maxls": 60,
        },
    )
    rho = res.x
    f_val, _, u, v = _concentrated(s_matrix, rho, m)
    psi = np.exp(rho)

    gamma = u[-m:][::-1]
    w = v[:, -m:][:, ::-1]
    # deterministic eigenvector signs (largest-magnitude entry positive)
    piv = np.argmax(np.abs(w), axis=0)
    signs = np.sign(w[piv, np.arange(m)])
    signs[signs == 0] = 1.0
    w = w * signs
    lam = np.sqrt(psi)[:, None] * w * np.sqrt(np.maximum(gamma - 1.0, 0.0))

    return FactorModel(
        loadings=lam,
        uniquenesses=psi,
        m=m,
        discrepancy=f_val,
        iterations=int(res.nit),
        converged=bool(res.success),
        heywood=rho <= lo + 1e-9,
        trace=tuple(trace),
    )


def fit_range(
    s: ShrunkenCorrelation, m_values, **fit_kwargs
) -> dict[int, FactorModel]:
    """Fit the model for each m in ascending order; shared by the selectors."""
    fits: dict[int, FactorModel] = {}
    for m in sorted(set(int(m) for m in m_values)):
        fits[m] = fit_ml_factor(s, m, **fit_kwargs)
    return fits


def _spd_inverse(matrix: np.ndarray) -> np.ndarray:
    c, low = sla.cho_factor(matrix)
    return sla.cho_solve((c, low), np.eye(matrix.shape[0]))


def kmo(s: ShrunkenCorrelation) -> float:
    """Feature-sampling adequacy: marginal vs partial correlation mass.

    Ratio of the summed squared off-diagonal correlations to the same
    quantity plus the summed squared off-diagonal entries of the scaled
    inverse. Values near 1 indicate excellent factorability; the identity
    matrix leaves a 0/0 form and is rejected.
    """
    r = s.values
    p = r.shape[0]
    off = ~np.eye(p, dtype=bool)
    num = float(np.sum(r[off] ** 2))
    rinv = _spd_inverse(r)
    d = 1.0 / np.sqrt(np.diag(rinv))
    partial = rinv * np.outer(d, d)
    den_extra = float(np.sum(partial[off] ** 2))
    if num + den_extra < 1e-24:
        raise ValueError("KMO is undefined for a diagonal correlation matrix")
    return num / (num + den_extra)


def smc_lower_bounds(s: ShrunkenCorrelation) -> np.ndarray:
    """Squared multiple correlation of each feature on all others."""
    rinv = _spd_inverse(s.values)
    return 1.0 - 1.0 / np.diag(rinv)


def variance_explained(model: FactorModel) -> tuple[np.ndarray, float]:
    """Per-factor proportions (Lambda' Lambda)_kk / p and their sum."""
    v = np.sum(model.loadings**2, axis=0) / model.p
    return v, float(v.sum())


def determinacy(model: FactorModel, s: ShrunkenCorrelation) -> np.ndarray:
    """Squared multiple correlation of each factor on the observed features."""
    x = np.linalg.solve(s.values, model.loadings)
    return np.einsum("jk,jk->k", model.loadings, x)


def threshold_loadings(
    model: FactorModel, omega: float = 0.3
) -> ThresholdedLoadings:
    """Zero out |loadings| <= omega and flag factors with < 3 survivors."""
    if omega < 0:
        raise ValueError("omega must be >= 0")
    lam = model.loadings.copy()
    lam[np.abs(lam) <= omega] = 0.0
    counts = np.sum(lam != 0.0, axis=0)
    return ThresholdedLoadings(lam, float(omega), counts, counts < 3)


def _log_likelihood_terms(s: ShrunkenCorrelation, model: FactorModel) -> float:
    # ln|Sigma| + tr(Sigma^{-1} S) recovered from the fitted discrepancy
    logdet_s = float(np.sum(np.log(s.shrunken_eigenvalues)))
    return model.discrepancy + logdet_s + s.p


def _select_ic(
    s: ShrunkenCorrelation,
    n: int,
    m_range,
    penalty_factor: float,
    method: str,
    fits: dict[int, FactorModel] | None,
) -> SelectionTally:
    if fits is None:
        fits = fit_range(s, m_range)
    p = s.p
    values: dict[int, float] = {}
    skipped: list[int] = []
    for m in sorted(set(int(m) for m in m_range)):
        model = fits[m]
        if not model.converged:
            warnings.warn(f"{method}: skipping non-converged fit at m={m}")
            skipped.append(m)
            continue
        ll2 = n * (p * math.log(2 * math.pi) + _log_likelihood_terms(s, model))
        values[m] = ll2 + penalty_factor * n_free_params(p, m)
    if not values:
        raise RuntimeError(f"{method}: no converged fits in the m range")
    chosen = min(values, key=lambda m: (values[m], m))
    return SelectionTally(method, chosen, values, skipped=tuple(skipped))


def select_aic(
    s: ShrunkenCorrelation,
    n: int,
    m_range,
    fits: dict[int, FactorModel] | None = None,
) -> SelectionTally:
    """Akaike-criterion choice of m over ``m_range`` (ties to smaller m)."""
    return _select_ic(s, n, m_range, 2.0, "AIC", fits)


def select_bic(
    s: ShrunkenCorrelation,
    n: int,
    m_range,
    fits: dict[int, FactorModel] | None = None,
) -> SelectionTally:
    """Bayesian-criterion choice of m over ``m_range`` (ties to smaller m)."""
    return _select_ic(s, n, m_range, math.log(n), "BIC", fits)


def select_lrt(
    s: ShrunkenCorrelation,
    n: int,
    alpha: float = 0.05,
    m_max: int | None = None,
    fits: dict[int, FactorModel] | None = None,
    adjust_df: bool = False,
) -> SelectionTally:
    """Sequential goodness-of-fit testing of m = 1, 2, ... factor models.

    The statistic (n - 1) * F at the fitted m-factor model is referred to a
    chi-squared distribution with [(p - m)^2 - (p + m)] / 2 degrees of
    freedom; testing stops at the first m that is not rejected at level
    ``alpha``. If every tested m is rejected the largest one is returned
    with ``accepted=False``. ``adjust_df`` replaces the saturated-model
    parameter count by the rank-limited p'(p' + 1)/2 with p' = min(p, n-1).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    p = s.p
    hard_max = ledermann_max(p)
    m_max = hard_max if m_max is None else min(int(m_max), hard_max)
    if m_max < 1:
        raise ValueError(f"no testable dimension for p = {p}")
    values: dict[int, float] = {}
    chosen, accepted = m_max, False
    for m in range(1, m_max + 1):
        if adjust_df:
            p_rank = min(p, n - 1)
            df = p_rank * (p_rank + 1) // 2 - (p * m + p - m * (m - 1) // 2)
        else:
            df = lrt_df(p, m)
        if df < 1:
            break
        model = fits[m] if fits and m in fits else fit_ml_factor(s, m)
        if fits is not None and m not in fits:
            fits[m] = model
        stat = (n - 1) * model.discrepancy
        values[m] = stat
        if stat < chi2.ppf(1.0 - alpha, df):
            chosen, accepted = m, True
            break
    return SelectionTally("LRT", chosen, values, accepted=accepted)


def dimension_diagnostics(
    s: ShrunkenCorrelation, model: FactorModel
) -> DimensionDiagnostics:
    """Assemble the full decision-support battery for a fitted model."""
    gb, gaps = guttman_bound(s)
    v_k, cum = variance_explained(model)
    return DimensionDiagnostics(
        guttman_m=gb,
        eigen_gaps=gaps,
        kmo=kmo(s),
        smc_lower=smc_lower_bounds(s),
        communalities=model.communalities(),
        variance_per_factor=v_k,
        cumulative_variance=cum,
        determinacy=determinacy(model, s),
        ledermann_max=ledermann_max(s.p),
    )
