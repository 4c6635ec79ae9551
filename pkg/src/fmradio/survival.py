"""Cox modeling and prediction-error evaluation for right-censored outcomes.

Prediction error is measured by the time-dependent Brier score with inverse
probability of censoring weights: at evaluation time t, subjects who failed
before t are weighted by 1/G(T-), subjects still at risk by 1/G(t-), and
subjects censored before t drop out, where G is the reverse Kaplan-Meier
estimate of the censoring distribution (left limits throughout). Pointwise
scores are integrated over [0, tau] by the trapezoid rule and divided by
tau; 1 minus the ratio of two integrated scores gives the explained
residual variation against a reference model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .ingest import StandardizedMatrix, standardize

logger = logging.getLogger(__name__)

__all__ = [
    "SurvivalData",
    "CoxModel",
    "StepSurvivalCurve",
    "BrierCurve",
    "IntegratedScore",
    "km",
    "reverse_km",
    "fit_cox",
    "predict_survival",
    "predict_survival_matrix",
    "brier_curve",
    "brier_time_grid",
    "brier_cv",
    "integrate_brier",
    "r_squared",
]


@dataclass(frozen=True)
class SurvivalData:
    """Observed follow-up times and event indicators (1 event, 0 censored)."""

    time: np.ndarray
    status: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.time, dtype=float)
        s = np.asarray(self.status)
        if t.ndim != 1 or s.shape != t.shape:
            raise ValueError("time and status must be equal-length vectors")
        if np.any(t <= 0):
            raise ValueError("survival times must be > 0")
        if not np.all(np.isin(s, (0, 1))):
            raise ValueError("status must be 0 or 1")
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "status", s.astype(int))

    @property
    def n(self) -> int:
        return len(self.time)

    @property
    def n_events(self) -> int:
        return int(self.status.sum())

    def subset(self, idx) -> "SurvivalData":
        return SurvivalData(self.time[idx], self.status[idx])


class StepSurvivalCurve:
    """Right-continuous non-increasing step function starting at 1."""

    def __init__(self, times: np.ndarray, values: np.ndarray):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if np.any(np.diff(times) <= 0):
            raise ValueError("jump times must be strictly increasing")
        if np.any(np.diff(values) > 1e-12) or (
            len(values) and values[0] > 1.0 + 1e-12
        ):
            raise ValueError("curve values must be non-increasing from <= 1")
        self.times = times
        self.values = values

    def __call__(self, t) -> np.ndarray:
        """S(t): value after all jumps at times <= t."""
        t = np.asarray(t, float)
        if len(self.times) == 0:
            return np.ones_like(t)
        idx = np.searchsorted(self.times, t, side="right") - 1
        return np.where(idx < 0, 1.0, self.values[np.maximum(idx, 0)])

    def left(self, t) -> np.ndarray:
        """S(t-): value just before t (jumps strictly below t applied)."""
        t = np.asarray(t, float)
        if len(self.times) == 0:
            return np.ones_like(t)
        idx = np.searchsorted(self.times, t, side="left") - 1
        return np.where(idx < 0, 1.0, self.values[np.maximum(idx, 0)])


def km(data: SurvivalData) -> StepSurvivalCurve:
    """Product-limit estimate of the survival function."""
    order = np.argsort(data.time, kind="stable")
    t, d = data.time[order], data.status[order]
    n = len(t)
    uniq = np.unique(t[d == 1])
    if len(uniq) == 0:
        return StepSurvivalCurve(np.empty(0), np.empty(0))
    at_risk = n - np.searchsorted(t, uniq, side="left")
    deaths = np.array([np.sum((t == u) & (d == 1)) for u in uniq])
    surv = np.cumprod(1.0 - deaths / at_risk)
    return StepSurvivalCurve(uniq, surv)


def reverse_km(data: SurvivalData) -> StepSurvivalCurve:
    """Kaplan-Meier estimate of the censoring distribution (status flipped)."""
    return km(SurvivalData(data.time, 1 - data.status))


@dataclass(frozen=True)
class CoxModel:
    """Proportional-hazards fit: coefficients and Breslow baseline hazard."""

    beta: np.ndarray
    baseline_times: np.ndarray
    baseline_cumhaz: np.ndarray
    ties: str
    log_likelihood: float
    iterations: int
    converged: bool
    kept_columns: np.ndarray

    def cumulative_hazard(self, t) -> np.ndarray:
        idx = np.searchsorted(
            self.baseline_times, np.asarray(t, float), side="right"
        ) - 1
        return np.where(
            idx < 0, 0.0, self.baseline_cumhaz[np.maximum(idx, 0)]
        )


def _cox_loglik(beta, x, time, status, ties):
    """Log partial likelihood with gradient and (negative) Hessian."""
    n, q = x.shape
    eta = x @ beta
    w = np.exp(eta)
    order = np.argsort(-time, kind="stable")  # descending time
    ll = 0.0
    grad = np.zeros(q)
    info = np.zeros((q, q))
    s0, s1 = 0.0, np.zeros(q)
    s2 = np.zeros((q, q))
    i = 0
    while i < n:
        # absorb all subjects tied at this time into the risk set
        t_cur = time[order[i]]
        j = i
        while j < n and time[order[j]] == t_cur:
            k = order[j]
            s0 += w[k]
            s1 += w[k] * x[k]
            s2 += w[k] * np.outer(x[k], x[k])
            j += 1
        deaths = [order[r] for r in range(i, j) if status[order[r]] == 1]
        d = len(deaths)
        if d:
            xd = x[deaths]
            wd = w[deaths]
            ll += eta[deaths].sum()
            if ties == "breslow" or d == 1:
                mu = s1 / s0
                ll -= d * np.log(s0)
                grad += xd.sum(axis=0) - d * mu
                info += d * (s2 / s0 - np.outer(mu, mu))
            else:  # efron
                s0d, s1d = wd.sum(), (wd[:, None] * xd).sum(axis=0)
                s2d = (wd[:, None, None] * (xd[:, :, None] * xd[:, None, :])).sum(
                    axis=0
                )
                grad += xd.sum(axis=0)
                for r in range(d):
                    c = r / d
                    s0r = s0 - c * s0d
                    s1r = s1 - c * s1d
                    s2r = s2 - c * s2d
                    mu = s1r / s0r
                    ll -= np.log(s0r)
                    grad -= mu
                    info += s2r / s0r - np.outer(mu, mu)
        i = j
    return ll, grad, info


def fit_cox(
    x: np.ndarray,
    data: SurvivalData,
    ties: str = "efron",
    *,
    max_iter: int = 100,
    tol: float = 1e-9,
    beta_bound: float = 15.0,
) -> CoxModel:
    """Newton-Raphson fit of the Cox proportional hazards model.

    Constant predictor columns are dropped with a warning. Divergence of
    the coefficients beyond ``beta_bound`` aborts with a perfect-separation
    hint; a singular information matrix is reported as such.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != data.n:
        raise ValueError("predictor rows must match survival rows")
    if data.n_events < 1:
        raise ValueError("at least one event is required to fit a Cox model")
    if ties not in ("efron", "breslow"):
        raise ValueError(f"unknown ties rule '{ties}'")

    keep = np.std(x, axis=0) > 0
    if not np.all(keep):
        dropped = np.flatnonzero(~keep)
        logger.warning("dropping constant predictor columns %s", dropped)
    if not np.any(keep):
        raise ValueError("no non-constant predictor columns left")
    xk = x[:, keep]

    beta = np.zeros(xk.shape[1])
    ll, grad, info = _cox_loglik(beta, xk, data.time, data.status, ties)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise RuntimeError(
                "singular information matrix in the Cox fit; predictors may "
                "be collinear"
            ) from None
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * step
            ll_new, grad_new, info_new = _cox_loglik(
                cand, xk, data.time, data.status, ties
            )
            if ll_new >= ll - 1e-12:
                break
            scale /= 2.0
        beta, ll, grad, info = cand, ll_new, grad_new, info_new
        if np.max(np.abs(beta)) > beta_bound:
            raise RuntimeError(
                "Cox coefficients diverged (monotone likelihood); the data "
                "are likely perfectly separated by a predictor"
            )
    else:
        converged = np.max(np.abs(grad)) < tol

    # Breslow estimator of the baseline cumulative hazard
    w = np.exp(xk @ beta)
    uniq = np.unique(data.time[data.status == 1])
    cumhaz = np.empty(len(uniq))
    total = 0.0
    for idx, u in enumerate(uniq):
        at_risk = data.time >= u
        d = int(np.sum((data.time == u) & (data.status == 1)))
        total += d / w[at_risk].sum()
        cumhaz[idx] = total

    return CoxModel(
        beta=beta,
        baseline_times=uniq,
        baseline_cumhaz=cumhaz,
        ties=ties,
        log_likelihood=float(ll),
        iterations=it,
        converged=converged,
        kept_columns=np.flatnonzero(keep),
    )


def predict_survival(model: CoxModel, x_row: np.ndarray, t) -> np.ndarray:
    """Predicted survival probability S0(t)^exp(x beta) at time(s) t."""
    x_row = np.asarray(x_row, dtype=float).ravel()
    risk = float(np.exp(x_row[model.kept_columns] @ model.beta))
    return np.exp(-model.cumulative_hazard(t) * risk)


def predict_survival_matrix(
    model: CoxModel, x: np.ndarray, times: np.ndarray
) -> np.ndarray:
    """Matrix of predicted survival probabilities, one row per subject."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    risk = np.exp(x[:, model.kept_columns] @ model.beta)
    return np.exp(-np.outer(risk, model.cumulative_hazard(times)))


@dataclass(frozen=True)
class BrierCurve:
    """Pointwise prediction error over a time grid, up to horizon tau."""

    times: np.ndarray
    scores: np.ndarray
    tau: float
    variant: str
    label: str = "model"

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.asarray(self.scores, dtype=float)
        if t.shape != s.shape or t.ndim != 1:
            raise ValueError("times and scores must be equal-length vectors")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.any(s < -1e-12):
            raise ValueError("Brier scores cannot be negative")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "scores", np.maximum(s, 0.0))


@dataclass(frozen=True)
class IntegratedScore:
    """Integrated prediction error, optionally with explained variation."""

    b_integrated: float
    r2: float | None = None


def brier_time_grid(data: SurvivalData, tau: float) -> np.ndarray:
    """Evaluation grid: 0, every distinct observed time in (0, tau], and tau.

    Including the horizon itself keeps the integration domain [0, tau]
    covered even when tau (e.g. a median) is not an observed time.
    """
    t = np.unique(data.time)
    return np.unique(np.concatenate([[0.0, tau], t[t <= tau]]))


def _ipcw_weights(
    data: SurvivalData, t: float, censor: StepSurvivalCurve
) -> np.ndarray:
    at_risk = data.time >= t
    failed = (~at_risk) & (data.status == 1)
    w = np.zeros(data.n)
    if np.any(failed):
        g_fail = censor.left(data.time[failed])
        if np.any(g_fail <= 0):
            bad = data.time[failed][int(np.flatnonzero(g_fail <= 0)[0])]
            raise ValueError(
                f"censoring survival is zero just before time {float(bad)}; "
                "IPCW weight undefined"
            )
        w[failed] = 1.0 / g_fail
    if np.any(at_risk):
        g_t = float(censor.left(t))
        if g_t <= 0:
            raise ValueError(
                f"censoring survival is zero just before time {t}; IPCW "
                "weight undefined"
            )
        w[at_risk] = 1.0 / g_t
    return w


def brier_curve(
    predictions: np.ndarray,
    eval_data: SurvivalData,
    times: np.ndarray,
    censor: StepSurvivalCurve,
    *,
    tau: float | None = None,
    variant: str = "apparent",
    label: str = "model",
) -> BrierCurve:
    """IPCW Brier score over a time grid.

    ``predictions[i, j]`` is the predicted survival probability of subject i
    at ``times[j]``. Subjects censored before an evaluation time contribute
    weight zero there.
    """
    times = np.asarray(times, dtype=float)
    pred = np.atleast_2d(np.asarray(predictions, dtype=float))
    if pred.shape != (eval_data.n, len(times)):
        raise ValueError(
            f"predictions must be {eval_data.n} x {len(times)}, "
            f"got {pred.shape}"
        )
    if np.any(pred < -1e-12) or np.any(pred > 1 + 1e-12):
        raise ValueError("predictions must lie in [0, 1]")
    if tau is None:
        tau = float(np.median(eval_data.time))
    if tau > eval_data.time.max():
        raise ValueError("tau cannot exceed the largest observed time")
    scores = np.empty(len(times))
    for j, t in enumerate(times):
        y = (eval_data.time >= t).astype(float)
        w = _ipcw_weights(eval_data, t, censor)
        scores[j] = float(np.mean(w * (y - pred[:, j]) ** 2))
    return BrierCurve(times, scores, float(tau), variant, label)


def integrate_brier(curve: BrierCurve, tau: float | None = None) -> IntegratedScore:
    """Trapezoid-rule average of the curve over [0, tau]."""
    tau = curve.tau if tau is None else float(tau)
    if tau <= 0:
        raise ValueError("tau must be positive")
    t, s = curve.times, curve.scores
    inside = t <= tau
    if not np.any(inside):
        raise ValueError(f"no evaluation times at or below tau = {tau}")
    t_sub, s_sub = t[inside], s[inside]
    if t_sub[-1] < tau:
        if t[-1] > tau:
            s_tau = float(np.interp(tau, t, s))
            t_sub = np.append(t_sub, tau)
            s_sub = np.append(s_sub, s_tau)
        else:
            raise ValueError(
                f"tau = {tau} lies beyond the curve domain (max "
                f"{t[-1]})"
            )
    return IntegratedScore(float(np.trapezoid(s_sub, t_sub) / tau))


def r_squared(model: IntegratedScore, reference: IntegratedScore) -> float:
    """Explained residual variation 1 - B_model / B_reference."""
    if reference.b_integrated <= 0:
        raise ValueError("reference integrated Brier score must be positive")
    return 1.0 - model.b_integrated / reference.b_integrated


def _check_foldage(assignment: np.ndarray, status: np.ndarray, k: int) -> bool:
    # every training part (fold complement) must contain an event, or the
    # Cox refit on it is impossible
    for fold in range(k):
        if status[assignment != fold].sum() == 0:
            return False
    return True


def brier_cv(
    x: np.ndarray,
    data: SurvivalData,
    projection,
    *,
    n_folds: int = 5,
    repeats: int = 1,
    seed: int = 0,
    ties: str = "efron",
    tau: float | None = None,
    times: np.ndarray | None = None,
    with_reference: bool = False,
    max_refolds: int = 20,
):
    """Repeated K-fold cross-validated Brier curve for the score pipeline.

    For every repeat, subjects are dealt into ``n_folds`` random folds; the
    full projection (standardization, penalized correlation, factor model,
    rotation, scores) and the Cox model are refit on each training part and
    the held-out part is scored. Fold curves are averaged within a repeat
    and then across repeats, in fixed order, so results are reproducible
    bit for bit given the seed. A foldage leaving some training part
    without events cannot be refit and is redrawn, up to ``max_refolds``
    times.

    ``projection`` must provide ``fit(x_train) -> transform`` where
    ``transform(x_any)`` returns the factor-score matrix. The reference
    curve (feature-blind product-limit prediction, same folds) is computed
    alongside when ``with_reference`` is set.

    Censoring weights use the marginal reverse Kaplan-Meier estimate from
    the full data, keeping every model comparable on identical weights.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != data.n:
        raise ValueError("feature rows must match survival rows")
    if n_folds < 2 or repeats < 1:
        raise ValueError("need n_folds >= 2 and repeats >= 1")
    if tau is None:
        tau = float(np.median(data.time))
    if times is None:
        times = brier_time_grid(data, tau)
    censor = reverse_km(data)

    n = data.n
    model_avg = np.zeros(len(times))
    ref_avg = np.zeros(len(times))
    for b in range(repeats):
        assignment = None
        for retry in range(max_refolds + 1):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=(seed, b, retry))
            )
            perm = rng.permutation(n)
            cand = np.empty(n, dtype=int)
            cand[perm] = np.arange(n) % n_folds
            if _check_foldage(cand, data.status, n_folds):
                assignment = cand
                break
            logger.warning(
                "repeat %d: foldage %d left a training part without events; redrawing",
                b,
                retry,
            )
        if assignment is None:
            raise RuntimeError(
                f"could not draw folds with events in every part after "
                f"{max_refolds} retries"
            )
        fold_scores = np.zeros(len(times))
        fold_ref = np.zeros(len(times))
        for k in range(n_folds):
            test = assignment == k
            train = ~test
            transform = projection.fit(x[train])
            scores_train = transform(x[train])
            cox = fit_cox(scores_train, data.subset(train), ties=ties)
            pred = predict_survival_matrix(cox, transform(x[test]), times)
            test_data = data.subset(test)
            y = (test_data.time[:, None] >= times[None, :]).astype(float)
            w = np.stack(
                [_ipcw_weights(test_data, t, censor) for t in times], axis=1
            )
            fold_scores += np.mean(w * (y - pred) ** 2, axis=0)
            if with_reference:
                surv_train = km(data.subset(train))
                ref_pred = np.tile(surv_train(times), (test_data.n, 1))
                fold_ref += np.mean(w * (y - ref_pred) ** 2, axis=0)
        model_avg += fold_scores / n_folds
        ref_avg += fold_ref / n_folds
    model_curve = BrierCurve(
        times, model_avg / repeats, tau, "cv_averaged", "model"
    )
    if not with_reference:
        return model_curve
    ref_curve = BrierCurve(
        times, ref_avg / repeats, tau, "cv_averaged", "reference"
    )
    return model_curve, ref_curve
