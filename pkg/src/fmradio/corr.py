"""Correlation estimation: redundancy filtering and ridge-type shrinkage.

The shrunken estimator is the convex combination (1 - theta) * R + theta * I,
which is positive definite for every theta in (0, 1] and operates on the
eigenvalues of R only. The penalty theta is chosen by K-fold cross-validation
of the (Wishart) log-likelihood, evaluated cheaply through one
eigendecomposition per fold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .ingest import StandardizedMatrix

__all__ = [
    "CorrelationMatrix",
    "FilterResult",
    "ShrunkenCorrelation",
    "PenaltySearchResult",
    "sample_correlation",
    "redundancy_filter",
    "shrink",
    "cv_select_penalty",
    "penalty_objective",
    "condition_number",
]

_SYM_TOL = 1e-12


@dataclass(frozen=True)
class CorrelationMatrix:
    """Symmetric correlation matrix with unit diagonal and feature labels."""

    values: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("correlation matrix must be square")
        if len(self.feature_names) != v.shape[0]:
            raise ValueError("feature_names length must match matrix size")
        if np.max(np.abs(v - v.T)) > _SYM_TOL:
            raise ValueError("correlation matrix is not symmetric")
        if np.max(np.abs(np.diag(v) - 1.0)) > _SYM_TOL:
            raise ValueError("correlation matrix diagonal must be 1")
        if np.max(np.abs(v)) > 1.0 + _SYM_TOL:
            raise ValueError("correlation entries must lie in [-1, 1]")

    @property
    def p(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class FilterResult:
    """Outcome of redundancy filtering: which features survived and why."""

    retained: tuple[int, ...]
    removed: tuple[int, ...]
    filtered: CorrelationMatrix
    threshold: float


@dataclass(frozen=True)
class ShrunkenCorrelation:
    """Shrunken correlation matrix with the spectrum of its base matrix.

    ``eigenvalues``/``eigenvectors`` describe the unshrunken base; the
    shrunken matrix shares the eigenvectors and has eigenvalues
    (1 - theta) * d_j + theta, all strictly positive.
    """

    base: CorrelationMatrix
    theta: float
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    values: np.ndarray

    @property
    def p(self) -> int:
        return self.values.shape[0]

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.base.feature_names

    @property
    def shrunken_eigenvalues(self) -> np.ndarray:
        return (1.0 - self.theta) * self.eigenvalues + self.theta


@dataclass(frozen=True)
class PenaltySearchResult:
    """Cross-validated penalty choice with the full evaluation trace."""

    theta_opt: float
    cv_score: float
    n_folds: int
    fold_assignment: np.ndarray
    trace: tuple[tuple[float, float], ...] = field(repr=False)


def sample_correlation(
    z: StandardizedMatrix, names: tuple[str, ...] | None = None
) -> CorrelationMatrix:
    """Sample correlation Z'Z / (n - 1) of self-standardized data."""
    if not z.fitted_on_self:
        raise ValueError("sample_correlation expects data standardized on itself")
    n = z.n
    if n < 2:
        raise ValueError("need at least 2 rows")
    r = z.data.T @ z.data / (n - 1)
    r = (r + r.T) / 2.0
    np.fill_diagonal(r, 1.0)
    np.clip(r, -1.0, 1.0, out=r)
    if names is None:
        names = tuple(f"f{j + 1}" for j in range(z.p))
    return CorrelationMatrix(r, names)


def redundancy_filter(
    r: CorrelationMatrix,
    tau: float,
    tie_break: str = "first",
) -> FilterResult:
    """Iteratively drop the feature with the most |correlations| >= tau.

    The per-feature count includes the diagonal, so the procedure stops as
    soon as every count is below 2 (only the feature's self-correlation
    meets the threshold). Ties for the maximal count are resolved by
    ``tie_break``:

    - ``"first"`` (default): lowest index among the tied features;
    - ``"last"``: highest index (documented alternative, changes which
      representative of a redundancy cluster survives);
    - ``"sum"``: the tied feature whose absolute above-threshold
      correlations sum highest (first index on a further tie).
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    if tie_break not in ("first", "last", "sum"):
        raise ValueError(f"unknown tie_break rule '{tie_break}'")
    absr = np.abs(r.values)
    active = list(range(r.p))
    removed: list[int] = []
    while len(active) > 1:
        sub = absr[np.ix_(active, active)]
        hits = sub >= tau
        counts = hits.sum(axis=1)
        vmax = counts.max()
        if vmax < 2:
            break
        tied = np.flatnonzero(counts == vmax)
        if tie_break == "first":
            c = int(tied[0])
        elif tie_break == "last":
            c = int(tied[-1])
        else:
            sums = np.array([sub[t][hits[t]].sum() for t in tied])
            c = int(tied[int(np.argmax(sums))])
        removed.append(active.pop(c))
    retained = tuple(active)
    filt = CorrelationMatrix(
        r.values[np.ix_(retained, retained)],
        tuple(r.feature_names[j] for j in retained),
    )
    return FilterResult(retained, tuple(removed), filt, tau)


def _sorted_eigh(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition sorted descending, with a deterministic sign fix."""
    d, v = np.linalg.eigh(matrix)
    d, v = d[::-1], v[:, ::-1]
    # fix eigenvector signs: largest-magnitude component is made positive
    piv = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[piv, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return d, v * signs


def shrink(r: CorrelationMatrix, theta: float) -> ShrunkenCorrelation:
    """Convex combination (1 - theta) * R + theta * I, theta in (0, 1]."""
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    d, v = _sorted_eigh(r.values)
    values = (1.0 - theta) * r.values + theta * np.eye(r.p)
    return ShrunkenCorrelation(r, float(theta), d, v, values)


def _pearson(x: np.ndarray, context: str) -> np.ndarray:
    """Pearson correlation of the rows in x; errors on constant columns."""
    xc = x - x.mean(axis=0)
    norms = np.sqrt((xc**2).sum(axis=0))
    if np.any(norms == 0):
        j = int(np.flatnonzero(norms == 0)[0])
        raise RuntimeError(
            f"non-finite CV objective: column {j + 1} is constant within "
            f"the {context}"
        )
    r = (xc / norms).T @ (xc / norms)
    r = (r + r.T) / 2.0
    np.fill_diagonal(r, 1.0)
    return np.clip(r, -1.0, 1.0)


def penalty_objective(z: StandardizedMatrix, fold_assignment: np.ndarray):
    """Build the K-fold CV log-likelihood score phi(theta) for given folds.

    Per fold k the held-in correlation matrix is eigendecomposed once; the
    score is then, for any theta,

        phi(theta) = (1/K) * sum_k n_k * [ sum_j ln e_j(theta)
                                           + sum_j a_j / e_j(theta) ]

    with e_j(theta) = (1 - theta) d_j + theta the shrunken held-in
    eigenvalues and a_j the diagonal of V' R_k V (the held-out correlation
    matrix rotated to the held-in eigenbasis). The held-out R_k is never
    inverted, so singular folds are harmless.
    """
    fold_assignment = np.asarray(fold_assignment)
    labels = np.unique(fold_assignment)
    n_folds = len(labels)
    pieces = []
    for k in labels:
        in_k = fold_assignment == k
        if in_k.sum() < 2 or (~in_k).sum() < 2:
            raise ValueError(f"fold {k} too small: each part needs >= 2 rows")
        r_k = _pearson(z.data[in_k], f"held-out fold {k}")
        r_rest = _pearson(z.data[~in_k], f"complement of fold {k}")
        d = np.maximum(np.linalg.eigvalsh(r_rest), 0.0)
        _, v = np.linalg.eigh(r_rest)
        a = np.einsum("ij,ij->j", v, r_k @ v)
        pieces.append((int(in_k.sum()), d, a))

    def phi(theta: float) -> float:
        total = 0.0
        for n_k, d, a in pieces:
            e = (1.0 - theta) * d + theta
            total += n_k * (np.sum(np.log(e)) + np.sum(a / e))
        val = total / n_folds
        if not np.isfinite(val):
            raise RuntimeError(
                f"non-finite CV objective at theta={theta}"
            )
        return float(val)

    return phi


def make_folds(n: int, n_folds: int, seed: int) -> np.ndarray:
    """Shuffle rows with a seeded RNG and deal them round-robin into folds."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    assignment = np.empty(n, dtype=int)
    assignment[perm] = np.arange(n) % n_folds
    return assignment


def cv_select_penalty(
    z: StandardizedMatrix,
    n_folds: int = 5,
    seed: int = 0,
    *,
    lower: float = 1e-6,
    xatol: float = 1e-8,
    max_iter: int = 200,
) -> PenaltySearchResult:
    """Choose the shrinkage penalty minimizing the K-fold CV score.

    A coarse scan over (0, 1] brackets the minimum, which is then refined by
    bounded Brent minimization (absolute tolerance ``xatol``). The returned
    score is the smallest value over every evaluation, so it can never
    exceed the score of any theta in the trace.
    """
    n = z.n
    if not 2 <= n_folds <= n:
        raise ValueError(f"fold count must be in [2, {n}], got {n_folds}")
    folds = make_folds(n, n_folds, seed)
    phi = penalty_objective(z, folds)

    trace: list[tuple[float, float]] = []

    def phi_traced(theta: float) -> float:
        val = phi(float(theta))
        trace.append((float(theta), val))
        return val

    grid = np.unique(
        np.concatenate(
            [np.geomspace(lower, 1.0, 33), np.linspace(lower, 1.0, 33)]
        )
    )
    scan = np.array([phi_traced(t) for t in grid])
    best = int(np.argmin(scan))
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    if hi > lo:
        optimize.minimize_scalar(
            phi_traced,
            bounds=(lo, hi),
            method="bounded",
            options={"xatol": xatol, "maxiter": max_iter},
        )
    thetas, values = zip(*trace)
    ibest = int(np.argmin(values))
    return PenaltySearchResult(
        theta_opt=float(thetas[ibest]),
        cv_score=float(values[ibest]),
        n_folds=n_folds,
        fold_assignment=folds,
        trace=tuple(trace),
    )


def condition_number(s: ShrunkenCorrelation) -> float:
    """Ratio of the largest to the smallest shrunken eigenvalue."""
    e = s.shrunken_eigenvalues
    return float(e.max() / e.min())
