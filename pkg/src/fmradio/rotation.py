"""Normalized Varimax rotation to orthogonal simple structure.

Rows of the loading matrix are divided by the square root of their
communality (Kaiser normalization) before the rotation and re-multiplied
afterwards. The rotation itself cycles Jacobi-style over all column pairs,
applying in each plane the closed-form angle that maximizes the pairwise
varimax criterion; each accepted planar rotation cannot decrease the
criterion, and a sweep whose largest rotation angle falls below ``tol``
terminates the iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .factor import FactorModel

__all__ = ["RotationResult", "varimax", "rotated_model"]


@dataclass(frozen=True)
class RotationResult:
    """Orthogonal rotation matrix and the rotated loadings.

    Column signs are fixed so each rotated column sums to a nonnegative
    value, and columns are ordered by descending explained variance; the
    rotation matrix carries the same adjustments, so rotated = loadings @
    gamma always holds.
    """

    gamma: np.ndarray
    rotated: np.ndarray
    criterion: float
    sweeps: int
    history: tuple[float, ...] = field(default=(), repr=False)


def _criterion(b: np.ndarray) -> float:
    # varimax value of row-normalized loadings: sum_k [sum_j b^4 - (sum_j b^2)^2 / p]
    p = b.shape[0]
    b2 = b**2
    return float(np.sum(b2**2) - np.sum(b2.sum(axis=0) ** 2) / p)


def varimax(
    loadings: np.ndarray, tol: float = 1e-6, max_sweeps: int = 100
) -> RotationResult:
    """Rotate a p x m loading matrix to normalized-varimax simple structure.

    Parameters
    ----------
    loadings : ndarray
        Unrotated loadings; every row must have positive communality.
    tol : float
        Convergence threshold on the largest rotation angle (radians) seen
        during one sweep over all column pairs.
    max_sweeps : int
        Upper bound on full sweeps.
    """
    lam = np.atleast_2d(np.asarray(loadings, dtype=float))
    p, m = lam.shape
    comm = np.sqrt(np.sum(lam**2, axis=1))
    if np.any(comm <= 0):
        j = int(np.flatnonzero(comm <= 0)[0])
        raise ValueError(
            f"row {j + 1} has zero communality and cannot be normalized"
        )

    b = lam / comm[:, None]
    gamma = np.eye(m)
    history: list[float] = [_criterion(b)]
    sweeps = 0
    if m > 1:
        for sweeps in range(1, max_sweeps + 1):
            max_angle = 0.0
            for k in range(m - 1):
                for l in range(k + 1, m):
                    x, y = b[:, k], b[:, l]
                    u = x**2 - y**2
                    v = 2.0 * x * y
                    su, sv = u.sum(), v.sum()
                    num = 2.0 * (u @ v - su * sv / p)
                    den = (u @ u - v @ v) - (su**2 - sv**2) / p
                    angle = 0.25 * np.arctan2(num, den)
                    if abs(angle) < 1e-16:
                        continue
                    max_angle = max(max_angle, abs(angle))
                    c, s = np.cos(angle), np.sin(angle)
                    rot = np.array([[c, -s], [s, c]])
                    b[:, [k, l]] = b[:, [k, l]] @ rot
                    gamma[:, [k, l]] = gamma[:, [k, l]] @ rot
            history.append(_criterion(b))
            if max_angle < tol:
                break

    rotated = b * comm[:, None]

    flips = np.where(rotated.sum(axis=0) < 0, -1.0, 1.0)
    rotated = rotated * flips
    gamma = gamma * flips
    order = np.argsort(-np.sum(rotated**2, axis=0), kind="stable")
    rotated = rotated[:, order]
    gamma = gamma[:, order]

    return RotationResult(
        gamma=gamma,
        rotated=rotated,
        criterion=_criterion(rotated / comm[:, None]),
        sweeps=sweeps,
        history=tuple(history),
    )


def rotated_model(model: FactorModel, rotation: RotationResult) -> FactorModel:
    """The fitted model with its loadings replaced by the rotated ones."""
    return replace(model, loadings=rotation.rotated)
