"""Regression-type (Thomson) factor scores.

The conditional expectation of the latent factors given an observed row z is

    (I_m + Lambda' Psi^{-1} Lambda)^{-1} Lambda' Psi^{-1} z,

the Woodbury form of Lambda' (Lambda Lambda' + Psi)^{-1} z: only an m x m
symmetric positive-definite system is solved, never the p x p matrix.
Held-out observations are scored with the training loadings, uniquenesses,
and standardization statistics.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .factor import FactorModel
from .ingest import StandardizedMatrix

__all__ = ["FactorScores", "thomson_scores", "model_fingerprint"]


@dataclass(frozen=True)
class FactorScores:
    """Per-subject factor scores tied to the model that produced them."""

    values: np.ndarray
    fingerprint: str
    source: str

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]


def model_fingerprint(loadings: np.ndarray, psi: np.ndarray) -> str:
    """Stable hash of the (rotated) loadings and uniquenesses."""
    h = hashlib.sha256()
    h.update(np.asarray(loadings, float).tobytes())
    h.update(np.asarray(psi, float).tobytes())
    h.update(repr(np.asarray(loadings).shape).encode())
    return h.hexdigest()[:16]


def thomson_scores(
    z: StandardizedMatrix | np.ndarray, model: FactorModel
) -> FactorScores:
    """Score standardized observations with a fitted (rotated) model.

    ``z`` must be restricted to the same retained features, in the same
    order, as the correlation matrix the model was fitted on.
    """
    if isinstance(z, StandardizedMatrix):
        data = z.data
        source = "training" if z.fitted_on_self else "validation"
    else:
        data = np.atleast_2d(np.asarray(z, dtype=float))
        source = "training"
    lam, psi = model.loadings, model.uniquenesses
    if data.shape[1] != lam.shape[0]:
        raise ValueError(
            f"data has {data.shape[1]} columns, model expects {lam.shape[0]}"
        )
    w = lam / psi[:, None]
    m_mat = np.eye(model.m) + lam.T @ w
    c, low = sla.cho_factor(m_mat)
    scores = sla.cho_solve((c, low), (data @ w).T).T
    return FactorScores(
        values=scores,
        fingerprint=model_fingerprint(lam, psi),
        source=source,
    )
