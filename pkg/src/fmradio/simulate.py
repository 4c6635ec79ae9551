"""Monte-Carlo benchmark of latent-dimension selection rules.

Factor-structured Gaussian data are generated across a grid of feature
dimension, true latent dimension, communality, factor balance, and sample
size. Every feature loads 0.6 on its assigned factor and
sqrt((c - 0.36) / (m - 1)) on all others, so each row communality equals c
exactly; uniquenesses make the population matrix a proper correlation
matrix. Each replicate standardizes the draw, cross-validates the shrinkage
penalty, and tallies the dimension chosen by the eigenvalue bound, AIC,
BIC, and the sequential likelihood ratio test.
"""

from __future__ import annotations

import hashlib
import io
import csv
import logging
import os
import time as _time
from dataclasses import dataclass, field

import numpy as np

from .corr import cv_select_penalty, sample_correlation, shrink
from .factor import (
    fit_range,
    guttman_bound,
    ledermann_max,
    select_aic,
    select_bic,
    select_lrt,
)
from .ingest import RawDataset, standardize

logger = logging.getLogger(__name__)

__all__ = [
    "SimulationScenario",
    "GeneratorModel",
    "ScenarioResult",
    "build_loading_matrix",
    "simulate_dataset",
    "run_scenario",
    "emit_table",
    "parse_table",
    "default_m_range",
    "table_bins",
]

METHODS = ("GB", "AIC", "BIC", "LRT")

# indicator features per factor in the unbalanced design, p = 100
_UNBALANCED_100 = {
    5: [40, 20, 15, 15, 10],
    12: [20, 10, 10, 10, 10, 10, 5, 5, 5, 5, 5, 5],
    20: [10, 10] + [5] * 13 + [3] * 5,
}


@dataclass(frozen=True)
class SimulationScenario:
    """One cell of the benchmark grid."""

    p: int
    m_true: int
    communality: float
    balance: str
    n: int
    replicates: int = 100
    master_seed: int = 1

    def __post_init__(self):
        if self.balance not in ("balanced", "unbalanced"):
            raise ValueError("balance must be 'balanced' or 'unbalanced'")
        if not self.communality > 0.36:
            raise ValueError(
                "communality must exceed 0.36 (primary loading 0.6 squared)"
            )
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")

    @property
    def scenario_id(self) -> str:
        return (
            f"p{self.p}_m{self.m_true}_c{self.communality:g}_"
            f"{self.balance}_n{self.n}"
        )


@dataclass(frozen=True)
class GeneratorModel:
    """Population loadings and uniquenesses of the generating factor model."""

    loadings: np.ndarray
    uniquenesses: np.ndarray

    def sigma(self) -> np.ndarray:
        return self.loadings @ self.loadings.T + np.diag(self.uniquenesses)


@dataclass(frozen=True)
class ScenarioResult:
    """Selection histograms per method over the replicates of one scenario."""

    scenario: SimulationScenario
    histograms: dict[str, dict[int, int]]
    failures: dict[str, int]
    seconds_per_replicate: tuple[float, ...] = field(default=(), repr=False)


def _allocation(p: int, m: int, balance: str) -> list[int]:
    if balance == "balanced":
        base, extra = divmod(p, m)
        return [base + 1 if k < extra else base for k in range(m)]
    if p % 100 != 0 or m not in _UNBALANCED_100:
        raise ValueError(
            f"unbalanced design is defined for p in multiples of 100 and "
            f"m in {sorted(_UNBALANCED_100)}, got p={p}, m={m}"
        )
    scale = p // 100
    counts = [scale * c for c in _UNBALANCED_100[m]]
    return counts


def build_loading_matrix(
    p: int, m: int, c: float, balance: str = "balanced", sign_seed: int = 0
) -> GeneratorModel:
    """Population loading matrix with exact row communality c.

    Each feature carries a primary loading of 0.6 on its assigned factor
    and magnitude sqrt((c - 0.36) / (m - 1)) on every other factor. The
    secondary loadings receive random but reproducible signs
    (``sign_seed``): an all-positive pattern would stack the cross-loadings
    into one dominant general dimension and bury the remaining factors'
    eigenvalues near 1, which is not the structure being emulated. Signs do
    not affect the row communalities.
    """
    if m < 2:
        raise ValueError("need m >= 2 (secondary loadings divide by m - 1)")
    if not 0.36 < c < 1.0:
        raise ValueError("communality must lie in (0.36, 1)")
    counts = _allocation(p, m, balance)
    if sum(counts) != p:
        raise ValueError(f"allocation {counts} does not sum to p = {p}")
    lam_secondary = np.sqrt((c - 0.36) / (m - 1))
    rng = np.random.default_rng(sign_seed)
    lam = lam_secondary * rng.choice([-1.0, 1.0], size=(p, m))
    row = 0
    for k, size in enumerate(counts):
        lam[row : row + size, k] = 0.6
        row += size
    psi = 1.0 - np.sum(lam**2, axis=1)
    return GeneratorModel(lam, psi)


def simulate_dataset(
    gen: GeneratorModel, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw n rows from the zero-mean Gaussian implied by the generator."""
    chol = np.linalg.cholesky(gen.sigma())
    return rng.standard_normal((n, gen.loadings.shape[0])) @ chol.T


def default_m_range(m_true: int, p: int) -> range:
    """Search range 1 .. m_true + 5 (the tabulated span), capped by p."""
    return range(1, min(m_true + 5, ledermann_max(p)) + 1)


def _scenario_key(scenario: SimulationScenario) -> int:
    digest = hashlib.sha256(scenario.scenario_id.encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _replicate_rng(scenario: SimulationScenario, r: int) -> np.random.Generator:
    seq = np.random.SeedSequence(
        entropy=(scenario.master_seed, _scenario_key(scenario), r)
    )
    return np.random.default_rng(seq)


def scenario_generator(scenario: SimulationScenario) -> GeneratorModel:
    """The one population loading matrix shared by all replicates."""
    sign_seed = (scenario.master_seed + _scenario_key(scenario)) % 2**63
    return build_loading_matrix(
        scenario.p,
        scenario.m_true,
        scenario.communality,
        scenario.balance,
        sign_seed=sign_seed,
    )


def _one_replicate(scenario: SimulationScenario, r: int, m_range) -> dict:
    gen = scenario_generator(scenario)
    rng = _replicate_rng(scenario, r)
    draw = simulate_dataset(gen, scenario.n, rng)
    cv_seed = int(rng.integers(2**63))

    chosen: dict[str, int | None] = {meth: None for meth in METHODS}
    start = _time.perf_counter()
    try:
        z, _ = standardize(
            RawDataset(draw, tuple(f"f{j}" for j in range(scenario.p)))
        )
        r_mat = sample_correlation(z)
        pen = cv_select_penalty(z, n_folds=5, seed=cv_seed)
        s = shrink(r_mat, pen.theta_opt)
        chosen["GB"] = guttman_bound(s)[0]
        fits = fit_range(s, m_range)
        chosen["AIC"] = select_aic(s, scenario.n, m_range, fits).chosen_m
        chosen["BIC"] = select_bic(s, scenario.n, m_range, fits).chosen_m
        chosen["LRT"] = select_lrt(
            s, scenario.n, m_max=max(m_range), fits=fits
        ).chosen_m
    except Exception:
        logger.exception("replicate %d of %s failed", r, scenario.scenario_id)
    return {
        "chosen": chosen,
        "seconds": _time.perf_counter() - start,
    }


def _thread_cap() -> int | None:
    cap = os.environ.get("FMRADIO_THREADS")
    if cap:
        try:
            return max(1, int(cap))
        except ValueError:
            logger.warning("ignoring invalid FMRADIO_THREADS=%r", cap)
    return None


def run_scenario(
    scenario: SimulationScenario,
    m_range=None,
    n_jobs: int | None = None,
) -> ScenarioResult:
    """Run all replicates of a scenario and tally the selected dimensions.

    Replicates draw their randomness from per-replicate seeds derived from
    (master seed, scenario id, replicate index), so parallel and serial
    runs produce identical tallies. Failed replicates are logged and
    counted per method, never silently dropped.
    """
    if m_range is None:
        m_range = default_m_range(scenario.m_true, scenario.p)
    m_range = sorted(set(int(m) for m in m_range))
    if n_jobs is None:
        n_jobs = _thread_cap() or 1

    if n_jobs > 1:
        from joblib import Parallel, delayed

        outcomes = Parallel(n_jobs=n_jobs)(
            delayed(_one_replicate)(scenario, r, m_range)
            for r in range(scenario.replicates)
        )
    else:
        outcomes = [
            _one_replicate(scenario, r, m_range)
            for r in range(scenario.replicates)
        ]

    histograms: dict[str, dict[int, int]] = {meth: {} for meth in METHODS}
    failures = {meth: 0 for meth in METHODS}
    seconds = []
    for out in outcomes:  # fixed replicate order
        seconds.append(out["seconds"])
        for meth in METHODS:
            m = out["chosen"][meth]
            if m is None:
                failures[meth] += 1
            else:
                histograms[meth][m] = histograms[meth].get(m, 0) + 1
    return ScenarioResult(scenario, histograms, failures, tuple(seconds))


def table_bins(m_true: int) -> list[tuple[str, int, int]]:
    """Histogram bins (label, lo, hi) matching the benchmark table layout.

    Columns run from m_true - 4 to m_true + 4 with aggregated tails
    ("m <= a" when a > 1, and "m >= b").
    """
    lo_edge = max(m_true - 4, 1)
    hi_edge = m_true + 5
    bins: list[tuple[str, int, int]] = []
    if lo_edge > 1:
        bins.append((f"m<={lo_edge}", 0, lo_edge))
        start = lo_edge + 1
    else:
        start = 1
    for m in range(start, hi_edge):
        bins.append((f"m={m}", m, m))
    bins.append((f"m>={hi_edge}", hi_edge, 10**9))
    return bins


def _binned(histogram: dict[int, int], bins) -> dict[str, int]:
    out = {label: 0 for label, _, _ in bins}
    for m, count in histogram.items():
        for label, lo, hi in bins:
            if lo <= m <= hi:
                out[label] += count
                break
    return out


def emit_table(
    results: ScenarioResult | list[ScenarioResult], fmt: str = "text"
) -> str:
    """Render selection histograms as CSV or an aligned text table.

    Rows are method x sample size; columns are the m bins of the table
    layout for the scenario's true dimension. Wall-clock measurements are
    intentionally not part of the report.
    """
    if isinstance(results, ScenarioResult):
        results = [results]
    if not results:
        raise ValueError("no results to render")
    m_true = results[0].scenario.m_true
    bins = table_bins(m_true)
    header = ["method", "n"] + [label for label, _, _ in bins]
    rows = []
    for res in results:
        if res.scenario.m_true != m_true:
            raise ValueError("cannot mix scenarios with different true m")
        for meth in METHODS:
            counts = _binned(res.histograms[meth], bins)
            rows.append(
                [meth, str(res.scenario.n)]
                + [str(counts[label]) for label, _, _ in bins]
            )
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt == "text":
        widths = [
            max(len(header[j]), *(len(row[j]) for row in rows))
            for j in range(len(header))
        ]
        lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
        for row in rows:
            lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format '{fmt}'")


def parse_table(csv_text: str) -> dict[tuple[str, int], dict[str, int]]:
    """Inverse of ``emit_table(..., fmt='csv')``: binned counts per row."""
    reader = csv.reader(io.StringIO(csv_text))
    header = next(reader)
    labels = header[2:]
    out: dict[tuple[str, int], dict[str, int]] = {}
    for row in reader:
        meth, n = row[0], int(row[1])
        out[(meth, n)] = {
            label: int(cell) for label, cell in zip(labels, row[2:])
        }
    return out
