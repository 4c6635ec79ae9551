"""End-to-end orchestration: filter, shrink, compress, score, evaluate.

Stages run in a fixed order and every stage failure is re-raised with the
stage name attached. All artifacts are plain CSV/JSON, written only into
the requested output directory and never overwritten unless forced; a run
is a deterministic function of (inputs, configuration, seed).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .corr import (
    condition_number,
    cv_select_penalty,
    redundancy_filter,
    sample_correlation,
    shrink,
)
from .factor import (
    FactorModel,
    dimension_diagnostics,
    fit_ml_factor,
    guttman_bound,
    ledermann_max,
    threshold_loadings,
)
from .ingest import ColumnStats, RawDataset, StandardizedMatrix, load_csv, standardize
from .rotation import rotated_model, varimax
from .scores import thomson_scores
from .survival import (
    BrierCurve,
    CoxModel,
    StepSurvivalCurve,
    SurvivalData,
    brier_curve,
    brier_cv,
    brier_time_grid,
    fit_cox,
    integrate_brier,
    km,
    predict_survival_matrix,
    r_squared,
    reverse_km,
)

__all__ = [
    "PipelineConfig",
    "PipelineError",
    "RunReport",
    "ScorePipeline",
    "run_pipeline",
    "validate_external",
]


class PipelineError(RuntimeError):
    """Stage-tagged failure raised by the orchestrated pipeline."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    """Settings for one pipeline run; defaults follow the applied analyses."""

    input: str
    out_dir: str
    time_col: str = "time"
    status_col: str = "status"
    tau_r: float = 0.95
    cv_folds: int = 5
    m: int | str = "auto"
    omega: float = 0.3
    rotate: bool = True
    ties: str = "efron"
    tau: float | str = "median"
    brier_mode: str = "apparent"
    brier_folds: int = 5
    brier_repeats: int = 500
    seed: int = 1
    force: bool = False

    def resolved_m(self) -> int | None:
        if isinstance(self.m, str):
            if self.m.lower() == "auto":
                return None
            return int(self.m)
        return int(self.m)


@dataclass
class RunReport:
    """Self-contained summary: the report plus inputs reproduces the run."""

    version: str
    config: dict
    seed: int
    n: int = 0
    p: int = 0
    filter: dict = field(default_factory=dict)
    shrinkage: dict = field(default_factory=dict)
    factor: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    cox: dict = field(default_factory=dict)
    brier: dict = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, PipelineError):
                raise PipelineError(name, str(exc)) from exc
            return False

    return _Ctx()


def _write_matrix_csv(path: str, names, matrix: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in np.atleast_2d(matrix):
            writer.writerow([repr(float(v)) for v in row])


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_curves_csv(path: str, curves: list[BrierCurve]) -> None:
    """Plot-ready long format: one (model, time, score) row per point."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "time", "score"])
        for curve in curves:
            for t, s in zip(curve.times, curve.scores):
                writer.writerow([curve.label, repr(float(t)), repr(float(s))])


def _write_curves_wide_csv(path: str, curves: list[BrierCurve]) -> None:
    """Wide format: the shared time grid with one score column per model."""
    times = curves[0].times
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time"] + [c.label for c in curves])
        for j, t in enumerate(times):
            writer.writerow(
                [repr(float(t))]
                + [repr(float(c.scores[j])) for c in curves]
            )


def _prepare_out_dir(out_dir: str, filenames: list[str], force: bool) -> None:
    os.makedirs(out_dir, exist_ok=True)
    if force:
        return
    clashes = [
        f for f in filenames if os.path.exists(os.path.join(out_dir, f))
    ]
    if clashes:
        raise PipelineError(
            "setup",
            f"artifacts already exist in {out_dir}: {clashes}; "
            "pass --force to overwrite",
        )


def _column_stats_subset(stats: ColumnStats, idx) -> ColumnStats:
    return ColumnStats(stats.means[list(idx)], stats.sds[list(idx)])


class ScorePipeline:
    """Outcome-blind projection: raw features in, factor scores out.

    ``fit`` standardizes the training block, cross-validates the shrinkage
    penalty, fits and rotates the factor model, and returns a transform
    that maps any feature block (training or held-out) onto the factor
    scores using the training statistics and solution.
    """

    def __init__(
        self,
        cv_folds: int = 5,
        seed: int = 0,
        m: int | None = None,
        rotate: bool = True,
    ):
        self.cv_folds = cv_folds
        self.seed = seed
        self.m = m
        self.rotate = rotate
        self.last_fit: dict = {}

    def fit(self, x_train: np.ndarray):
        x_train = np.atleast_2d(np.asarray(x_train, dtype=float))
        names = tuple(f"f{j + 1}" for j in range(x_train.shape[1]))
        z, stats = standardize(RawDataset(x_train, names))
        r = sample_correlation(z, names)
        pen = cv_select_penalty(z, self.cv_folds, seed=self.seed)
        s = shrink(r, pen.theta_opt)
        if self.m is None:
            gb = guttman_bound(s)[0]
            m = max(1, min(gb, ledermann_max(s.p)))
        else:
            m = max(1, min(int(self.m), ledermann_max(s.p)))
        model = fit_ml_factor(s, m)
        if self.rotate:
            model = rotated_model(model, varimax(model.loadings))
        self.last_fit = {"theta": pen.theta_opt, "m": m, "model": model}

        def transform(x_any: np.ndarray) -> np.ndarray:
            x_any = np.atleast_2d(np.asarray(x_any, dtype=float))
            zz = (x_any - stats.means) / stats.sds
            return thomson_scores(
                StandardizedMatrix(zz, stats, fitted_on_self=False), model
            ).values

        return transform


ARTIFACTS = [
    "filtered_correlation.csv",
    "shrunken_correlation.csv",
    "model.json",
    "scores.csv",
    "survfit.json",
    "brier_curves.csv",
    "brier_curves_wide.csv",
    "brier.json",
    "report.json",
]


def run_pipeline(config: PipelineConfig) -> RunReport:
    """Execute filter -> shrink -> factor -> rotate -> scores -> Cox
    -> prediction error, writing every artifact to the output directory."""
    report = RunReport(
        version=__version__,
        config={**asdict(config)},
        seed=config.seed,
    )
    _prepare_out_dir(config.out_dir, ARTIFACTS, config.force)

    with _stage("ingest"):
        raw = load_csv(config.input, (config.time_col, config.status_col))
        if raw.time is None:
            raise ValueError("pipeline requires survival columns")
        outcome = SurvivalData(raw.time, raw.status)
        report.n, report.p = raw.n, raw.p

    with _stage("standardize"):
        z, stats = standardize(raw)

    with _stage("filter"):
        r_full = sample_correlation(z, raw.feature_names)
        filt = redundancy_filter(r_full, config.tau_r)
        retained = list(filt.retained)
        z_f = StandardizedMatrix(
            z.data[:, retained],
            _column_stats_subset(stats, retained),
            fitted_on_self=True,
        )
        x_f_raw = raw.features[:, retained]
        report.filter = {
            "tau": config.tau_r,
            "n_retained": len(retained),
            "n_removed": len(filt.removed),
            "retained_names": list(filt.filtered.feature_names),
            "removed_names": [raw.feature_names[j] for j in filt.removed],
        }

    with _stage("shrink"):
        pen = cv_select_penalty(z_f, config.cv_folds, seed=config.seed)
        s = shrink(filt.filtered, pen.theta_opt)
        report.shrinkage = {
            "theta": pen.theta_opt,
            "cv_score": pen.cv_score,
            "cv_folds": config.cv_folds,
            "condition_number": condition_number(s),
        }

    with _stage("fa"):
        gb, _ = guttman_bound(s)
        m_cfg = config.resolved_m()
        if m_cfg is None:
            m = max(1, min(gb, ledermann_max(s.p)))
        else:
            m = m_cfg
        model = fit_ml_factor(s, m)

    with _stage("rotate"):
        if config.rotate and model.m >= 1:
            rot = varimax(model.loadings)
            model = rotated_model(model, rot)

    with _stage("fa"):
        diag = dimension_diagnostics(s, model)
        thr = threshold_loadings(model, config.omega)
        report.factor = {
            "m": model.m,
            "guttman_m": gb,
            "m_source": "auto" if m_cfg is None else "override",
            "discrepancy": model.discrepancy,
            "iterations": model.iterations,
            "converged": model.converged,
            "n_heywood": int(model.heywood.sum()),
            "rotated": bool(config.rotate),
        }
        report.diagnostics = {
            "kmo": diag.kmo,
            "cumulative_variance": diag.cumulative_variance,
            "variance_per_factor": [float(v) for v in diag.variance_per_factor],
            "determinacy": [float(v) for v in diag.determinacy],
            "ledermann_max": diag.ledermann_max,
            "weak_factors": [bool(b) for b in thr.weak_factors],
            "omega": config.omega,
        }
        if m_cfg is None and gb != model.m:
            report.factor["note"] = (
                "auto dimension floored at 1 (eigenvalue bound was "
                f"{gb}); review the diagnostics"
            )

    with _stage("scores"):
        fscores = thomson_scores(z_f, model)

    with _stage("survfit"):
        cox = fit_cox(fscores.values, outcome, ties=config.ties)
        train_km = km(outcome)
        report.cox = {
            "beta": [float(b) for b in cox.beta],
            "ties": cox.ties,
            "log_likelihood": cox.log_likelihood,
            "iterations": cox.iterations,
            "converged": cox.converged,
        }

    with _stage("brier"):
        tau = (
            float(np.median(outcome.time))
            if str(config.tau).lower() == "median"
            else float(config.tau)
        )
        grid = brier_time_grid(outcome, tau)
        censor = reverse_km(outcome)
        if config.brier_mode == "apparent":
            pred = predict_survival_matrix(cox, fscores.values, grid)
            curve = brier_curve(
                pred, outcome, grid, censor, tau=tau, variant="apparent"
            )
            ref_pred = np.tile(train_km(grid), (outcome.n, 1))
            ref_curve = brier_curve(
                ref_pred,
                outcome,
                grid,
                censor,
                tau=tau,
                variant="apparent",
                label="reference",
            )
        elif config.brier_mode == "cv":
            projection = ScorePipeline(
                cv_folds=config.cv_folds,
                seed=config.seed,
                m=config.resolved_m(),
                rotate=config.rotate,
            )
            curve, ref_curve = brier_cv(
                x_f_raw,
                outcome,
                projection,
                n_folds=config.brier_folds,
                repeats=config.brier_repeats,
                seed=config.seed,
                ties=config.ties,
                tau=tau,
                times=grid,
                with_reference=True,
            )
        else:
            raise ValueError(
                f"unknown brier mode '{config.brier_mode}' (use apparent|cv)"
            )
        b_model = integrate_brier(curve, tau)
        b_ref = integrate_brier(ref_curve, tau)
        r2 = r_squared(b_model, b_ref)
        report.brier = {
            "mode": config.brier_mode,
            "tau": tau,
            "b_integrated": b_model.b_integrated,
            "b_reference": b_ref.b_integrated,
            "r2": r2,
        }

    with _stage("report"):
        out = config.out_dir
        _write_matrix_csv(
            os.path.join(out, "filtered_correlation.csv"),
            filt.filtered.feature_names,
            filt.filtered.values,
        )
        _write_matrix_csv(
            os.path.join(out, "shrunken_correlation.csv"),
            filt.filtered.feature_names,
            s.values,
        )
        _write_json(
            os.path.join(out, "model.json"),
            {
                "feature_names": list(filt.filtered.feature_names),
                "theta": pen.theta_opt,
                "m": model.m,
                "loadings": [[float(v) for v in row] for row in model.loadings],
                "uniquenesses": [float(v) for v in model.uniquenesses],
                "stats": {
                    "means": [float(v) for v in z_f.stats.means],
                    "sds": [float(v) for v in z_f.stats.sds],
                },
                "rotated": bool(config.rotate),
                "converged": model.converged,
            },
        )
        _write_matrix_csv(
            os.path.join(out, "scores.csv"),
            [f"factor{k + 1}" for k in range(model.m)],
            fscores.values,
        )
        _write_json(
            os.path.join(out, "survfit.json"),
            {
                "beta": [float(b) for b in cox.beta],
                "kept_columns": [int(j) for j in cox.kept_columns],
                "ties": cox.ties,
                "log_likelihood": cox.log_likelihood,
                "baseline_times": [float(t) for t in cox.baseline_times],
                "baseline_cumhaz": [float(h) for h in cox.baseline_cumhaz],
                "km_times": [float(t) for t in train_km.times],
                "km_values": [float(v) for v in train_km.values],
            },
        )
        _write_curves_csv(
            os.path.join(out, "brier_curves.csv"), [curve, ref_curve]
        )
        _write_curves_wide_csv(
            os.path.join(out, "brier_curves_wide.csv"), [curve, ref_curve]
        )
        _write_json(os.path.join(out, "brier.json"), report.brier)
        report.artifacts = ARTIFACTS[:]
        _write_json(os.path.join(out, "report.json"), report.to_dict())

    return report


def validate_external(
    train_dir: str,
    validation_path: str,
    *,
    time_col: str = "time",
    status_col: str = "status",
    recalibrate: bool = False,
    tau: float | str = "median",
    ties: str = "efron",
    out_dir: str | None = None,
    force: bool = False,
) -> RunReport:
    """Score held-out data with a trained factor solution and evaluate it.

    Validation rows are standardized with the training statistics, scored
    with the training loadings/uniquenesses, and evaluated against the
    validation outcomes. ``recalibrate`` refits the Cox coefficients on the
    validation scores first (the projection itself stays fixed).
    """
    with _stage("ingest"):
        with open(os.path.join(train_dir, "model.json"), encoding="utf-8") as fh:
            model_art = json.load(fh)
        with open(os.path.join(train_dir, "survfit.json"), encoding="utf-8") as fh:
            surv_art = json.load(fh)
        raw = load_csv(validation_path, (time_col, status_col))
        if raw.time is None:
            raise ValueError("validation data requires survival columns")
        outcome = SurvivalData(raw.time, raw.status)

    with _stage("scores"):
        want = model_art["feature_names"]
        have = {name: j for j, name in enumerate(raw.feature_names)}
        missing = [name for name in want if name not in have]
        if missing:
            raise ValueError(
                f"validation data lacks feature columns: {missing}"
            )
        cols = [have[name] for name in want]
        stats = ColumnStats(
            np.asarray(model_art["stats"]["means"]),
            np.asarray(model_art["stats"]["sds"]),
        )
        # training stats apply regardless of the held-out spread; columns
        # that happen to be constant here are only worth a note
        flat = [
            want[j]
            for j in np.flatnonzero(raw.features[:, cols].std(axis=0) == 0)
        ]
        zv = StandardizedMatrix(
            (raw.features[:, cols] - stats.means) / stats.sds,
            stats,
            fitted_on_self=False,
        )
        lam = np.asarray(model_art["loadings"], dtype=float)
        psi = np.asarray(model_art["uniquenesses"], dtype=float)
        model = FactorModel(
            loadings=lam,
            uniquenesses=psi,
            m=lam.shape[1],
            discrepancy=0.0,
            iterations=0,
            converged=bool(model_art["converged"]),
            heywood=np.zeros(lam.shape[0], dtype=bool),
        )
        fscores = thomson_scores(zv, model)

    with _stage("survfit"):
        if recalibrate:
            cox = fit_cox(fscores.values, outcome, ties=ties)
            baseline_times = cox.baseline_times
            baseline_cumhaz = cox.baseline_cumhaz
            beta = cox.beta
            kept = cox.kept_columns
        else:
            beta = np.asarray(surv_art["beta"], dtype=float)
            baseline_times = np.asarray(surv_art["baseline_times"], dtype=float)
            baseline_cumhaz = np.asarray(
                surv_art["baseline_cumhaz"], dtype=float
            )
            kept = np.asarray(
                surv_art.get("kept_columns", list(range(len(beta)))), dtype=int
            )

    with _stage("brier"):
        tau_val = (
            float(np.median(outcome.time))
            if str(tau).lower() == "median"
            else float(tau)
        )
        grid = brier_time_grid(outcome, tau_val)
        censor = reverse_km(outcome)
        cox_eff = CoxModel(
            beta=beta,
            baseline_times=baseline_times,
            baseline_cumhaz=baseline_cumhaz,
            ties=ties,
            log_likelihood=0.0,
            iterations=0,
            converged=True,
            kept_columns=kept,
        )
        pred = predict_survival_matrix(cox_eff, fscores.values, grid)
        curve = brier_curve(
            pred, outcome, grid, censor, tau=tau_val, variant="validated"
        )
        ref_times = np.asarray(surv_art["km_times"], dtype=float)
        ref_values = np.asarray(surv_art["km_values"], dtype=float)
        train_km_curve = StepSurvivalCurve(ref_times, ref_values)
        ref_pred = np.tile(train_km_curve(grid), (outcome.n, 1))
        ref_curve = brier_curve(
            ref_pred,
            outcome,
            grid,
            censor,
            tau=tau_val,
            variant="validated",
            label="reference",
        )
        b_model = integrate_brier(curve, tau_val)
        b_ref = integrate_brier(ref_curve, tau_val)

    report = RunReport(
        version=__version__,
        config={
            "train_dir": train_dir,
            "validation": validation_path,
            "recalibrate": recalibrate,
            "tau": tau,
            "ties": ties,
        },
        seed=0,
        n=outcome.n,
        p=raw.p,
        brier={
            "mode": "validated",
            "recalibrated": recalibrate,
            "tau": tau_val,
            "b_integrated": b_model.b_integrated,
            "b_reference": b_ref.b_integrated,
            "r2": r_squared(b_model, b_ref),
        },
    )
    if flat:
        report.factor["note"] = (
            f"validation columns with zero variance: {flat}; training "
            "statistics were applied regardless"
        )
    if out_dir is not None:
        names = ["validation_scores.csv", "validation_brier_curves.csv",
                 "validation_report.json"]
        _prepare_out_dir(out_dir, names, force)
        with _stage("report"):
            _write_matrix_csv(
                os.path.join(out_dir, "validation_scores.csv"),
                [f"factor{k + 1}" for k in range(fscores.m)],
                fscores.values,
            )
            _write_curves_csv(
                os.path.join(out_dir, "validation_brier_curves.csv"),
                [curve, ref_curve],
            )
            report.artifacts = names
            _write_json(
                os.path.join(out_dir, "validation_report.json"),
                report.to_dict(),
            )
    return report
