"""Command-line interface.

Subcommands mirror the pipeline stages (filter, shrink, fa, scores,
survfit, brier), plus the end-to-end `pipeline`, external `validate`, and
the `simulate` benchmark. Every command is deterministic given its inputs,
flags, and --seed; FMRADIO_THREADS caps parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

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
from .ingest import StandardizedMatrix, load_csv, standardize
from .pipeline import (
    PipelineConfig,
    PipelineError,
    _column_stats_subset,
    _prepare_out_dir,
    _write_curves_csv,
    _write_json,
    _write_matrix_csv,
    run_pipeline,
    validate_external,
)
from .rotation import rotated_model, varimax
from .scores import thomson_scores
from .simulate import SimulationScenario, emit_table, run_scenario
from .survival import SurvivalData, fit_cox, km

PROG = "fmradio"


def _add_io(parser):
    parser.add_argument("--input", required=True, help="input CSV path")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--force", action="store_true",
                        help="overwrite existing artifacts")
    parser.add_argument("--time-col", default="time",
                        help="survival time column")
    parser.add_argument("--status-col", default="status",
                        help="event status column")


def _csv_header(path) -> list[str]:
    import csv as _csv

    with open(path, newline="", encoding="utf-8") as fh:
        return [h.strip() for h in next(_csv.reader(fh))]


def _load_features(args, need_survival=False):
    """Load the input CSV, extracting survival columns when present."""
    header = _csv_header(args.input)
    has_outcome = args.time_col in header and args.status_col in header
    if need_survival and not has_outcome:
        raise PipelineError(
            "ingest",
            f"columns '{args.time_col}'/'{args.status_col}' not found in "
            f"{args.input}",
        )
    survival = (args.time_col, args.status_col) if has_outcome else None
    return load_csv(args.input, survival)


def _filtered_block(raw, tau):
    z, stats = standardize(raw)
    r = sample_correlation(z, raw.feature_names)
    filt = redundancy_filter(r, tau)
    retained = list(filt.retained)
    z_f = StandardizedMatrix(
        z.data[:, retained],
        _column_stats_subset(stats, retained),
        fitted_on_self=True,
    )
    return z_f, filt


def cmd_filter(args) -> int:
    raw = _load_features(args)
    _prepare_out_dir(args.out, ["filtered_correlation.csv", "filter.json"],
                     args.force)
    z, stats = standardize(raw)
    r = sample_correlation(z, raw.feature_names)
    filt = redundancy_filter(r, args.tau, tie_break=args.tie_break)
    _write_matrix_csv(
        os.path.join(args.out, "filtered_correlation.csv"),
        filt.filtered.feature_names,
        filt.filtered.values,
    )
    payload = {
        "tau": args.tau,
        "retained": list(filt.filtered.feature_names),
        "removed": [raw.feature_names[j] for j in filt.removed],
    }
    _write_json(os.path.join(args.out, "filter.json"), payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_shrink(args) -> int:
    raw = _load_features(args)
    _prepare_out_dir(
        args.out,
        ["filtered_correlation.csv", "shrunken_correlation.csv", "shrink.json"],
        args.force,
    )
    z_f, filt = _filtered_block(raw, args.tau)
    pen = cv_select_penalty(z_f, args.cv_folds, seed=args.seed)
    s = shrink(filt.filtered, pen.theta_opt)
    _write_matrix_csv(
        os.path.join(args.out, "filtered_correlation.csv"),
        filt.filtered.feature_names,
        filt.filtered.values,
    )
    _write_matrix_csv(
        os.path.join(args.out, "shrunken_correlation.csv"),
        filt.filtered.feature_names,
        s.values,
    )
    payload = {
        "retained": list(filt.filtered.feature_names),
        "removed": [raw.feature_names[j] for j in filt.removed],
        "theta": pen.theta_opt,
        "cv_score": pen.cv_score,
        "condition_number": condition_number(s),
    }
    _write_json(os.path.join(args.out, "shrink.json"), payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_fa(args) -> int:
    raw = _load_features(args)
    _prepare_out_dir(args.out, ["loadings.csv", "fa.json"], args.force)
    z_f, filt = _filtered_block(raw, args.tau)
    pen = cv_select_penalty(z_f, args.cv_folds, seed=args.seed)
    s = shrink(filt.filtered, pen.theta_opt)
    gb, _ = guttman_bound(s)
    if args.m.lower() == "auto":
        m = max(1, min(gb, ledermann_max(s.p)))
        print(
            f"auto latent dimension: eigenvalue bound {gb} used as an upper "
            "bound; inspect the diagnostics before accepting it",
            file=sys.stderr,
        )
    else:
        m = int(args.m)
    model = fit_ml_factor(s, m)
    if not args.no_rotate:
        model = rotated_model(model, varimax(model.loadings))
    diag = dimension_diagnostics(s, model)
    thr = threshold_loadings(model, args.omega)
    _write_matrix_csv(
        os.path.join(args.out, "loadings.csv"),
        [f"factor{k + 1}" for k in range(model.m)],
        model.loadings,
    )
    payload = {
        "m": model.m,
        "guttman_m": diag.guttman_m,
        "ledermann_max": diag.ledermann_max,
        "theta": pen.theta_opt,
        "kmo": diag.kmo,
        "smc_lower": [float(v) for v in diag.smc_lower],
        "communalities": [float(v) for v in diag.communalities],
        "variance_per_factor": [float(v) for v in diag.variance_per_factor],
        "cumulative_variance": diag.cumulative_variance,
        "determinacy": [float(v) for v in diag.determinacy],
        "weak_factors": [bool(b) for b in thr.weak_factors],
        "converged": model.converged,
        "discrepancy": model.discrepancy,
    }
    _write_json(os.path.join(args.out, "fa.json"), payload)
    print(json.dumps({k: payload[k] for k in
                      ("m", "guttman_m", "kmo", "cumulative_variance",
                       "converged")}, sort_keys=True))
    return 0


def cmd_scores(args) -> int:
    with open(args.model, encoding="utf-8") as fh:
        model_art = json.load(fh)
    if args.stats:
        with open(args.stats, encoding="utf-8") as fh:
            stats_art = json.load(fh)
    else:
        stats_art = model_art["stats"]
    raw = _load_features(args)
    _prepare_out_dir(args.out, ["scores.csv"], args.force)
    want = model_art["feature_names"]
    have = {name: j for j, name in enumerate(raw.feature_names)}
    missing = [name for name in want if name not in have]
    if missing:
        raise PipelineError("scores", f"missing feature columns: {missing}")
    cols = [have[name] for name in want]
    means = np.asarray(stats_art["means"], dtype=float)
    sds = np.asarray(stats_art["sds"], dtype=float)
    z = (raw.features[:, cols] - means) / sds
    lam = np.asarray(model_art["loadings"], dtype=float)
    psi = np.asarray(model_art["uniquenesses"], dtype=float)
    model = FactorModel(lam, psi, lam.shape[1], 0.0, 0, True,
                        np.zeros(lam.shape[0], bool))
    fscores = thomson_scores(z, model)
    _write_matrix_csv(
        os.path.join(args.out, "scores.csv"),
        [f"factor{k + 1}" for k in range(fscores.m)],
        fscores.values,
    )
    print(json.dumps({"n": fscores.n, "m": fscores.m}, sort_keys=True))
    return 0


def cmd_survfit(args) -> int:
    scores_raw = load_csv(args.scores)
    outcome_raw = load_csv(args.input, (args.time_col, args.status_col))
    _prepare_out_dir(args.out, ["survfit.json"], args.force)
    outcome = SurvivalData(outcome_raw.time, outcome_raw.status)
    cox = fit_cox(scores_raw.features, outcome, ties=args.ties)
    curve = km(outcome)
    payload = {
        "beta": [float(b) for b in cox.beta],
        "kept_columns": [int(j) for j in cox.kept_columns],
        "ties": cox.ties,
        "log_likelihood": cox.log_likelihood,
        "converged": cox.converged,
        "baseline_times": [float(t) for t in cox.baseline_times],
        "baseline_cumhaz": [float(h) for h in cox.baseline_cumhaz],
        "km_times": [float(t) for t in curve.times],
        "km_values": [float(v) for v in curve.values],
    }
    _write_json(os.path.join(args.out, "survfit.json"), payload)
    print(json.dumps({"beta": payload["beta"],
                      "converged": payload["converged"]}, sort_keys=True))
    return 0


def _pipeline_config(args) -> PipelineConfig:
    return PipelineConfig(
        input=args.input,
        out_dir=args.out,
        time_col=args.time_col,
        status_col=args.status_col,
        tau_r=args.tau,
        cv_folds=args.cv_folds,
        m=args.m,
        omega=args.omega,
        rotate=not args.no_rotate,
        ties=args.ties,
        tau=args.tau_integration,
        brier_mode=args.mode,
        brier_folds=args.folds,
        brier_repeats=args.repeats,
        seed=args.seed,
        force=args.force,
    )


def cmd_pipeline(args) -> int:
    report = run_pipeline(_pipeline_config(args))
    print(json.dumps(report.brier, sort_keys=True))
    return 0


def cmd_brier(args) -> int:
    if args.mode == "validate":
        if not args.train_dir:
            raise PipelineError("setup",
                                "--mode validate requires --train-dir")
        report = validate_external(
            args.train_dir,
            args.input,
            time_col=args.time_col,
            status_col=args.status_col,
            recalibrate=args.recalibrate,
            tau=args.tau_integration,
            ties=args.ties,
            out_dir=args.out,
            force=args.force,
        )
    else:
        report = run_pipeline(_pipeline_config(args))
    print(json.dumps(report.brier, sort_keys=True))
    return 0


def cmd_validate(args) -> int:
    report = validate_external(
        args.train_dir,
        args.input,
        time_col=args.time_col,
        status_col=args.status_col,
        recalibrate=args.recalibrate,
        tau=args.tau_integration,
        ties=args.ties,
        out_dir=args.out,
        force=args.force,
    )
    print(json.dumps(report.brier, sort_keys=True))
    return 0


def _read_scenario_file(path: str) -> dict:
    """Flat key=value scenario format; '#' starts a comment line."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: expected key=value, got '{line}'")
            key, val = (part.strip() for part in line.split("=", 1))
            out[key] = val
    return out


def cmd_simulate(args) -> int:
    if args.scenario:
        kv = _read_scenario_file(args.scenario)
        scenario = SimulationScenario(
            p=int(kv.get("p", args.p)),
            m_true=int(kv.get("m_true", args.m_true)),
            communality=float(kv.get("communality", args.communality)),
            balance=kv.get("balance", args.balance),
            n=int(kv.get("n", args.n)),
            replicates=int(kv.get("replicates", args.replicates)),
            master_seed=int(kv.get("seed", args.seed)),
        )
    else:
        scenario = SimulationScenario(
            p=args.p,
            m_true=args.m_true,
            communality=args.communality,
            balance=args.balance,
            n=args.n,
            replicates=args.replicates,
            master_seed=args.seed,
        )
    _prepare_out_dir(
        args.out,
        [f"{scenario.scenario_id}.csv", f"{scenario.scenario_id}.txt",
         f"{scenario.scenario_id}.json"],
        args.force,
    )
    result = run_scenario(scenario, n_jobs=args.jobs)
    csv_text = emit_table(result, fmt="csv")
    txt_text = emit_table(result, fmt="text")
    base = os.path.join(args.out, scenario.scenario_id)
    with open(base + ".csv", "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    with open(base + ".txt", "w", encoding="utf-8") as fh:
        fh.write(txt_text)
    _write_json(
        base + ".json",
        {
            "scenario": scenario.scenario_id,
            "histograms": {
                meth: {str(m): c for m, c in sorted(hist.items())}
                for meth, hist in result.histograms.items()
            },
            "failures": result.failures,
        },
    )
    mean_s = float(np.mean(result.seconds_per_replicate))
    print(txt_text, end="")
    print(f"mean seconds per replicate: {mean_s:.2f}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="redundancy filtering, penalized correlation shrinkage, "
        "ML factor compression, factor scoring, and survival "
        "prediction-error evaluation",
    )
    parser.add_argument("--version", action="version",
                        version=f"{PROG} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_filter = sub.add_parser("filter", help="redundancy-filter features")
    _add_io(p_filter)
    p_filter.add_argument("--tau", type=float, default=0.95)
    p_filter.add_argument("--tie-break", default="first",
                          choices=["first", "last", "sum"])
    p_filter.set_defaults(func=cmd_filter)

    p_shrink = sub.add_parser("shrink", help="cross-validated shrinkage")
    _add_io(p_shrink)
    p_shrink.add_argument("--tau", type=float, default=0.95)
    p_shrink.add_argument("--cv-folds", type=int, default=5)
    p_shrink.add_argument("--seed", type=int, default=1)
    p_shrink.set_defaults(func=cmd_shrink)

    p_fa = sub.add_parser("fa", help="ML factor analysis with rotation")
    _add_io(p_fa)
    p_fa.add_argument("--tau", type=float, default=0.95)
    p_fa.add_argument("--cv-folds", type=int, default=5)
    p_fa.add_argument("--seed", type=int, default=1)
    p_fa.add_argument("--m", default="auto",
                      help="latent dimension or AUTO (eigenvalue bound)")
    p_fa.add_argument("--omega", type=float, default=0.3)
    p_fa.add_argument("--no-rotate", action="store_true")
    p_fa.set_defaults(func=cmd_fa)

    p_scores = sub.add_parser("scores", help="Thomson factor scores")
    _add_io(p_scores)
    p_scores.add_argument("--model", required=True, help="model.json path")
    p_scores.add_argument("--stats", default=None,
                          help="optional training stats JSON")
    p_scores.set_defaults(func=cmd_scores)

    p_surv = sub.add_parser("survfit", help="Cox model on factor scores")
    _add_io(p_surv)
    p_surv.add_argument("--scores", required=True, help="scores CSV path")
    p_surv.add_argument("--ties", default="efron",
                        choices=["efron", "breslow"])
    p_surv.set_defaults(func=cmd_survfit)

    def _add_pipeline_flags(sp, tau_flag="--tau", horizon_flag="--tau-integration"):
        _add_io(sp)
        sp.add_argument(tau_flag, dest="tau", type=float, default=0.95,
                        help="redundancy threshold")
        sp.add_argument("--cv-folds", type=int, default=5)
        sp.add_argument("--m", default="auto")
        sp.add_argument("--omega", type=float, default=0.3)
        sp.add_argument("--no-rotate", action="store_true")
        sp.add_argument("--ties", default="efron",
                        choices=["efron", "breslow"])
        sp.add_argument(horizon_flag, dest="tau_integration",
                        default="median",
                        help="integration horizon (MEDIAN or a number)")
        sp.add_argument("--mode", default="apparent",
                        choices=["apparent", "cv", "validate"])
        sp.add_argument("--folds", type=int, default=5,
                        help="prediction-error CV folds")
        sp.add_argument("--repeats", type=int, default=500,
                        help="prediction-error CV repeats (lower this for "
                        "desk-scale runs)")
        sp.add_argument("--seed", type=int, default=1)

    p_pipe = sub.add_parser("pipeline", help="run the full pipeline")
    _add_pipeline_flags(p_pipe)
    p_pipe.set_defaults(func=cmd_pipeline)

    # here the horizon takes the plain --tau flag; the redundancy
    # threshold moves to --filter-tau
    p_brier = sub.add_parser("brier", help="prediction-error curves")
    _add_pipeline_flags(p_brier, tau_flag="--filter-tau",
                        horizon_flag="--tau")
    p_brier.add_argument("--train-dir", default=None,
                         help="trained artifact directory (validate mode)")
    p_brier.add_argument("--recalibrate", action="store_true")
    p_brier.set_defaults(func=cmd_brier)

    p_val = sub.add_parser("validate", help="external validation")
    _add_io(p_val)
    p_val.add_argument("--train-dir", required=True)
    p_val.add_argument("--recalibrate", action="store_true")
    p_val.add_argument("--ties", default="efron",
                       choices=["efron", "breslow"])
    p_val.add_argument("--tau-integration", default="median")
    p_val.set_defaults(func=cmd_validate)

    p_sim = sub.add_parser("simulate", help="dimension-selection benchmark")
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--force", action="store_true")
    p_sim.add_argument("--scenario", default=None,
                       help="key=value scenario file")
    p_sim.add_argument("--p", type=int, default=100)
    p_sim.add_argument("--m-true", type=int, default=5)
    p_sim.add_argument("--communality", type=float, default=0.9)
    p_sim.add_argument("--balance", default="balanced",
                       choices=["balanced", "unbalanced"])
    p_sim.add_argument("--n", type=int, default=50)
    p_sim.add_argument("--replicates", type=int, default=100)
    p_sim.add_argument("--seed", type=int, default=1)
    p_sim.add_argument("--jobs", type=int, default=None,
                       help="parallel replicates (default FMRADIO_THREADS)")
    p_sim.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"{PROG}: error {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"{PROG}: error {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
