import csv
import json
import os

import numpy as np
import pytest

from fmradio.cli import main
from fmradio.pipeline import (
    PipelineConfig,
    PipelineError,
    ScorePipeline,
    run_pipeline,
    validate_external,
)


def write_survival_csv(path, x, time, status, names=None):
    names = names or [f"f{j + 1}" for j in range(x.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "status"] + list(names))
        for i in range(x.shape[0]):
            writer.writerow(
                [repr(float(time[i])), int(status[i])]
                + [repr(float(v)) for v in x[i]]
            )


def one_factor_survival_data(rng, n=120, p=8, collinear=True):
    """Single-latent-factor features driving an exponential event time."""
    lam = np.linspace(0.85, 0.6, p)
    factor = rng.standard_normal(n)
    x = factor[:, None] * lam[None, :] + \
        rng.standard_normal((n, p)) * np.sqrt(1 - lam**2)
    if collinear:
        # near-duplicate column to exercise the redundancy filter
        x = np.column_stack([x, x[:, 0] + rng.normal(0, 0.02, n)])
    hazard = np.exp(0.8 * factor)
    event = rng.exponential(1.0 / hazard) + 0.01
    cens = rng.exponential(2.0, n) + 0.01
    time = np.minimum(event, cens)
    status = (event <= cens).astype(int)
    if status.sum() < 10:
        status[:10] = 1
    return x, time, status


@pytest.fixture
def survival_csv(tmp_path):
    rng = np.random.default_rng(0)
    x, time, status = one_factor_survival_data(rng)
    path = tmp_path / "train.csv"
    write_survival_csv(path, x, time, status)
    return path


class TestRunPipeline:
    def test_end_to_end_single_factor(self, survival_csv, tmp_path):
        out = tmp_path / "run"
        config = PipelineConfig(input=str(survival_csv), out_dir=str(out),
                                seed=3)
        report = run_pipeline(config)
        assert report.factor["guttman_m"] == 1
        assert report.factor["m"] == 1
        assert report.factor["converged"]
        assert np.isfinite(report.brier["b_integrated"])
        assert report.filter["n_removed"] >= 1  # the planted duplicate
        for name in report.artifacts:
            assert (out / name).exists()

    def test_deterministic_artifacts(self, survival_csv, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        snaps = []
        for out in (out1, out2):
            config = PipelineConfig(input=str(survival_csv),
                                    out_dir=str(out), seed=9)
            report = run_pipeline(config)
            snaps.append({
                name: (out / name).read_bytes()
                for name in report.artifacts if name != "report.json"
            })
        assert snaps[0] == snaps[1]

    def test_missing_input_tagged_ingest(self, tmp_path):
        config = PipelineConfig(input=str(tmp_path / "nope.csv"),
                                out_dir=str(tmp_path / "out"))
        with pytest.raises(PipelineError) as err:
            run_pipeline(config)
        assert err.value.stage == "ingest"

    def test_overwrite_protection(self, survival_csv, tmp_path):
        out = tmp_path / "run"
        config = PipelineConfig(input=str(survival_csv), out_dir=str(out),
                                seed=3)
        run_pipeline(config)
        with pytest.raises(PipelineError, match="force"):
            run_pipeline(config)
        run_pipeline(PipelineConfig(input=str(survival_csv),
                                    out_dir=str(out), seed=3, force=True))

    def test_cv_mode_runs(self, survival_csv, tmp_path):
        config = PipelineConfig(
            input=str(survival_csv),
            out_dir=str(tmp_path / "cv"),
            seed=3,
            brier_mode="cv",
            brier_folds=4,
            brier_repeats=2,
        )
        report = run_pipeline(config)
        assert report.brier["mode"] == "cv"
        assert np.isfinite(report.brier["r2"])


class TestValidateExternal:
    def test_self_validation_matches_apparent(self, survival_csv, tmp_path):
        out = tmp_path / "train"
        config = PipelineConfig(input=str(survival_csv), out_dir=str(out),
                                seed=5)
        train_report = run_pipeline(config)
        val_report = validate_external(str(out), str(survival_csv))
        assert val_report.brier["b_integrated"] == pytest.approx(
            train_report.brier["b_integrated"], abs=1e-12
        )
        assert val_report.brier["b_reference"] == pytest.approx(
            train_report.brier["b_reference"], abs=1e-12
        )

    def test_missing_feature_column_named(self, survival_csv, tmp_path):
        out = tmp_path / "train"
        run_pipeline(PipelineConfig(input=str(survival_csv),
                                    out_dir=str(out), seed=5))
        rng = np.random.default_rng(1)
        x, time, status = one_factor_survival_data(rng, n=40)
        bad = tmp_path / "val.csv"
        write_survival_csv(bad, x[:, :4], time, status,
                           names=[f"f{j + 1}" for j in range(4)])
        with pytest.raises(PipelineError, match="f5"):
            validate_external(str(out), str(bad))

    def test_recalibration_tendency_under_shift(self, tmp_path):
        # shifted feature scale in the held-out cohort: refitting the Cox
        # coefficients on the held-out scores should not hurt, on average
        rng = np.random.default_rng(7)
        wins = 0
        n_pairs = 12
        for rep in range(n_pairs):
            x, time, status = one_factor_survival_data(rng, n=150,
                                                       collinear=False)
            xv, tv, sv = one_factor_survival_data(rng, n=120,
                                                  collinear=False)
            xv = xv * 1.6 + 0.4
            train = tmp_path / f"train{rep}.csv"
            val = tmp_path / f"val{rep}.csv"
            write_survival_csv(train, x, time, status)
            write_survival_csv(val, xv, tv, sv)
            out = tmp_path / f"fit{rep}"
            run_pipeline(PipelineConfig(input=str(train), out_dir=str(out),
                                        seed=rep, m=1))
            plain = validate_external(str(out), str(val))
            recal = validate_external(str(out), str(val), recalibrate=True)
            wins += (recal.brier["b_integrated"]
                     <= plain.brier["b_integrated"])
        assert wins >= n_pairs // 2


class TestScorePipeline:
    def test_transform_reproduces_training_scores(self):
        rng = np.random.default_rng(11)
        x, _, _ = one_factor_survival_data(rng, n=100, collinear=False)
        proj = ScorePipeline(cv_folds=4, seed=2, m=1)
        transform = proj.fit(x)
        s1 = transform(x)
        s2 = transform(x)
        np.testing.assert_array_equal(s1, s2)
        assert s1.shape == (100, 1)

    def test_auto_dimension_uses_eigen_bound(self):
        rng = np.random.default_rng(12)
        x, _, _ = one_factor_survival_data(rng, n=150, collinear=False)
        proj = ScorePipeline(cv_folds=4, seed=2, m=None)
        proj.fit(x)
        assert proj.last_fit["m"] == 1


class TestCommandLine:
    def test_pipeline_command(self, survival_csv, tmp_path, capsys):
        rc = main([
            "pipeline", "--input", str(survival_csv),
            "--out", str(tmp_path / "out"), "--seed", "4",
        ])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert "b_integrated" in payload

    def test_filter_command(self, survival_csv, tmp_path, capsys):
        rc = main([
            "filter", "--input", str(survival_csv),
            "--out", str(tmp_path / "f"), "--tau", "0.95",
        ])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["removed"]
        assert (tmp_path / "f" / "filtered_correlation.csv").exists()

    def test_shrink_command(self, survival_csv, tmp_path, capsys):
        rc = main([
            "shrink", "--input", str(survival_csv),
            "--out", str(tmp_path / "s"), "--cv-folds", "4",
            "--seed", "2",
        ])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert 0 < payload["theta"] <= 1
        assert payload["condition_number"] >= 1

    def test_fa_command(self, survival_csv, tmp_path, capsys):
        rc = main([
            "fa", "--input", str(survival_csv),
            "--out", str(tmp_path / "fa"), "--m", "AUTO",
            "--seed", "2",
        ])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["m"] == 1
        assert (tmp_path / "fa" / "loadings.csv").exists()

    def test_missing_input_nonzero_exit(self, tmp_path, capsys):
        rc = main([
            "pipeline", "--input", str(tmp_path / "nope.csv"),
            "--out", str(tmp_path / "out"),
        ])
        assert rc == 1
        assert "ingest" in capsys.readouterr().err

    def test_validate_command(self, survival_csv, tmp_path, capsys):
        assert main([
            "pipeline", "--input", str(survival_csv),
            "--out", str(tmp_path / "t"), "--seed", "4",
        ]) == 0
        capsys.readouterr()
        rc = main([
            "validate", "--input", str(survival_csv),
            "--train-dir", str(tmp_path / "t"),
            "--out", str(tmp_path / "v"),
        ])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["mode"] == "validated"
        assert (tmp_path / "v" / "validation_report.json").exists()

    def test_simulate_command(self, tmp_path, capsys):
        rc = main([
            "simulate", "--out", str(tmp_path / "sim"),
            "--p", "24", "--m-true", "3", "--communality", "0.9",
            "--n", "60", "--replicates", "2", "--seed", "3",
        ])
        assert rc == 0
        files = os.listdir(tmp_path / "sim")
        assert any(f.endswith(".csv") for f in files)
        assert any(f.endswith(".json") for f in files)

    def test_scenario_file(self, tmp_path):
        scen = tmp_path / "scen.cfg"
        scen.write_text(
            "# benchmark cell\np=24\nm_true=3\ncommunality=0.9\n"
            "balance=balanced\nn=60\nreplicates=2\nseed=3\n"
        )
        rc = main([
            "simulate", "--out", str(tmp_path / "sim2"),
            "--scenario", str(scen),
        ])
        assert rc == 0

    def test_scores_and_survfit_commands(self, survival_csv, tmp_path,
                                         capsys):
        assert main([
            "pipeline", "--input", str(survival_csv),
            "--out", str(tmp_path / "t"), "--seed", "4",
        ]) == 0
        capsys.readouterr()
        rc = main([
            "scores", "--input", str(survival_csv),
            "--model", str(tmp_path / "t" / "model.json"),
            "--out", str(tmp_path / "sc"),
        ])
        assert rc == 0
        scores_csv = tmp_path / "sc" / "scores.csv"
        assert scores_csv.exists()
        # scoring the training data with its own artifacts reproduces the
        # pipeline's stored scores
        stored = (tmp_path / "t" / "scores.csv").read_bytes()
        assert scores_csv.read_bytes() == stored
        capsys.readouterr()
        rc = main([
            "survfit", "--input", str(survival_csv),
            "--scores", str(scores_csv),
            "--out", str(tmp_path / "sf"),
        ])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["converged"]
