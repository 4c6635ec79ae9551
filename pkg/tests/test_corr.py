import numpy as np
import pytest

from fmradio.corr import (
    CorrelationMatrix,
    condition_number,
    cv_select_penalty,
    make_folds,
    penalty_objective,
    redundancy_filter,
    sample_correlation,
    shrink,
)
from fmradio.ingest import RawDataset, standardize


def _standardized(x):
    return standardize(
        RawDataset(np.asarray(x, float),
                   tuple(f"c{j}" for j in range(np.asarray(x).shape[1])))
    )[0]


def _corr(values, names=None):
    values = np.asarray(values, float)
    if names is None:
        names = tuple(f"c{j}" for j in range(values.shape[0]))
    return CorrelationMatrix(values, names)


def pearson_oracle(x):
    """Textbook pairwise Pearson correlations, one pair at a time."""
    x = np.asarray(x, float)
    p = x.shape[1]
    out = np.eye(p)
    for i in range(p):
        for j in range(i + 1, p):
            a, b = x[:, i] - x[:, i].mean(), x[:, j] - x[:, j].mean()
            out[i, j] = out[j, i] = (a @ b) / np.sqrt((a @ a) * (b @ b))
    return out


# the worked 4x4 filtering fixture: A pairs with B and C, C pairs with D
FILTER_FIXTURE = np.array(
    [
        [1.00, 0.95, 0.95, 0.30],
        [0.95, 1.00, 0.30, 0.30],
        [0.95, 0.30, 1.00, 0.95],
        [0.30, 0.30, 0.95, 1.00],
    ]
)


class TestSampleCorrelation:
    def test_identical_columns(self):
        x = np.array([[1.0, 1.0], [2.0, 2.0], [4.0, 4.0]])
        r = sample_correlation(_standardized(x))
        assert r.values[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_sign_flip(self):
        x = np.array([[1.0, -1.0], [2.0, -2.0], [4.0, -4.0]])
        r = sample_correlation(_standardized(x))
        assert r.values[0, 1] == pytest.approx(-1.0, abs=1e-12)

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 3))
        r = sample_correlation(_standardized(x))
        np.testing.assert_allclose(r.values, pearson_oracle(x), atol=1e-12)

    def test_rejects_external_standardization(self):
        z, stats = standardize(
            RawDataset(np.random.default_rng(0).normal(size=(5, 2)),
                       ("a", "b"))
        )
        from fmradio.ingest import apply_stats

        other = apply_stats(
            RawDataset(np.random.default_rng(1).normal(size=(5, 2)),
                       ("a", "b")),
            stats,
        )
        with pytest.raises(ValueError, match="standardized on itself"):
            sample_correlation(other)


class TestRedundancyFilter:
    def test_fixture_first_index_rule(self):
        res = redundancy_filter(_corr(FILTER_FIXTURE, "ABCD"), 0.95)
        assert res.filtered.feature_names == ("B", "D")
        assert res.removed == (0, 2)  # A first, then C
        assert res.filtered.values[0, 1] == pytest.approx(0.30)

    def test_fixture_last_index_rule(self):
        res = redundancy_filter(_corr(FILTER_FIXTURE, "ABCD"), 0.95,
                                tie_break="last")
        assert res.filtered.feature_names == ("A", "D")
        assert res.removed == (2, 1)  # C first, then B

    def test_no_removals_below_threshold(self):
        vals = np.array([[1.0, 0.5, 0.2], [0.5, 1.0, 0.1], [0.2, 0.1, 1.0]])
        res = redundancy_filter(_corr(vals), 0.9)
        assert res.retained == (0, 1, 2)
        assert res.removed == ()

    def test_single_feature_unchanged(self):
        res = redundancy_filter(_corr(np.eye(1)), 0.95)
        assert res.retained == (0,)

    def test_output_never_exceeds_threshold(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            p = int(rng.integers(2, 12))
            x = rng.normal(size=(p + 3, p)) @ rng.normal(size=(p, p))
            x += rng.normal(size=x.shape) * 0.05
            r = _corr(pearson_oracle(x))
            tau = float(rng.uniform(0.6, 0.99))
            res = redundancy_filter(r, tau)
            vals = res.filtered.values
            off = np.abs(vals[~np.eye(vals.shape[0], dtype=bool)])
            if off.size:
                assert off.max() < tau
            assert len(res.removed) <= p - 1
            assert sorted(res.retained + res.removed) == list(range(p))

    def test_invalid_tau(self):
        with pytest.raises(ValueError, match="tau"):
            redundancy_filter(_corr(np.eye(2)), 0.0)


class TestShrink:
    def test_theta_one_is_identity(self):
        s = shrink(_corr(FILTER_FIXTURE, "ABCD"), 1.0)
        np.testing.assert_array_equal(s.values, np.eye(4))

    def test_linear_map(self):
        vals = np.array([[1.0, 0.8], [0.8, 1.0]])
        s = shrink(_corr(vals), 0.5)
        assert s.values[0, 1] == pytest.approx(0.4)
        assert s.values[0, 0] == pytest.approx(1.0)

    def test_eigenvalue_identity_against_fresh_decomposition(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            p = int(rng.integers(2, 20))
            x = rng.normal(size=(p + 5, p))
            r = _corr(pearson_oracle(x))
            theta = float(rng.uniform(0.01, 1.0))
            s = shrink(r, theta)
            expected = np.sort((1 - theta) * np.linalg.eigvalsh(r.values)
                               + theta)
            fresh = np.sort(np.linalg.eigvalsh(s.values))
            np.testing.assert_allclose(np.sort(s.shrunken_eigenvalues),
                                       expected, atol=1e-10)
            np.testing.assert_allclose(fresh, expected, atol=1e-10)
            assert s.shrunken_eigenvalues.min() > 0

    def test_reconstruction_from_spectrum(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(30, 6))
        r = _corr(pearson_oracle(x))
        s = shrink(r, 0.2)
        rebuilt = (s.eigenvectors * s.shrunken_eigenvalues) @ s.eigenvectors.T
        np.testing.assert_allclose(rebuilt, s.values, atol=1e-10)

    def test_eigenvectors_match_base(self):
        # shrinkage only moves eigenvalues; subspaces must be unchanged
        # (angle measured through the sine, which stays accurate near zero)
        rng = np.random.default_rng(9)
        x = rng.normal(size=(50, 5))
        r = _corr(pearson_oracle(x))
        s = shrink(r, 0.3)
        _, v_shrunk = np.linalg.eigh(s.values)
        _, v_base = np.linalg.eigh(r.values)
        for k in range(5):
            vb, vs = v_base[:, k], v_shrunk[:, k]
            resid = vs - (vb @ vs) * vb
            assert np.linalg.norm(resid) < 1e-8

    @pytest.mark.parametrize("theta", [0.0, -0.1, 1.5])
    def test_invalid_theta(self, theta):
        with pytest.raises(ValueError, match="theta"):
            shrink(_corr(np.eye(2)), theta)


def naive_cv_objective(z, folds, theta):
    """Direct determinant/trace/inverse evaluation of the CV score."""
    labels = np.unique(folds)
    total = 0.0
    for k in labels:
        zin = z.data[folds == k]
        zout = z.data[folds != k]
        r_k = pearson_oracle(zin)
        r_rest = pearson_oracle(zout)
        rt = (1 - theta) * r_rest + theta * np.eye(r_rest.shape[0])
        sign, logdet = np.linalg.slogdet(rt)
        total += len(zin) * (logdet + np.trace(r_k @ np.linalg.inv(rt)))
    return total / len(labels)


class TestPenaltySelection:
    def test_eigen_form_equals_naive_form(self):
        rng = np.random.default_rng(11)
        z = _standardized(rng.normal(size=(24, 4)))
        folds = make_folds(24, 4, seed=2)
        phi = penalty_objective(z, folds)
        for theta in (0.01, 0.1, 0.5, 0.9, 1.0):
            assert phi(theta) == pytest.approx(
                naive_cv_objective(z, folds, theta), abs=1e-8
            )

    def test_optimal_beats_dense_grid_same_folds(self):
        rng = np.random.default_rng(12)
        sigma = np.full((5, 5), 0.5)
        np.fill_diagonal(sigma, 1.0)
        chol = np.linalg.cholesky(sigma)
        for n, p_gt_n in ((120, False), (20, True)):
            if p_gt_n:
                x = rng.normal(size=(n, 40))
            else:
                x = rng.normal(size=(n, 5)) @ chol.T
            z = _standardized(x)
            res = cv_select_penalty(z, 4, seed=3)
            phi = penalty_objective(z, res.fold_assignment)
            grid_min = min(phi(t) for t in np.linspace(1e-6, 1.0, 1000))
            assert res.cv_score <= grid_min + 1e-6
            assert np.isfinite(res.cv_score)

    def test_small_penalty_for_well_conditioned_data(self):
        rng = np.random.default_rng(13)
        sigma = np.full((5, 5), 0.5)
        np.fill_diagonal(sigma, 1.0)
        x = rng.normal(size=(500, 5)) @ np.linalg.cholesky(sigma).T
        res = cv_select_penalty(_standardized(x), 5, seed=4)
        assert res.theta_opt < 0.05

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(14)
        z = _standardized(rng.normal(size=(30, 8)))
        a = cv_select_penalty(z, 5, seed=9)
        b = cv_select_penalty(z, 5, seed=9)
        assert a.theta_opt == b.theta_opt
        np.testing.assert_array_equal(a.fold_assignment, b.fold_assignment)

    def test_minimality_over_trace(self):
        rng = np.random.default_rng(15)
        z = _standardized(rng.normal(size=(26, 6)))
        res = cv_select_penalty(z, 5, seed=1)
        assert all(res.cv_score <= v for _, v in res.trace)

    def test_fold_count_validation(self):
        rng = np.random.default_rng(16)
        z = _standardized(rng.normal(size=(10, 3)))
        with pytest.raises(ValueError, match="fold count"):
            cv_select_penalty(z, 1)
        with pytest.raises(ValueError, match="too small"):
            cv_select_penalty(z, 9, seed=0)


class TestConditionNumber:
    def test_identity(self):
        assert condition_number(shrink(_corr(np.eye(3)), 1.0)) == 1.0

    def test_two_by_two_closed_form(self):
        # eigenvalues of [[1, .5], [.5, 1]] are 1.5 and 0.5
        vals = np.array([[1.0, 0.5], [0.5, 1.0]])
        cond = condition_number(shrink(_corr(vals), 1e-12))
        assert cond == pytest.approx(3.0, abs=1e-9)

    def test_monotone_in_theta(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(15, 10))
        r = _corr(pearson_oracle(x))
        conds = [condition_number(shrink(r, t))
                 for t in np.linspace(0.01, 1.0, 25)]
        assert all(a >= b - 1e-12 for a, b in zip(conds, conds[1:]))
