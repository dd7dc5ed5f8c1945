import numpy as np
import pytest

from shapefit.data import ColumnSchema, Dataset
from shapefit.distributions import DistributionSpec, gamma_nll, poisson_nll
from shapefit.errors import ConfigError, DataError, DomainError
from shapefit.metrics import (
    GlmModel,
    MetricsReport,
    RankDeficiencyError,
    compute_metrics,
    estimate_dispersion,
    fit_glm,
)


def dataset_from(x, y, exposure=None, names=None):
    names = names or [f"f{i}" for i in range(x.shape[1])]
    schema = [ColumnSchema(n, "continuous", "feature") for n in names]
    schema.append(ColumnSchema("y", "continuous", "response"))
    if exposure is not None:
        schema.append(ColumnSchema("e", "continuous", "exposure"))
    return Dataset(schema, x, y, exposure)


GAMMA = DistributionSpec("gamma", 1.0)
POISSON = DistributionSpec("poisson")


class TestComputeMetrics:
    def test_perfect_prediction(self):
        rep = compute_metrics([1.0, 2.0], [1.0, 2.0], GAMMA)
        assert rep.rmse == 0.0 and rep.mae == 0.0

    def test_unit_errors(self):
        rep = compute_metrics([0.5, 2.0], [1.5, 1.0], GAMMA)
        assert rep.rmse == pytest.approx(1.0)
        assert rep.mae == pytest.approx(1.0)

    def test_gamma_nll_fixture(self):
        rep = compute_metrics([1.0], [1.0], GAMMA)
        assert rep.nll == pytest.approx(1.0, abs=1e-12)

    def test_five_row_hand_fixture(self):
        # frozen from independent per-row evaluation of the closed forms:
        # gamma phi=1 nll per row is log(mu) + y/mu
        y = np.array([1.0, 2.0, 0.5, 3.0, 1.5])
        mu = np.array([1.5, 1.5, 1.0, 2.5, 1.0])
        expected_nll = np.mean(np.log(mu) + y / mu)
        expected_rmse = np.sqrt(np.mean((y - mu) ** 2))
        expected_mae = np.mean(np.abs(y - mu))
        rep = compute_metrics(y, mu, GAMMA)
        assert rep.nll == pytest.approx(expected_nll, abs=1e-12)
        assert rep.rmse == pytest.approx(expected_rmse, abs=1e-12)
        assert rep.mae == pytest.approx(expected_mae, abs=1e-12)

    def test_poisson_with_exposure_scales_mean(self):
        y = np.array([0.0, 2.0])
        rate = np.array([1.0, 1.0])
        expo = np.array([0.5, 2.0])
        rep = compute_metrics(y, rate, POISSON, exposure=expo)
        direct = np.mean(poisson_nll(y, rate * expo)[0])
        assert rep.nll == pytest.approx(float(direct), abs=1e-12)
        assert rep.mae == pytest.approx(np.mean(np.abs(y - rate * expo)))

    def test_rmse_at_least_mae(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            y = rng.gamma(2.0, 1.0, 40) + 0.01
            mu = rng.gamma(2.0, 1.0, 40) + 0.01
            rep = compute_metrics(y, mu, GAMMA)
            assert rep.rmse >= rep.mae >= 0.0

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            compute_metrics([1.0, 2.0], [1.0], GAMMA)

    def test_nonpositive_mean_rejected(self):
        with pytest.raises(DomainError):
            compute_metrics([1.0], [0.0], GAMMA)

    def test_csv_and_table_render(self):
        rep = compute_metrics([1.0, 2.0], [1.1, 1.9], GAMMA)
        csv_text = rep.csv_row()
        assert csv_text.splitlines()[0] == "nll,rmse,mae,n_test,family,dispersion"
        assert "NLL" in rep.table() and "RMSE" in rep.table()


class TestDispersion:
    def test_zero_residuals(self):
        y = np.array([1.0, 2.0, 3.0])
        assert estimate_dispersion(y, y) == 0.0

    def test_monte_carlo_gamma(self):
        rng = np.random.default_rng(7)
        mu = rng.uniform(0.5, 5.0, 50_000)
        y = rng.gamma(1.0, mu)
        assert estimate_dispersion(y, mu, p_eff=1) == pytest.approx(1.0, abs=0.05)

    def test_quadratic_in_residual_scale(self):
        mu = np.array([1.0, 2.0, 4.0, 8.0])
        y1 = mu * 1.1
        y2 = mu * 1.2  # doubled residual magnitudes at fixed mu
        phi1 = estimate_dispersion(y1, mu)
        phi2 = estimate_dispersion(y2, mu)
        assert phi2 == pytest.approx(4.0 * phi1, rel=1e-12)

    def test_validation(self):
        with pytest.raises(DataError):
            estimate_dispersion([1.0], [1.0])
        with pytest.raises(DomainError):
            estimate_dispersion([1.0, 2.0], [1.0, -1.0])
        with pytest.raises(ConfigError):
            estimate_dispersion([1.0, 2.0], [1.0, 2.0], p_eff=2)


class TestGlm:
    def test_intercept_only_gamma(self):
        rng = np.random.default_rng(3)
        y = rng.gamma(2.0, 3.0, 500)
        ds = dataset_from(rng.normal(size=(500, 0)).reshape(500, 0), y)
        glm = fit_glm(ds, GAMMA)
        assert glm.coef[0] == pytest.approx(np.log(y.mean()), abs=1e-8)

    def test_intercept_only_poisson_with_exposure(self):
        rng = np.random.default_rng(4)
        expo = rng.uniform(0.2, 2.0, 800)
        y = rng.poisson(0.3 * expo).astype(float)
        ds = dataset_from(np.zeros((800, 0)), y, exposure=expo)
        glm = fit_glm(ds, POISSON)
        assert glm.uses_offset
        assert glm.coef[0] == pytest.approx(np.log(y.sum() / expo.sum()), abs=1e-8)

    def test_noiseless_loglinear_recovery(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(400, 1))
        mu = np.exp(0.3 + 0.9 * x[:, 0])
        ds = dataset_from(x, mu)  # response equals the mean exactly
        glm = fit_glm(ds, GAMMA)
        assert glm.coef[0] == pytest.approx(0.3, abs=1e-6)
        assert glm.coef[1] == pytest.approx(0.9, abs=1e-6)

    def test_nll_monotone_over_irls_iterations(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(600, 3))
        mu = np.exp(0.5 + x @ np.array([0.4, -0.3, 0.2]))
        y = rng.gamma(2.0, mu / 2.0)
        ds = dataset_from(x, y)
        glm = fit_glm(ds, DistributionSpec("gamma", 0.5))
        path = np.array(glm.nll_path)
        assert np.all(np.diff(path) <= 1e-10)

    def test_poisson_slope_recovery(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(-1, 1, size=(5000, 1))
        y = rng.poisson(np.exp(0.2 + 0.7 * x[:, 0])).astype(float)
        ds = dataset_from(x, y)
        glm = fit_glm(ds, POISSON)
        assert glm.coef[1] == pytest.approx(0.7, abs=0.05)

    def test_rank_deficiency_detected(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=300)
        x = np.column_stack([a, 2.0 * a])  # perfectly collinear
        y = np.exp(0.1 + a) * rng.gamma(2.0, 0.5, 300)
        ds = dataset_from(x, y)
        with pytest.raises(RankDeficiencyError):
            fit_glm(ds, GAMMA)
        glm = fit_glm(ds, GAMMA, ridge=1e-6)
        assert np.all(np.isfinite(glm.coef))

    def test_categorical_design_rejected(self):
        schema = [
            ColumnSchema("c", "categorical", "feature", levels=("a", "b")),
            ColumnSchema("y", "continuous", "response"),
        ]
        ds = Dataset(schema, np.array([[0.0], [1.0]]), np.array([1.0, 2.0]))
        with pytest.raises(DataError):
            fit_glm(ds, GAMMA)

    def test_predict_checks_features(self):
        rng = np.random.default_rng(10)
        ds = dataset_from(rng.normal(size=(50, 2)), rng.gamma(2.0, 1.0, 50) + 0.1)
        glm = fit_glm(ds, GAMMA)
        other = dataset_from(rng.normal(size=(10, 2)), np.ones(10), names=["z1", "z2"])
        with pytest.raises(DataError):
            glm.predict(other)

    def test_predictions_positive(self):
        rng = np.random.default_rng(11)
        ds = dataset_from(rng.normal(size=(100, 2)), rng.gamma(2.0, 1.0, 100) + 0.1)
        glm = fit_glm(ds, GAMMA)
        assert np.all(glm.predict(ds) > 0.0)
