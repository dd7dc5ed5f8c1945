"""Held-out evaluation metrics and a GLM reference model.

The GLM is fit by iteratively reweighted least squares on the log link.
For the gamma family the IRLS weights are constant, so each iteration is
ordinary least squares on the working response; for poisson the weights
equal the current mean. An optional ridge term (excluding the intercept)
handles rank-deficient designs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .distributions import DistributionSpec, gamma_nll, poisson_nll
from .errors import ConfigError, DataError, DomainError, NumericError


class RankDeficiencyError(NumericError):
    """The GLM design matrix is rank deficient and ridge is disabled."""


@dataclass(frozen=True)
class MetricsReport:
    nll: float
    rmse: float
    mae: float
    n_test: int
    family: str
    dispersion: float | None = None

    def csv_row(self) -> str:
        header = "nll,rmse,mae,n_test,family,dispersion"
        disp = "" if self.dispersion is None else repr(self.dispersion)
        return f"{header}\n{self.nll!r},{self.rmse!r},{self.mae!r},{self.n_test},{self.family},{disp}\n"

    def table(self) -> str:
        rows = [
            ("NLL", self.nll),
            ("RMSE", self.rmse),
            ("MAE", self.mae),
        ]
        width = max(len(name) for name, _ in rows)
        lines = [f"{name:<{width}}  {value:.6f}" for name, value in rows]
        lines.append(f"(n = {self.n_test}, family = {self.family}"
                     + (f", dispersion = {self.dispersion:.6f})" if self.dispersion is not None else ")"))
        return "\n".join(lines)


def compute_metrics(y, mu, dist: DistributionSpec, exposure=None) -> MetricsReport:
    """Mean NLL plus point-prediction errors against observed responses.

    For a poisson model scored on per-unit rates, pass the exposures and
    the means are scaled by them; all three metrics use the final means.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if y.shape != mu.shape:
        raise DataError(f"length mismatch: {y.shape} responses vs {mu.shape} predictions")
    if np.any(mu <= 0.0):
        raise DomainError("predicted means must be positive")
    mean = mu
    if exposure is not None:
        exposure = np.asarray(exposure, dtype=float)
        if exposure.shape != y.shape:
            raise DataError("exposure length mismatch")
        if dist.family == "poisson":
            mean = mu * exposure
    if dist.family == "gamma":
        nll = float(np.mean(gamma_nll(y, mean, dist.dispersion)[0]))
    else:
        nll = float(np.mean(poisson_nll(y, mean)[0]))
    err = y - mean
    rmse = float(np.sqrt(np.mean(err**2)))
    mae = float(np.mean(np.abs(err)))
    return MetricsReport(
        nll=nll, rmse=rmse, mae=mae, n_test=y.size, family=dist.family,
        dispersion=dist.dispersion if dist.family == "gamma" else None,
    )


def estimate_dispersion(y, mu, p_eff: int = 1) -> float:
    """Pearson dispersion estimate sum((y-mu)^2 / mu^2) / (n - p_eff)."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if y.size < 2:
        raise DataError("dispersion estimation needs at least two rows")
    if np.any(mu <= 0.0):
        raise DomainError("means must be positive")
    if y.size - p_eff <= 0:
        raise ConfigError("effective parameter count must be below the sample size")
    return float(np.sum((y - mu) ** 2 / mu**2) / (y.size - p_eff))


@dataclass
class GlmModel:
    """Log-link GLM coefficients over an intercept plus the feature columns."""

    coef: np.ndarray  # [intercept, features...]
    feature_names: tuple
    distribution: DistributionSpec
    uses_offset: bool = False
    nll_path: list = field(default_factory=list)

    def linear_predictor(self, ds: Dataset) -> np.ndarray:
        x = _design(ds)
        eta = x @ self.coef
        if self.uses_offset:
            eta = eta + np.log(ds.exposure)
        return eta

    def predict(self, ds: Dataset) -> np.ndarray:
        if tuple(ds.feature_names) != self.feature_names:
            raise DataError("dataset features do not match the fitted design")
        return np.exp(self.linear_predictor(ds))


def _design(ds: Dataset) -> np.ndarray:
    for col in ds.feature_columns:
        if col.kind == "categorical":
            raise DataError(
                f"column '{col.name}' is categorical; one-hot encode before fitting the GLM"
            )
    return np.column_stack([np.ones(ds.n), ds.x])


def fit_glm(train: Dataset, dist: DistributionSpec, ridge: float = 0.0,
            max_iter: int = 100, tol: float = 1e-8) -> GlmModel:
    """Maximum-likelihood coefficients via IRLS on the log link.

    Stops when the largest coefficient change falls below tol or after
    max_iter iterations. Poisson models use log-exposure offsets whenever
    the dataset carries exposures. Raises RankDeficiencyError on singular
    designs unless ridge > 0 (the intercept is never penalized).
    """
    x = _design(train)
    y = train.y
    n, p = x.shape
    uses_offset = dist.family == "poisson" and train.exposure is not None
    offset = np.log(train.exposure) if uses_offset else np.zeros(n)
    if dist.family == "gamma" and np.any(y <= 0.0):
        raise DataError("gamma responses must be strictly positive")

    coef = np.zeros(p)
    base = np.sum(y) / np.sum(np.exp(offset))
    coef[0] = np.log(max(base, 1e-12))
    penalty = ridge * np.eye(p)
    penalty[0, 0] = 0.0

    nll_path = []
    for _ in range(max_iter):
        eta = x @ coef + offset
        mu = np.exp(np.clip(eta, -500.0, 500.0))
        nll_path.append(_glm_nll(y, mu, dist))
        w = mu if dist.family == "poisson" else np.ones(n)
        z = (eta - offset) + (y - mu) / mu
        xtw = x.T * w
        lhs = xtw @ x + penalty
        if ridge == 0.0 and np.linalg.matrix_rank(lhs) < p:
            raise RankDeficiencyError(
                "design matrix is rank deficient; enable ridge to fit anyway"
            )
        new_coef = np.linalg.solve(lhs, xtw @ z)
        change = float(np.max(np.abs(new_coef - coef)))
        coef = new_coef
        if change < tol:
            break
    eta = x @ coef + offset
    mu = np.exp(np.clip(eta, -500.0, 500.0))
    nll_path.append(_glm_nll(y, mu, dist))
    return GlmModel(
        coef=coef,
        feature_names=tuple(train.feature_names),
        distribution=dist,
        uses_offset=uses_offset,
        nll_path=nll_path,
    )


def _glm_nll(y, mu, dist: DistributionSpec) -> float:
    if dist.family == "gamma":
        return float(np.mean(gamma_nll(y, mu, dist.dispersion)[0]))
    return float(np.mean(poisson_nll(y, mu)[0]))
