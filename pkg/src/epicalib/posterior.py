"""Shared Bayesian model: Gaussian likelihood on daily residuals, uniform
parameter prior, inverse-gamma variance priors, finite-difference gradients.

Both samplers target the same density. The MCMC sampler additionally treats
the two observation-noise variances as unknowns with conjugate inverse-gamma
structure (their precisions have Gamma full conditionals, enabling Gibbs
updates); the particle sampler keeps them fixed.

All evaluation entry points are batched: a (B, 4) matrix of parameter points
gives B density values in one surrogate call, which is what makes
finite-difference gradients over hundreds of particles affordable.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .abm import DailySeries
from .design import Bounds
from .gp import GPModel, predict_batch

logger = logging.getLogger("epicalib.posterior")

#: Relative finite-difference step: eps_i = FD_REL_STEP * (max_i - min_i).
FD_REL_STEP = 1e-4


@dataclass(frozen=True)
class Observations:
    """Observed daily hospitalization and death counts."""

    hospitalizations: np.ndarray
    deaths: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "hospitalizations",
                           np.asarray(self.hospitalizations, dtype=float))
        object.__setattr__(self, "deaths", np.asarray(self.deaths, dtype=float))
        if self.hospitalizations.shape != self.deaths.shape or self.hospitalizations.ndim != 1:
            raise ValueError("observation series must be equal-length vectors")
        if np.any(self.hospitalizations < 0) or np.any(self.deaths < 0):
            raise ValueError("observed counts must be non-negative")

    @property
    def n(self) -> int:
        """Observation count per series (the likelihood exponent)."""
        return self.hospitalizations.size

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.hospitalizations, self.deaths])

    @staticmethod
    def from_daily_series(series: DailySeries) -> "Observations":
        return Observations(series.hospitalizations.copy(), series.deaths.copy())

    def to_daily_series(self) -> DailySeries:
        return DailySeries(self.hospitalizations.copy(), self.deaths.copy())


@dataclass(frozen=True)
class VariancePair:
    """Observation-noise variances for the two output channels."""

    sigma2_h: float
    sigma2_d: float

    def __post_init__(self):
        if self.sigma2_h <= 0 or self.sigma2_d <= 0:
            raise ValueError("noise variances must be positive")


@dataclass(frozen=True)
class VariancePrior:
    """Rate hyperparameters of the inverse-gamma variance priors.

    The precision's full conditional is Gamma((1+n)/2, (zeta^2 + S)/2) with S
    the residual sum; the implied prior is sigma^2 ~ InvGamma(1/2, zeta^2/2).
    """

    zeta2_h: float = 1.0
    zeta2_d: float = 1.0

    def __post_init__(self):
        if self.zeta2_h < 0 or self.zeta2_d < 0:
            raise ValueError("rate hyperparameters must be non-negative")

    @staticmethod
    def conditional_shape(n: int) -> float:
        return 0.5 * (1 + n)


def residual_sums_batch(thetas: np.ndarray, obs: Observations,
                        model: GPModel) -> tuple[np.ndarray, np.ndarray]:
    """Squared L2 residual norms (S_h, S_d) for a batch of points."""
    if model.horizon != obs.n:
        raise ValueError(f"model horizon {model.horizon} != observation length {obs.n}")
    pred = predict_batch(model, thetas)
    j = obs.n
    res_h = pred[:, :j] - obs.hospitalizations
    res_d = pred[:, j:] - obs.deaths
    return np.sum(res_h ** 2, axis=1), np.sum(res_d ** 2, axis=1)


def residual_sums(theta, obs: Observations, model: GPModel) -> tuple[float, float]:
    t = theta.as_array() if hasattr(theta, "as_array") else np.asarray(theta, dtype=float)
    s_h, s_d = residual_sums_batch(t[None, :], obs, model)
    return float(s_h[0]), float(s_d[0])


def gaussian_log_likelihood(s_h, s_d, n: int, variances: VariancePair):
    """-n log(2 pi sigma_h sigma_d) - (S_h / sigma_h^2 + S_d / sigma_d^2) / 2."""
    log_norm = n * (math.log(2.0 * math.pi)
                    + 0.5 * math.log(variances.sigma2_h)
                    + 0.5 * math.log(variances.sigma2_d))
    return -log_norm - 0.5 * (np.asarray(s_h) / variances.sigma2_h
                              + np.asarray(s_d) / variances.sigma2_d)


def log_likelihood(theta, obs: Observations, variances: VariancePair,
                   model: GPModel) -> float:
    s_h, s_d = residual_sums(theta, obs, model)
    return float(gaussian_log_likelihood(s_h, s_d, obs.n, variances))


def log_uniform_prior(thetas: np.ndarray, bounds: Bounds) -> np.ndarray:
    """Normalized log-density of the uniform prior; -inf outside the box."""
    inside = bounds.contains(thetas)
    value = -float(np.sum(np.log(bounds.ranges)))
    return np.where(inside, value, -np.inf)


def log_inverse_gamma(value: float, shape: float, rate: float) -> float:
    if value <= 0:
        return -np.inf
    return shape * math.log(rate) - math.lgamma(shape) - (shape + 1.0) * math.log(value) \
        - rate / value


def log_variance_prior(variances: VariancePair, prior: VariancePrior) -> float:
    if prior.zeta2_h <= 0 or prior.zeta2_d <= 0:
        raise ValueError("variance prior density requires positive rate hyperparameters")
    return log_inverse_gamma(variances.sigma2_h, 0.5, 0.5 * prior.zeta2_h) \
        + log_inverse_gamma(variances.sigma2_d, 0.5, 0.5 * prior.zeta2_d)


def log_posterior(theta, variances: VariancePair, obs: Observations, model: GPModel,
                  bounds: Bounds, vprior: VariancePrior,
                  variances_fixed: bool = True) -> float:
    """Log of the unnormalized joint density (Gaussian likelihood, uniform
    parameter prior, optional inverse-gamma variance priors)."""
    t = theta.as_array() if hasattr(theta, "as_array") else np.asarray(theta, dtype=float)
    prior = float(log_uniform_prior(t[None, :], bounds)[0])
    if prior == -np.inf:
        return -np.inf
    value = log_likelihood(t, obs, variances, model) + prior
    if not variances_fixed:
        value += log_variance_prior(variances, vprior)
    return value


def sample_variance_conditional(s: float, n: int, zeta2: float,
                                rng: np.random.Generator) -> float:
    """Draw one variance from its inverse-gamma full conditional.

    The precision is Gamma(shape=(1+n)/2, rate=(zeta^2 + S)/2); the variance
    returned is its reciprocal.
    """
    if s < 0:
        raise ValueError("residual sum must be non-negative")
    if n < 1:
        raise ValueError("observation count must be >= 1")
    rate = 0.5 * (zeta2 + s)
    if rate <= 0:
        raise ValueError("degenerate conditional: zeta^2 + S must be positive")
    precision = rng.gamma(shape=VariancePrior.conditional_shape(n), scale=1.0 / rate)
    return 1.0 / precision


def finite_difference_gradient(fn, thetas: np.ndarray, steps: np.ndarray,
                               lower: np.ndarray | None = None,
                               upper: np.ndarray | None = None) -> np.ndarray:
    """Batched central-difference gradients of a batch-evaluated scalar field.

    `fn` maps (B, d) -> (B,). Where a step would cross `lower`/`upper`, the
    difference falls back to one-sided (with a warning), matching the
    behavior needed near the edges of a bounded prior.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    b, d = thetas.shape
    steps = np.broadcast_to(np.asarray(steps, dtype=float), (d,))
    if np.any(steps <= 0):
        raise ValueError("finite-difference steps must be positive")

    plus = np.repeat(thetas[:, None, :], d, axis=1)
    minus = plus.copy()
    idx = np.arange(d)
    plus[:, idx, idx] += steps
    minus[:, idx, idx] -= steps

    hi_clip = np.zeros((b, d), dtype=bool)
    lo_clip = np.zeros((b, d), dtype=bool)
    if upper is not None:
        hi_clip = plus[:, idx, idx] > np.asarray(upper, dtype=float)
        plus[:, idx, idx] = np.where(hi_clip, thetas, plus[:, idx, idx])
    if lower is not None:
        lo_clip = minus[:, idx, idx] < np.asarray(lower, dtype=float)
        minus[:, idx, idx] = np.where(lo_clip, thetas, minus[:, idx, idx])
    n_onesided = int(hi_clip.sum() + lo_clip.sum())
    if n_onesided:
        logger.warning("one-sided finite differences at %d coordinate(s) near bounds",
                       n_onesided)
    if np.any(hi_clip & lo_clip):
        raise ValueError("finite-difference step larger than the feasible box")

    f_plus = fn(plus.reshape(b * d, d)).reshape(b, d)
    f_minus = fn(minus.reshape(b * d, d)).reshape(b, d)
    span = (plus[:, idx, idx] - minus[:, idx, idx])
    return (f_plus - f_minus) / span


@dataclass
class Posterior:
    """Bundles the pieces of the target density for the samplers.

    `fixed_variances` holds the noise variances used when the density is
    evaluated over the parameters only (the particle sampler's view, and the
    MCMC sampler's view between Gibbs refreshes).
    """

    obs: Observations
    model: GPModel
    bounds: Bounds
    vprior: VariancePrior = VariancePrior()
    fixed_variances: VariancePair = VariancePair(1.0, 1.0)

    @property
    def dim(self) -> int:
        return self.bounds.dim

    def residuals(self, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return residual_sums_batch(np.atleast_2d(thetas), self.obs, self.model)

    def log_density(self, thetas: np.ndarray,
                    variances: VariancePair | None = None) -> np.ndarray:
        """Batched log posterior over parameters at fixed variances."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        variances = variances or self.fixed_variances
        out = log_uniform_prior(thetas, self.bounds)
        inside = np.isfinite(out)
        if np.any(inside):
            s_h, s_d = self.residuals(thetas[inside])
            out[inside] += gaussian_log_likelihood(s_h, s_d, self.obs.n, variances)
        return out

    def gradient(self, thetas: np.ndarray,
                 variances: VariancePair | None = None) -> np.ndarray:
        """Central finite-difference gradient in original parameter units."""
        steps = FD_REL_STEP * self.bounds.ranges
        return finite_difference_gradient(
            lambda pts: self.log_density(pts, variances), thetas, steps,
            lower=self.bounds.lower, upper=self.bounds.upper)


def grad_log_posterior(theta, obs: Observations, variances: VariancePair,
                       model: GPModel, bounds: Bounds) -> np.ndarray:
    """Finite-difference gradient of the log posterior at one point."""
    t = theta.as_array() if hasattr(theta, "as_array") else np.asarray(theta, dtype=float)
    post = Posterior(obs=obs, model=model, bounds=bounds, fixed_variances=variances)
    return post.gradient(t[None, :])[0]


def default_fixed_variances(dataset, obs: Observations) -> VariancePair:
    """Pilot rule for the particle sampler's fixed noise variances.

    Uses the single best-fitting training response (a MAP-like pilot fit)
    and sets each variance to that row's mean squared residual.
    """
    j = obs.n
    res_h = dataset.responses[:, :j] - obs.hospitalizations
    res_d = dataset.responses[:, j:] - obs.deaths
    s_h = np.sum(res_h ** 2, axis=1)
    s_d = np.sum(res_d ** 2, axis=1)
    best = int(np.argmin(s_h + s_d))
    return VariancePair(max(s_h[best] / j, 1e-12), max(s_d[best] / j, 1e-12))
