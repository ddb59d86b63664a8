"""Delayed-rejection adaptive Metropolis sampler with Gibbs variance updates
and a Raftery-Lewis run-length diagnostic.

The chain state is (theta, sigma2_h, sigma2_d). Each iteration refreshes the
two noise variances from their inverse-gamma full conditionals (exact Gibbs
steps), then proposes a random-walk move on theta. A rejected first-stage
proposal triggers one delayed-rejection stage with a shrunk proposal; the
two-stage acceptance ratio keeps the chain reversible. The proposal
covariance adapts to the scaled empirical covariance of the chain history.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .design import Bounds
from .posterior import Posterior, VariancePair, sample_variance_conditional

logger = logging.getLogger("epicalib.dram")

CHAIN_HEADER = "theta1,theta2,theta3,theta4,sigma_h2,sigma_d2,logpost,accepted_stage"


@dataclass(frozen=True)
class DramConfig:
    n_samples: int = 200_000
    initial_covariance: np.ndarray | None = None  # default: diag((0.05*range)^2)
    adapt_start: int = 1_000
    adapt_interval: int = 100
    dr_scale: float = 0.2  # second-stage proposal shrink factor
    adapt_regularization: float = 1e-10
    burn_in_fraction: float = 0.25
    sample_variances: bool = True
    initial_point: np.ndarray | None = None  # default: bounds center

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0.0 < self.dr_scale < 1.0:
            raise ValueError("dr_scale must lie in (0, 1)")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ValueError("burn_in_fraction must lie in [0, 1)")
        if self.initial_covariance is not None:
            c = np.asarray(self.initial_covariance)
            if c.shape[0] != c.shape[1] or not np.allclose(c, c.T):
                raise ValueError("initial covariance must be symmetric")
            if np.any(np.linalg.eigvalsh(c) <= 0):
                raise ValueError("initial covariance must be positive definite")


@dataclass
class Chain:
    """MCMC output: one row per iteration, thetas then the two variances."""

    samples: np.ndarray  # (K, dim + 2)
    log_posterior: np.ndarray  # (K,)
    accepted_stage: np.ndarray  # (K,) in {0, 1, 2}
    burn_in: int
    dim: int = 4
    proposal_checkpoints: list = field(default_factory=list)  # (iteration, cov)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    def thetas(self, post_burn_in: bool = True) -> np.ndarray:
        start = self.burn_in if post_burn_in else 0
        return self.samples[start:, :self.dim]

    def variances(self, post_burn_in: bool = True) -> np.ndarray:
        start = self.burn_in if post_burn_in else 0
        return self.samples[start:, self.dim:self.dim + 2]

    def acceptance_rate(self, stage: int | None = None) -> float:
        if stage is None:
            return float(np.mean(self.accepted_stage > 0))
        return float(np.mean(self.accepted_stage == stage))

    def header(self) -> str:
        names = [f"theta{i + 1}" for i in range(self.dim)]
        return ",".join(names + ["sigma_h2", "sigma_d2", "logpost", "accepted_stage"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.header() + "\n")
        for row, lp, st in zip(self.samples, self.log_posterior, self.accepted_stage):
            cells = [repr(float(v)) for v in row] + [repr(float(lp)), str(int(st))]
            buf.write(",".join(cells) + "\n")
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str, burn_in_fraction: float = 0.25) -> "Chain":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if not lines:
            raise ValueError("empty chain file")
        names = lines[0].split(",")
        if names[-4:] != ["sigma_h2", "sigma_d2", "logpost", "accepted_stage"]:
            raise ValueError(f"expected chain header ending with sigma/logpost columns, got '{lines[0]}'")
        dim = len(names) - 4
        rows = [ln.split(",") for ln in lines[1:]]
        samples = np.array([[float(v) for v in r[:dim + 2]] for r in rows])
        logpost = np.array([float(r[dim + 2]) for r in rows])
        stages = np.array([int(r[dim + 3]) for r in rows])
        return Chain(samples=samples, log_posterior=logpost, accepted_stage=stages,
                     burn_in=int(burn_in_fraction * samples.shape[0]), dim=dim)


def first_stage_log_alpha(logpost_current: float, logpost_proposal: float) -> float:
    """log acceptance probability of a symmetric random-walk move."""
    if logpost_proposal == -np.inf:
        return -np.inf
    return min(0.0, logpost_proposal - logpost_current)


def _log1mexp(log_a: float) -> float:
    """log(1 - exp(log_a)) for log_a <= 0."""
    if log_a == -np.inf:
        return 0.0
    if log_a >= 0.0:
        return -np.inf
    if log_a > -math.log(2.0):
        return math.log(-math.expm1(log_a))
    return math.log1p(-math.exp(log_a))


def delayed_log_alpha(lp_x: float, lp_y1: float, lp_y2: float,
                      log_q_y2_to_y1: float, log_q_x_to_y1: float) -> float:
    """Two-stage delayed-rejection log acceptance probability.

    Accept y2 after y1 was rejected from x with probability
    min{1, [pi(y2) q(y2,y1) (1-a1(y2,y1))] / [pi(x) q(x,y1) (1-a1(x,y1))]}
    where q is the first-stage proposal density.
    """
    if lp_y2 == -np.inf:
        return -np.inf
    a1_fwd = first_stage_log_alpha(lp_x, lp_y1)
    if a1_fwd == 0.0:  # cannot happen after a genuine rejection; guard anyway
        return -np.inf
    a1_rev = first_stage_log_alpha(lp_y2, lp_y1)
    numerator = lp_y2 + log_q_y2_to_y1 + _log1mexp(a1_rev)
    denominator = lp_x + log_q_x_to_y1 + _log1mexp(a1_fwd)
    return min(0.0, numerator - denominator)


def _gaussian_log_density(diff: np.ndarray, cov_inv: np.ndarray, log_det: float) -> float:
    d = diff.size
    return -0.5 * (d * math.log(2.0 * math.pi) + log_det + diff @ cov_inv @ diff)


class _RunningMoments:
    """Streaming mean and covariance of the theta history."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def update(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += np.outer(delta, x - self.mean)

    def covariance(self) -> np.ndarray:
        if self.count < 2:
            raise ValueError("need at least 2 points")
        return self.m2 / (self.count - 1)


def _chol_with_repair(cov: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray, float]:
    """Cholesky factor plus inverse/logdet, inflating the diagonal if needed."""
    dim = cov.shape[0]
    jitter = eps
    for _ in range(12):
        try:
            chol = np.linalg.cholesky(cov + jitter * np.eye(dim))
            inv = np.linalg.inv(cov + jitter * np.eye(dim))
            log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
            return chol, inv, log_det
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise np.linalg.LinAlgError("adapted covariance could not be repaired")


def run_chain(posterior: Posterior, config: DramConfig, rng_seed: int = 0) -> Chain:
    """Sample the posterior; deterministic given the seed.

    `posterior.fixed_variances` seeds the variance state; when
    `config.sample_variances` is set the variances are refreshed from their
    full conditionals every iteration, otherwise they stay fixed.
    """
    config.validate()
    bounds = posterior.bounds
    dim = bounds.dim
    rng = np.random.Generator(np.random.Philox(key=np.uint64(rng_seed)))

    theta = np.asarray(config.initial_point if config.initial_point is not None
                       else bounds.center(), dtype=float)
    sigma2_h = posterior.fixed_variances.sigma2_h
    sigma2_d = posterior.fixed_variances.sigma2_d

    if config.initial_covariance is not None:
        cov = np.asarray(config.initial_covariance, dtype=float)
    else:
        cov = np.diag((0.05 * bounds.ranges) ** 2)
    chol, cov_inv, log_det = _chol_with_repair(cov, config.adapt_regularization)

    variances = VariancePair(sigma2_h, sigma2_d)
    lp = float(posterior.log_density(theta[None], variances)[0])
    if not np.isfinite(lp):
        raise ValueError("initial point has non-finite log posterior")
    s_h = s_d = 0.0
    if config.sample_variances:
        s_h, s_d = (v[0] for v in posterior.residuals(theta[None]))

    scale = 2.38 ** 2 / dim
    moments = _RunningMoments(dim)
    moments.update(theta)

    samples = np.empty((config.n_samples, dim + 2))
    logpost_trace = np.empty(config.n_samples)
    stages = np.zeros(config.n_samples, dtype=np.int8)
    checkpoints = [(0, cov.copy())]

    for k in range(config.n_samples):
        if config.sample_variances:
            sigma2_h = sample_variance_conditional(s_h, posterior.obs.n,
                                                   posterior.vprior.zeta2_h, rng)
            sigma2_d = sample_variance_conditional(s_d, posterior.obs.n,
                                                   posterior.vprior.zeta2_d, rng)
            variances = VariancePair(sigma2_h, sigma2_d)
            lp = float(posterior.log_density(theta[None], variances)[0])

        # first stage: symmetric random walk
        y1 = theta + chol @ rng.standard_normal(dim)
        lp_y1 = float(posterior.log_density(y1[None], variances)[0])
        log_a1 = first_stage_log_alpha(lp, lp_y1)
        accepted = 0
        if math.log(rng.random()) < log_a1:
            theta, lp = y1, lp_y1
            accepted = 1
        else:
            # delayed rejection: shrunk proposal, two-stage acceptance ratio
            y2 = theta + config.dr_scale * (chol @ rng.standard_normal(dim))
            lp_y2 = float(posterior.log_density(y2[None], variances)[0])
            log_q_rev = _gaussian_log_density(y1 - y2, cov_inv, log_det)
            log_q_fwd = _gaussian_log_density(y1 - theta, cov_inv, log_det)
            log_a2 = delayed_log_alpha(lp, lp_y1, lp_y2, log_q_rev, log_q_fwd)
            if math.log(rng.random()) < log_a2:
                theta, lp = y2, lp_y2
                accepted = 2
        if accepted and config.sample_variances:
            s_h, s_d = (v[0] for v in posterior.residuals(theta[None]))

        samples[k, :dim] = theta
        samples[k, dim] = sigma2_h
        samples[k, dim + 1] = sigma2_d
        logpost_trace[k] = lp
        stages[k] = accepted

        moments.update(theta)
        if k + 1 >= config.adapt_start and (k + 1) % config.adapt_interval == 0:
            adapted = scale * moments.covariance() \
                + config.adapt_regularization * np.eye(dim)
            try:
                chol, cov_inv, log_det = _chol_with_repair(
                    adapted, config.adapt_regularization)
                cov = adapted
                checkpoints.append((k + 1, cov.copy()))
            except np.linalg.LinAlgError:
                logger.warning("adapted covariance not positive definite at "
                               "iteration %d; keeping previous proposal", k + 1)

    return Chain(samples=samples, log_posterior=logpost_trace, accepted_stage=stages,
                 burn_in=int(config.burn_in_fraction * config.n_samples), dim=dim,
                 proposal_checkpoints=checkpoints)


# ---------------------------------------------------------------------------
# Raftery-Lewis run-length diagnostic


@dataclass
class RunLengthReport:
    required_samples: float  # max over parameters; inf if degenerate
    per_parameter: list[dict]
    n_min: int
    quantile: float
    accuracy: float
    probability: float

    @property
    def converged_within(self) -> bool:
        return np.isfinite(self.required_samples)


def _markov_counts(z: np.ndarray, order: int) -> np.ndarray:
    """Transition count tensor of the binary sequence at the given order."""
    shape = (2,) * (order + 1)
    counts = np.zeros(shape)
    idx = np.stack([z[i:len(z) - order + i] for i in range(order + 1)], axis=0)
    np.add.at(counts, tuple(idx), 1)
    return counts


def _second_order_bic(z: np.ndarray) -> float:
    """BIC comparing a second-order Markov fit against first-order.

    Positive values favor the second-order model (more thinning needed).
    """
    c = _markov_counts(z, 2)
    n = c.sum()
    g2 = 0.0
    for i in range(2):
        for j in range(2):
            for k in range(2):
                if c[i, j, k] == 0:
                    continue
                expected = c[i, j, :].sum() * c[:, j, k].sum() / max(c[:, j, :].sum(), 1)
                if expected > 0:
                    g2 += 2.0 * c[i, j, k] * math.log(c[i, j, k] / expected)
    return g2 - 2.0 * math.log(max(n, 1))


def raftery_lewis_nmin(q: float, r: float, s: float) -> int:
    z = norm.ppf(0.5 * (1.0 + s))
    return int(math.ceil(q * (1.0 - q) * (z / r) ** 2))


def run_length_diagnostic(chain: Chain | np.ndarray, quantile: float = 0.025,
                          accuracy: float = 0.005, probability: float = 0.95,
                          burn_in_tolerance: float = 0.001) -> RunLengthReport:
    """Raftery-Lewis run-length estimate on each parameter marginal.

    The marginal is reduced to the binary indicator of its `quantile`
    threshold; the indicator is thinned until first-order Markov behavior is
    preferred (BIC), and burn-in plus required chain length follow from the
    fitted 2x2 transition matrix. Returns the max over marginals.
    """
    thetas = chain.thetas() if isinstance(chain, Chain) else np.atleast_2d(chain)
    if thetas.ndim == 1:
        thetas = thetas[:, None]
    n_min = raftery_lewis_nmin(quantile, accuracy, probability)
    if thetas.shape[0] < n_min:
        raise ValueError(
            f"insufficient samples for diagnostic: have {thetas.shape[0]}, "
            f"need at least {n_min}")

    z_score = norm.ppf(0.5 * (1.0 + probability))
    reports = []
    for p in range(thetas.shape[1]):
        x = thetas[:, p]
        threshold = np.quantile(x, quantile)
        z = (x <= threshold).astype(np.int8)
        if z.min() == z.max():
            # constant indicator: no information about mixing at this quantile
            reports.append({"parameter": p, "degenerate": True,
                            "thin": None, "burn_in": None, "required": math.inf})
            continue
        thin = 1
        while thin < max(2, len(z) // 8):
            zk = z[::thin]
            if len(zk) < 8 or _second_order_bic(zk) <= 0:
                break
            thin += 1
        zk = z[::thin]
        c = _markov_counts(zk, 1)
        from0 = c[0].sum()
        from1 = c[1].sum()
        alpha = c[0, 1] / from0 if from0 else 0.0
        beta = c[1, 0] / from1 if from1 else 0.0
        if alpha <= 0 or beta <= 0 or alpha >= 1 or beta >= 1:
            reports.append({"parameter": p, "degenerate": True,
                            "thin": thin, "burn_in": None, "required": math.inf})
            continue
        lam = 1.0 - alpha - beta
        if abs(lam) < 1e-12:
            burn = 1
        else:
            burn = math.ceil(math.log(burn_in_tolerance * (alpha + beta)
                                      / max(alpha, beta)) / math.log(abs(lam)))
        burn = max(int(burn), 1)
        n_keep = math.ceil((alpha * beta * (2.0 - alpha - beta)
                            / (alpha + beta) ** 3) * (z_score / accuracy) ** 2)
        required = (burn + n_keep) * thin
        reports.append({"parameter": p, "degenerate": False, "thin": thin,
                        "burn_in": burn * thin, "required": float(required)})

    return RunLengthReport(
        required_samples=max(rep["required"] for rep in reports),
        per_parameter=reports, n_min=n_min, quantile=quantile,
        accuracy=accuracy, probability=probability)
