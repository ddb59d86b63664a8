"""Gaussian-process surrogate over all daily outputs jointly.

One Laplacian-kernel GP maps the 4 calibration parameters to the full
2J-vector of daily hospitalizations and deaths. Inputs are normalized to the
unit cube using the design bounds (without this the seeding-time axis, whose
range is 28 hours, would dominate the L1 distance); outputs are standardized
per column so that a single nugget is meaningful across hospitalizations and
deaths. The fitted model keeps the training design and a coefficient matrix,
so prediction is a kernel-weighted sum over training points.

The length scale is chosen by gradient-based maximization of the log marginal
likelihood (summed over all output columns, i.e. one shared scale across
time), the nugget by a brute-force sweep; final arbitration between the
candidate pairs is by cross-validated median absolute relative error.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

from .abm import DailySeries
from .design import Bounds, TrainingDataset, scale_from_bounds

logger = logging.getLogger("epicalib.gp")

#: Relative-error floor (in counts) used everywhere surrogate accuracy is
#: scored; avoids division by near-zero early-epidemic values.
RELATIVE_ERROR_FLOOR = 1.0

DEFAULT_NUGGET_GRID = tuple(np.logspace(-3.0, 0.0, 10))


class SingularGramError(np.linalg.LinAlgError):
    """Gram matrix plus nugget could not be factorized."""


def laplacian_kernel(x: np.ndarray, y: np.ndarray, length_scale: float) -> float:
    """exp(-||x-y||_1 / l) for two normalized parameter points."""
    if length_scale <= 0:
        raise ValueError("length scale must be positive")
    return float(np.exp(-np.abs(np.asarray(x, float) - np.asarray(y, float)).sum() / length_scale))


def _gram(points: np.ndarray, length_scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Kernel matrix and the pairwise L1 distances it was built from."""
    dist = cdist(points, points, metric="cityblock")
    return np.exp(-dist / length_scale), dist


def _cross_kernel(test: np.ndarray, train: np.ndarray, length_scale: float) -> np.ndarray:
    return np.exp(-cdist(test, train, metric="cityblock") / length_scale)


def solve_coefficients(gram: np.ndarray, nugget: float, targets: np.ndarray) -> np.ndarray:
    """Solve (K + nugget*I) alpha = targets via Cholesky."""
    n = gram.shape[0]
    system = gram + nugget * np.eye(n)
    try:
        factor = cho_factor(system, lower=True)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(system)
        raise SingularGramError(
            f"Gram matrix with nugget {nugget} is not positive definite "
            f"(condition estimate {cond:.3e})") from exc
    return cho_solve(factor, targets)


@dataclass
class GPModel:
    """Trained surrogate: kernel scale, nugget, stored design, coefficients."""

    length_scale: float
    nugget: float
    train_normalized: np.ndarray  # (n, dim) in the unit cube
    alpha: np.ndarray  # (n, 2J)
    bounds: Bounds
    out_mean: np.ndarray  # (2J,)
    out_std: np.ndarray  # (2J,)
    horizon: int

    @property
    def n_train(self) -> int:
        return self.train_normalized.shape[0]


def _standardize(responses: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = responses.mean(axis=0)
    std = responses.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)  # constant columns pass through
    return (responses - mean) / std, mean, std


def fit(dataset: TrainingDataset, length_scale: float, nugget: float) -> GPModel:
    """Fit the surrogate at fixed hyperparameters."""
    if dataset.n < 1:
        raise ValueError("dataset must be non-empty")
    if length_scale <= 0:
        raise ValueError("length scale must be positive")
    if nugget < 0:
        raise ValueError("nugget must be non-negative")
    x = scale_from_bounds(dataset.design, dataset.bounds)
    ystd, mean, std = _standardize(dataset.responses)
    gram, _ = _gram(x, length_scale)
    alpha = solve_coefficients(gram, nugget, ystd)
    return GPModel(length_scale=length_scale, nugget=nugget, train_normalized=x,
                   alpha=alpha, bounds=dataset.bounds, out_mean=mean, out_std=std,
                   horizon=dataset.horizon)


def predict_batch(model: GPModel, thetas: np.ndarray) -> np.ndarray:
    """Surrogate means for a batch of parameter points, shape (B, 2J)."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if not np.all(np.isfinite(thetas)):
        raise ValueError("prediction points must be finite")
    u = scale_from_bounds(thetas, model.bounds)
    outside = ~model.bounds.contains(thetas)
    if np.any(outside):
        logger.warning("predicting outside the training bounds at %d of %d points",
                       int(outside.sum()), thetas.shape[0])
    kstar = _cross_kernel(u, model.train_normalized, model.length_scale)
    return kstar @ model.alpha * model.out_std + model.out_mean


def predict(model: GPModel, theta) -> DailySeries:
    """Surrogate prediction at one parameter point."""
    arr = theta.as_array() if hasattr(theta, "as_array") else np.asarray(theta, dtype=float)
    return DailySeries.from_stacked(predict_batch(model, arr[None, :])[0])


@dataclass
class CvReport:
    """Cross-validation summary; errors are absolute relative errors with a
    floor of RELATIVE_ERROR_FLOOR counts in the denominator."""

    fold_medians: list[float]
    pooled_median: float
    errors: np.ndarray  # flat vector over all held-out (point, output) cells
    mse: float
    r2: float
    length_scale: float
    nugget: float
    folds: int
    shuffle_seed: int


def _relative_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return np.abs(pred - truth) / np.maximum(np.abs(truth), RELATIVE_ERROR_FLOOR)


def cross_validate(dataset: TrainingDataset, k: int, length_scale: float,
                   nugget: float, shuffle_seed: int = 0) -> CvReport:
    """k-fold CV with a deterministic seeded shuffle."""
    if k < 2:
        raise ValueError("k must be >= 2")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(shuffle_seed)))
    perm = rng.permutation(dataset.n)
    folds = np.array_split(perm, k)
    # leave-one-out (k == n) is allowed; what is rejected is an empty fold or
    # a training complement too small to fit on
    if min(f.size for f in folds) < 1:
        raise ValueError(f"{k} folds over {dataset.n} points leaves an empty fold")
    if dataset.n - max(f.size for f in folds) < 2:
        raise ValueError(f"{k} folds over {dataset.n} points leaves fewer than 2 training points")

    fold_medians = []
    all_errors = []
    sse = 0.0
    sst = 0.0
    col_mean = dataset.responses.mean(axis=0)
    for fold in folds:
        train_idx = np.setdiff1d(perm, fold, assume_unique=True)
        train = TrainingDataset(design=dataset.design[train_idx],
                                responses=dataset.responses[train_idx],
                                n_seeds=dataset.n_seeds, bounds=dataset.bounds,
                                horizon=dataset.horizon)
        model = fit(train, length_scale, nugget)
        pred = predict_batch(model, dataset.design[fold])
        truth = dataset.responses[fold]
        errs = _relative_errors(pred, truth).ravel()
        fold_medians.append(float(np.median(errs)))
        all_errors.append(errs)
        sse += float(np.sum((pred - truth) ** 2))
        sst += float(np.sum((truth - col_mean) ** 2))

    errors = np.concatenate(all_errors)
    return CvReport(fold_medians=fold_medians, pooled_median=float(np.median(errors)),
                    errors=errors, mse=sse / errors.size,
                    r2=1.0 - sse / sst if sst > 0 else float("nan"),
                    length_scale=length_scale, nugget=nugget, folds=k,
                    shuffle_seed=shuffle_seed)


def log_marginal_likelihood(x: np.ndarray, ystd: np.ndarray, length_scale: float,
                            nugget: float, with_gradient: bool = False):
    """LML of the standardized outputs, summed over output columns.

    All columns share one kernel, so the LML is a sum of per-column Gaussian
    likelihood terms with a common Gram factorization.
    """
    n, p = ystd.shape
    gram, dist = _gram(x, length_scale)
    system = gram + nugget * np.eye(n)
    try:
        factor = cho_factor(system, lower=True)
    except np.linalg.LinAlgError:
        return (-np.inf, 0.0) if with_gradient else -np.inf
    alpha = cho_solve(factor, ystd)
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    lml = -0.5 * float(np.sum(ystd * alpha)) - 0.5 * p * logdet \
        - 0.5 * n * p * np.log(2.0 * np.pi)
    if not with_gradient:
        return lml
    dk_dl = gram * dist / length_scale ** 2
    inv = cho_solve(factor, np.eye(n))
    dlml_dl = 0.5 * float(np.sum((alpha @ alpha.T - p * inv) * dk_dl))
    return lml, dlml_dl


@dataclass
class HyperparameterSearch:
    length_scale: float
    nugget: float
    cv_report: CvReport
    fallback_used: bool
    table: list[dict]  # one row per nugget: l, lml, cv median


_L_BOUNDS = (np.log(1e-2), np.log(1e2))


def _optimize_length_scale(x: np.ndarray, ystd: np.ndarray, nugget: float) -> tuple[float, bool]:
    """Maximize LML over log length-scale; fall back to a coarse grid.

    Multi-start: the LML is flat for very small l (Gram -> identity), and a
    single descent can overshoot onto that plateau and stall, so several
    starting scales are tried and the best finisher wins.
    """
    pairwise = cdist(x, x, metric="cityblock")
    med = np.median(pairwise[np.triu_indices_from(pairwise, k=1)]) if x.shape[0] > 1 else 1.0

    def objective(log_l):
        lml, grad = log_marginal_likelihood(x, ystd, float(np.exp(log_l[0])), nugget,
                                            with_gradient=True)
        # chain rule to log-space; guard non-finite values for the optimizer
        if not np.isfinite(lml):
            return 1e30, np.array([0.0])
        return -lml, np.array([-grad * np.exp(log_l[0])])

    candidates = []
    for start in (med, med / 5.0, med / 25.0):
        x0 = np.log(np.clip(start, np.exp(_L_BOUNDS[0]), np.exp(_L_BOUNDS[1])))
        try:
            res = minimize(objective, np.array([x0]), jac=True, method="L-BFGS-B",
                           bounds=[_L_BOUNDS])
        except Exception:  # optimizer divergence: try the next start
            continue
        if res.success and np.isfinite(res.fun):
            candidates.append((-float(res.fun), float(np.exp(res.x[0]))))
    if candidates:
        return max(candidates)[1], False

    grid = np.exp(np.linspace(*_L_BOUNDS, 12))
    lmls = [log_marginal_likelihood(x, ystd, l, nugget) for l in grid]
    best = int(np.argmax(lmls))
    logger.warning("length-scale optimizer failed for nugget %.4g; "
                   "falling back to grid value %.4g", nugget, grid[best])
    return float(grid[best]), True


def select_hyperparameters(dataset: TrainingDataset,
                           nugget_grid=DEFAULT_NUGGET_GRID,
                           folds: int = 5, cv_seed: int = 0) -> HyperparameterSearch:
    """Sweep the nugget grid, optimizing l per nugget; pick by CV error."""
    nuggets = [float(v) for v in nugget_grid]
    if not nuggets:
        raise ValueError("nugget grid must be non-empty")
    if min(nuggets) < 0.001 or max(nuggets) > 1.0:
        raise ValueError("nugget grid must lie within [0.001, 1]")
    x = scale_from_bounds(dataset.design, dataset.bounds)
    ystd, _, _ = _standardize(dataset.responses)

    table = []
    best = None
    any_fallback = False
    for nugget in nuggets:
        l_opt, fell_back = _optimize_length_scale(x, ystd, nugget)
        any_fallback |= fell_back
        report = cross_validate(dataset, folds, l_opt, nugget, shuffle_seed=cv_seed)
        table.append({"nugget": nugget, "length_scale": l_opt,
                      "cv_median": report.pooled_median, "fallback": fell_back})
        if best is None or report.pooled_median < best.cv_report.pooled_median:
            best = HyperparameterSearch(length_scale=l_opt, nugget=nugget,
                                        cv_report=report, fallback_used=fell_back,
                                        table=table)
    best.table = table
    best.fallback_used = any_fallback
    return best


# ---------------------------------------------------------------------------
# portable persistence: JSON header line + labelled CSV blocks


def save_model(model: GPModel, path: str | Path) -> None:
    header = {
        "format": "epicalib-gp-v1",
        "length_scale": model.length_scale,
        "nugget": model.nugget,
        "bounds": model.bounds.to_dict(),
        "out_mean": model.out_mean.tolist(),
        "out_std": model.out_std.tolist(),
        "horizon": model.horizon,
        "n_train": model.n_train,
        "dim": int(model.train_normalized.shape[1]),
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines.append(f"THETA {model.n_train} {model.train_normalized.shape[1]}")
    for row in model.train_normalized:
        lines.append(",".join(repr(float(v)) for v in row))
    lines.append(f"ALPHA {model.n_train} {model.alpha.shape[1]}")
    for row in model.alpha:
        lines.append(",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path: str | Path) -> GPModel:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != "epicalib-gp-v1":
        raise ValueError(f"not a surrogate model file: {path}")
    n, dim = header["n_train"], header["dim"]
    tag, tn, td = lines[1].split()
    if tag != "THETA" or int(tn) != n or int(td) != dim:
        raise ValueError("malformed THETA block")
    theta = np.array([[float(v) for v in lines[2 + i].split(",")] for i in range(n)])
    atag = lines[2 + n].split()
    if atag[0] != "ALPHA" or int(atag[1]) != n:
        raise ValueError("malformed ALPHA block")
    width = int(atag[2])
    alpha = np.array([[float(v) for v in lines[3 + n + i].split(",")] for i in range(n)])
    if alpha.shape != (n, width):
        raise ValueError("malformed ALPHA block")
    return GPModel(length_scale=header["length_scale"], nugget=header["nugget"],
                   train_normalized=theta, alpha=alpha,
                   bounds=Bounds.from_dict(header["bounds"]),
                   out_mean=np.array(header["out_mean"]),
                   out_std=np.array(header["out_std"]), horizon=header["horizon"])
