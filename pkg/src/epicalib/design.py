"""Quasi-random training designs and seed-averaged dataset assembly.

Designs are Halton sequences (radical inverses in the first prime bases,
1-indexed so the degenerate origin point is skipped) scaled affinely onto the
calibration parameter bounds. `build_dataset` evaluates the seed-averaged ABM
at every design row and persists the result as a resumable directory of CSV
files plus a manifest.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import manifest as mf
from .abm import AbmConfig, DailySeries, ParameterVector, simulate_mean

PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29)

DESIGN_HEADER = "theta1,theta2,theta3,theta4"


@dataclass(frozen=True)
class Bounds:
    """Per-parameter (min, max) box."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("bounds must be two equal-length vectors")
        if not np.all(self.lower < self.upper):
            raise ValueError("each lower bound must be strictly below its upper bound")

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def ranges(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, points: np.ndarray, atol: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all((p >= self.lower - atol) & (p <= self.upper + atol), axis=1)

    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "Bounds":
        return Bounds(np.asarray(d["lower"]), np.asarray(d["upper"]))


#: Calibration parameter ranges used throughout: exposure rate, seeding time
#: (hours), stay-home probability, protective-behavior probability.
DEFAULT_BOUNDS = Bounds(
    lower=np.array([0.046, 31.0, 0.939, 0.407]),
    upper=np.array([0.069, 59.0, 0.981, 0.492]),
)


def halton_value(index: int, base: int) -> float:
    """Radical inverse of `index` in `base`; the sequence is 1-indexed."""
    if index < 1:
        raise ValueError("halton index must be >= 1 (sequence skips the origin)")
    if base < 2:
        raise ValueError("halton base must be >= 2")
    result = 0.0
    f = 1.0
    i = index
    while i > 0:
        f /= base
        result += f * (i % base)
        i //= base
    return result


def halton_matrix(n: int, dims: int) -> np.ndarray:
    """n x dims matrix; column d uses the d-th prime base."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 1 <= dims <= len(PRIMES):
        raise ValueError(f"dims must lie in [1, {len(PRIMES)}]")
    out = np.empty((n, dims))
    for d in range(dims):
        base = PRIMES[d]
        out[:, d] = [halton_value(i, base) for i in range(1, n + 1)]
    return out


def scale_to_bounds(unit: np.ndarray, bounds: Bounds) -> np.ndarray:
    """Affine map of a unit-cube matrix onto the bounds box."""
    u = np.asarray(unit, dtype=float)
    if np.any(u < 0.0) or np.any(u > 1.0):
        raise ValueError("unit matrix entries must lie in [0, 1]")
    return bounds.lower + u * bounds.ranges


def scale_from_bounds(design: np.ndarray, bounds: Bounds) -> np.ndarray:
    """Inverse of `scale_to_bounds` (no clipping)."""
    return (np.asarray(design, dtype=float) - bounds.lower) / bounds.ranges


def halton_design(n: int, bounds: Bounds = DEFAULT_BOUNDS) -> np.ndarray:
    return scale_to_bounds(halton_matrix(n, bounds.dim), bounds)


@dataclass
class TrainingDataset:
    """Design matrix with seed-averaged ABM responses.

    `responses` is (N, 2J): hospitalizations for days 0..J-1 followed by
    deaths for days 0..J-1, matching ``DailySeries.stacked``.
    """

    design: np.ndarray
    responses: np.ndarray
    n_seeds: int
    bounds: Bounds
    horizon: int

    def __post_init__(self):
        self.design = np.atleast_2d(np.asarray(self.design, dtype=float))
        self.responses = np.atleast_2d(np.asarray(self.responses, dtype=float))
        if self.design.shape[0] != self.responses.shape[0]:
            raise ValueError("design and responses must have matching row counts")
        if self.responses.shape[1] != 2 * self.horizon:
            raise ValueError("responses must have 2*horizon columns")
        if np.any(self.responses < 0):
            raise ValueError("responses must be non-negative")
        if not np.all(self.bounds.contains(self.design)):
            raise ValueError("design rows must lie within bounds")

    @property
    def n(self) -> int:
        return self.design.shape[0]

    def response_series(self, i: int) -> DailySeries:
        return DailySeries.from_stacked(self.responses[i])


def format_design_csv(design: np.ndarray) -> str:
    lines = [DESIGN_HEADER]
    for row in np.atleast_2d(design):
        lines.append(",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def parse_design_csv(text: str) -> np.ndarray:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != DESIGN_HEADER:
        raise ValueError(f"expected header '{DESIGN_HEADER}'")
    return np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])


def _response_path(directory: Path, row: int) -> Path:
    return directory / "responses" / f"response_{row:04d}.csv"


def _compute_row(args) -> tuple[int, str]:
    row, theta, config, n_seeds = args
    series = simulate_mean(ParameterVector.from_array(theta), config, n_seeds)
    return row, series.to_csv()


def build_dataset(design: np.ndarray, config: AbmConfig, n_seeds: int,
                  out_dir: str | Path, bounds: Bounds = DEFAULT_BOUNDS,
                  threads: int = 1) -> TrainingDataset:
    """Evaluate the seed-averaged ABM on every design row and persist.

    Rows whose response file already exists are skipped, so an interrupted
    run can be resumed; a completed run is idempotent byte-for-byte. Output
    order is fixed by row index regardless of `threads`.
    """
    design = np.atleast_2d(np.asarray(design, dtype=float))
    if not np.all(bounds.contains(design)):
        raise ValueError("design rows must lie within bounds")
    out_dir = Path(out_dir)
    (out_dir / "responses").mkdir(parents=True, exist_ok=True)

    design_path = out_dir / "design.csv"
    design_csv = format_design_csv(design)
    if design_path.exists():
        if design_path.read_text() != design_csv:
            raise ValueError(f"{design_path} exists with a different design")
    else:
        design_path.write_text(design_csv)

    pending = [(i, design[i], config, n_seeds) for i in range(design.shape[0])
               if not _response_path(out_dir, i).exists()]
    t0 = time.perf_counter()
    if threads > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for row, csv_text in pool.map(_compute_row, pending, chunksize=4):
                _response_path(out_dir, row).write_text(csv_text)
    else:
        for args in pending:
            row, csv_text = _compute_row(args)
            _response_path(out_dir, row).write_text(csv_text)

    mf.write_manifest(
        out_dir, stage="simulate",
        config={"abm": config.to_dict(), "n_seeds": n_seeds,
                "bounds": bounds.to_dict(), "rows": int(design.shape[0]),
                "rng": "philox"},
        inputs={"design": design_path},
        seeds={"abm_seeds": f"0..{n_seeds - 1}"},
    )
    mf.write_timing(out_dir, time.perf_counter() - t0)
    return load_dataset(out_dir)


def load_dataset(directory: str | Path) -> TrainingDataset:
    directory = Path(directory)
    design = parse_design_csv((directory / "design.csv").read_text())
    man = mf.read_manifest(directory)
    cfg = man["config"]
    rows = []
    for i in range(design.shape[0]):
        series = DailySeries.from_csv(_response_path(directory, i).read_text())
        rows.append(series.stacked())
    responses = np.vstack(rows)
    return TrainingDataset(
        design=design, responses=responses, n_seeds=cfg["n_seeds"],
        bounds=Bounds.from_dict(cfg["bounds"]), horizon=cfg["abm"]["horizon"],
    )
