"""Stochastic place-based SEIHRD epidemic simulator.

The simulator exposes four calibration parameters:

* ``theta1`` -- exposure rate per co-located infected contact-hour,
* ``theta2`` -- time of initial infection seeding, in hours (index cases are
  injected at the start of day ``floor(theta2 / 24)``),
* ``theta3`` -- daily probability that an agent stays home,
* ``theta4`` -- daily probability that an agent adopts protective behavior;
  while active it also multiplies that agent's exposure hazard.

Agents hold a compartment state (S, E, I, H, R, D) and belong to a fixed
household plus a daily venue drawn from a popularity-weighted distribution.
Transmission happens through two channels: household mixing (always on for
circulating agents) and venue mixing (only for agents that went out).
Hospitalized and dead agents do not circulate.

All randomness is driven by a counter-based Philox generator keyed by the run
seed, so distinct seeds give independent streams and a run is reproducible
bit-for-bit from ``(params, config, seed)``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, fields, replace

import numpy as np

# Compartment codes.
S, E, I, H, R, D = 0, 1, 2, 3, 4, 5


@dataclass(frozen=True)
class ParameterVector:
    """The 4-dimensional calibration point."""

    theta1: float  # exposure rate per infected contact-hour
    theta2: float  # seeding time in hours from simulation start
    theta3: float  # daily stay-home probability
    theta4: float  # daily protective-behavior probability / exposure multiplier

    def as_array(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, self.theta3, self.theta4])

    @staticmethod
    def from_array(values) -> "ParameterVector":
        v = np.asarray(values, dtype=float)
        if v.shape != (4,):
            raise ValueError(f"parameter vector must have 4 components, got shape {v.shape}")
        return ParameterVector(*v.tolist())

    def validate(self) -> None:
        a = self.as_array()
        if not np.all(np.isfinite(a)):
            raise ValueError("parameter vector must be finite")
        if np.any(a < 0):
            raise ValueError("parameter components must be non-negative")
        for name, p in (("theta3", self.theta3), ("theta4", self.theta4)):
            if p > 1:
                raise ValueError(f"{name} is a probability, got {p}")


@dataclass
class DailySeries:
    """Daily hospitalization and death counts over a fixed horizon."""

    hospitalizations: np.ndarray
    deaths: np.ndarray

    def __post_init__(self):
        self.hospitalizations = np.asarray(self.hospitalizations, dtype=float)
        self.deaths = np.asarray(self.deaths, dtype=float)
        if self.hospitalizations.shape != self.deaths.shape or self.hospitalizations.ndim != 1:
            raise ValueError("hospitalizations and deaths must be 1-d vectors of equal length")
        if np.any(self.hospitalizations < 0) or np.any(self.deaths < 0):
            raise ValueError("daily counts must be non-negative")

    @property
    def horizon(self) -> int:
        return self.hospitalizations.shape[0]

    def stacked(self) -> np.ndarray:
        """Concatenated (hospitalizations, deaths) vector of length 2J."""
        return np.concatenate([self.hospitalizations, self.deaths])

    @staticmethod
    def from_stacked(values) -> "DailySeries":
        v = np.asarray(values, dtype=float)
        if v.ndim != 1 or v.size % 2:
            raise ValueError("stacked series must have even length")
        j = v.size // 2
        return DailySeries(v[:j], v[j:])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("day,hospitalizations,deaths\n")
        for day, (h, d) in enumerate(zip(self.hospitalizations, self.deaths)):
            buf.write(f"{day},{float(h)!r},{float(d)!r}\n")
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "DailySeries":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if not lines or lines[0].split(",") != ["day", "hospitalizations", "deaths"]:
            raise ValueError("expected header 'day,hospitalizations,deaths'")
        h, d = [], []
        for ln in lines[1:]:
            _, hv, dv = ln.split(",")
            h.append(float(hv))
            d.append(float(dv))
        return DailySeries(np.array(h), np.array(d))


@dataclass(frozen=True)
class AbmConfig:
    """Configuration of the stand-in ABM.

    Disease-progression defaults are deliberately simple (geometric dwell
    times) and are all overridable; they are tuned so that mid-range
    parameters produce an epidemic wave that rises, peaks and declines
    within the default 95-day horizon.
    """

    population: int = 12_000
    places: int = 500
    household_size: int = 4
    # Daily venue choice is popularity-weighted: weight of place k is
    # (k+1)^-place_popularity_exponent.
    place_popularity_exponent: float = 1.0
    contacts_per_hour: float = 4.2  # mean contacts per place per hour
    hours_per_day: float = 8.0  # contact-hours aggregated into one day step
    household_contact_hours: float = 2.0  # pair contact-hours per day at home
    # Fraction of outings that happen regardless of the stay-home decision
    # (essential activity floor); presence = floor + (1-floor)*(1-theta3).
    essential_outing_rate: float = 0.15
    seed_infections: int = 36
    horizon: int = 95
    p_exposed_to_infectious: float = 1.0 / 3.0  # per-day E -> I
    p_infectious_exit: float = 0.2  # per-day exit from I
    p_hospital_given_exit: float = 0.3  # share of I-exits admitted
    p_hospital_exit: float = 1.0 / 7.0  # per-day exit from H
    p_death_given_exit: float = 0.55  # share of H-exits that die

    def validate(self) -> None:
        if self.population < 1:
            raise ValueError("population must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.places < 1 or self.household_size < 1:
            raise ValueError("places and household_size must be >= 1")
        if self.seed_infections < 0 or self.seed_infections > self.population:
            raise ValueError("seed_infections must lie in [0, population]")
        for name in ("p_exposed_to_infectious", "p_infectious_exit", "p_hospital_given_exit",
                     "p_hospital_exit", "p_death_given_exit", "essential_outing_rate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        for name in ("contacts_per_hour", "hours_per_day", "household_contact_hours",
                     "place_popularity_exponent"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def from_dict(d: dict) -> "AbmConfig":
        known = {f.name for f in fields(AbmConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ABM config keys: {sorted(unknown)}")
        cfg = replace(AbmConfig(), **d)
        cfg.validate()
        return cfg


def _rng_for_seed(seed: int) -> np.random.Generator:
    # Philox is counter-based: distinct keys give independent streams.
    return np.random.Generator(np.random.Philox(key=np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)))


def seeding_day(theta2_hours: float) -> int:
    """Day on which index cases enter the population (start of day)."""
    return int(np.floor(theta2_hours / 24.0))


def _run(params: ParameterVector, config: AbmConfig, rng_seed: int,
         record_census: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    params.validate()
    config.validate()
    n = config.population
    horizon = config.horizon
    rng = _rng_for_seed(rng_seed)

    state = np.full(n, S, dtype=np.int8)
    household = np.arange(n) // config.household_size
    n_households = int(household[-1]) + 1

    # Venue popularity (Zipf-like) for the daily place draw.
    ranks = np.arange(1, config.places + 1, dtype=float)
    weights = ranks ** (-config.place_popularity_exponent)
    cum_weights = np.cumsum(weights) / weights.sum()

    seed_day = seeding_day(params.theta2)
    out_prob = config.essential_outing_rate \
        + (1.0 - config.essential_outing_rate) * (1.0 - params.theta3)
    place_coeff = params.theta1 * config.contacts_per_hour * config.hours_per_day
    house_coeff = params.theta1 * config.household_contact_hours

    hosp = np.zeros(horizon)
    dead = np.zeros(horizon)
    census = np.zeros((horizon, 6), dtype=np.int64) if record_census else None
    place_hazard = np.zeros(n)

    for day in range(horizon):
        if day == seed_day and config.seed_infections:
            idx = rng.choice(n, size=config.seed_infections, replace=False)
            state[idx] = I

        circulating = (state < H) | (state == R)
        out = circulating & (rng.random(n) < out_prob)
        out_idx = np.flatnonzero(out)
        place_of_out = np.searchsorted(cum_weights, rng.random(out_idx.size))

        infectious = state == I
        present = np.bincount(place_of_out, minlength=config.places)
        inf_present = np.bincount(place_of_out[infectious[out_idx]], minlength=config.places)
        inf_fraction = inf_present / np.maximum(present, 1)

        house_inf = np.bincount(household[infectious], minlength=n_households)

        sus_idx = np.flatnonzero(state == S)
        hazard = house_coeff * house_inf[household[sus_idx]]
        place_hazard[:] = 0.0
        place_hazard[out_idx] = place_coeff * inf_fraction[place_of_out]
        hazard += place_hazard[sus_idx]
        # Protective behavior is an independent per-agent per-day Bernoulli
        # coin (p = theta4) scaling the day's exposure hazard by theta4; the
        # coin is folded in analytically, which leaves the distribution of
        # infection events unchanged.
        p_inf = params.theta4 * -np.expm1(-params.theta4 * hazard) \
            + (1.0 - params.theta4) * -np.expm1(-hazard)
        new_exposed = sus_idx[rng.random(sus_idx.size) < p_inf]

        # Progression draws from start-of-day state; one uniform resolves
        # both the exit event and the branch taken.
        e_idx = np.flatnonzero(state == E)
        i_idx = np.flatnonzero(state == I)
        h_idx = np.flatnonzero(state == H)
        u_e = rng.random(e_idx.size)
        u_i = rng.random(i_idx.size)
        u_h = rng.random(h_idx.size)
        e_to_i = e_idx[u_e < config.p_exposed_to_infectious]
        i_to_h = i_idx[u_i < config.p_infectious_exit * config.p_hospital_given_exit]
        i_to_r = i_idx[(u_i >= config.p_infectious_exit * config.p_hospital_given_exit)
                       & (u_i < config.p_infectious_exit)]
        h_to_d = h_idx[u_h < config.p_hospital_exit * config.p_death_given_exit]
        h_to_r = h_idx[(u_h >= config.p_hospital_exit * config.p_death_given_exit)
                       & (u_h < config.p_hospital_exit)]

        state[new_exposed] = E
        state[e_to_i] = I
        state[i_to_h] = H
        state[i_to_r] = R
        state[h_to_d] = D
        state[h_to_r] = R

        hosp[day] = i_to_h.size
        dead[day] = h_to_d.size
        if record_census:
            census[day] = np.bincount(state, minlength=6)

    return hosp, dead, census


def simulate(params: ParameterVector, config: AbmConfig, rng_seed: int) -> DailySeries:
    """Run one stochastic realization; deterministic given (params, config, seed).

    Daily outputs are incidence counts: new hospital admissions and new
    deaths on each day.
    """
    hosp, dead, _ = _run(params, config, rng_seed, record_census=False)
    return DailySeries(hosp, dead)


def simulate_mean(params: ParameterVector, config: AbmConfig, n_seeds: int = 50) -> DailySeries:
    """Element-wise mean of `simulate` over seeds 0..n_seeds-1.

    Accumulation is done in fixed seed order so the result does not depend
    on scheduling.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    total_h = np.zeros(config.horizon)
    total_d = np.zeros(config.horizon)
    for seed in range(n_seeds):
        run = simulate(params, config, seed)
        total_h += run.hospitalizations
        total_d += run.deaths
    return DailySeries(total_h / n_seeds, total_d / n_seeds)


def compartment_counts(params: ParameterVector, config: AbmConfig, rng_seed: int) -> np.ndarray:
    """Per-day end-of-day compartment census (horizon x 6).

    Follows the exact draw sequence of `simulate`; used for conservation
    checks.
    """
    _, _, census = _run(params, config, rng_seed, record_census=True)
    return census
