"""
Lineage decomposition X = V^R + W^R of the particle system
Handles coupled V/W simulation, the immigration rate, increment-moment
scans, the square-root SDE comparison and support-collapse detection
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, List, Optional, Sequence

import numpy as np

from branching import (LABEL_V, LABEL_W, ParticlePopulation, apply_offspring, branch_particles,
                       check_branching_step, draw_offspring, move_particles)
from dirichlet_kernel import f_R
from errors import (ConfigError, InvariantViolationError, ParameterDomainError, ParameterGateError,
                    PopulationCapError)
from monte_carlo import SlopeFit, loglog_slope, mean_and_stderr, replica_stream
from stable_motion import StableLaw

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ['time', 'v_mass', 'w_mass', 'x_mass', 'a_dot', 'support_min', 'support_max']
COMPARISON_COLUMNS = ['step', 'w', 'z', 'a_dot', 'violation_flag']


def immigration_rate(pop: ParticlePopulation, R: float, law: StableLaw) -> float:
    """A-dot = sum over V particles of mass * f_R(position)"""
    v_positions = pop.positions[pop.labels == LABEL_V]
    if v_positions.size == 0:
        return 0.0
    if np.any(np.abs(v_positions) >= R):
        raise InvariantViolationError(f"V-labeled particle found outside (-{R}, {R})")
    return float(pop.mass_unit * np.sum(f_R(v_positions, R, law)))


@dataclass
class LabeledTrajectory:
    """Per-step record of a coupled V/W run"""
    R: float
    mass_unit: float
    times: List[float] = field(default_factory=list)
    v_mass: List[float] = field(default_factory=list)
    w_mass: List[float] = field(default_factory=list)
    x_mass: List[float] = field(default_factory=list)
    a_dot: List[float] = field(default_factory=list)
    v_count: List[int] = field(default_factory=list)
    w_count: List[int] = field(default_factory=list)
    support_min: List[float] = field(default_factory=list)
    support_max: List[float] = field(default_factory=list)
    v_min: List[float] = field(default_factory=list)
    v_max: List[float] = field(default_factory=list)
    exits: List[int] = field(default_factory=list)
    v_deaths: List[int] = field(default_factory=list)
    v_splits: List[int] = field(default_factory=list)
    snapshots: Deque[ParticlePopulation] = field(default_factory=deque)
    extinction_time: Optional[float] = None
    final: Optional[ParticlePopulation] = None

    def record(self, pop: ParticlePopulation, a_dot: float) -> None:
        is_v = pop.labels == LABEL_V
        n_v = int(is_v.sum())
        low, high = pop.support_extremes()
        self.times.append(pop.time)
        self.v_count.append(n_v)
        self.w_count.append(pop.count - n_v)
        self.v_mass.append(n_v * pop.mass_unit)
        self.w_mass.append((pop.count - n_v) * pop.mass_unit)
        self.x_mass.append(pop.total_mass())
        self.a_dot.append(a_dot)
        self.support_min.append(low)
        self.support_max.append(high)
        self.v_min.append(float(pop.positions[is_v].min()) if n_v else float('nan'))
        self.v_max.append(float(pop.positions[is_v].max()) if n_v else float('nan'))
        if pop.count and self.snapshots.maxlen:
            self.snapshots.append(pop)

    def mass_at(self, t: float) -> float:
        if self.extinction_time is not None and t >= self.extinction_time:
            return 0.0
        index = int(np.searchsorted(self.times, t + 1e-12, side='right')) - 1
        return self.x_mass[max(index, 0)]

    def to_rows(self) -> List[dict]:
        return [
            {'time': t, 'v_mass': v, 'w_mass': w, 'x_mass': x, 'a_dot': a, 'support_min': lo, 'support_max': hi}
            for t, v, w, x, a, lo, hi in zip(self.times, self.v_mass, self.w_mass, self.x_mass,
                                            self.a_dot, self.support_min, self.support_max)
        ]


def coupled_simulate(X0: ParticlePopulation, law: StableLaw, R: float, T: float, dt: float,
                     rng: np.random.Generator, cap: Optional[int] = None,
                     keep_last: int = 0) -> LabeledTrajectory:
    """Free stable motion with critical branching; a lineage turns W at its first exit of (-R, R)"""
    if X0.count and np.any(np.abs(X0.positions) > R / 2.0):
        raise ConfigError(f"Initial support must lie in the closed ball of radius R/2 = {R / 2.0}")
    check_branching_step(X0.mass_unit, dt)

    current = X0.relabeled(LABEL_V)
    trajectory = LabeledTrajectory(R=R, mass_unit=X0.mass_unit, snapshots=deque(maxlen=keep_last))
    trajectory.record(current, immigration_rate(current, R, law))
    n_steps = int(np.ceil((T - X0.time) / dt - 1e-9))

    for _ in range(max(n_steps, 0)):
        if current.count == 0:
            break
        moved = move_particles(current, dt, law, rng)
        leaving = (moved.labels == LABEL_V) & (np.abs(moved.positions) >= R)
        moved.labels[leaving] = LABEL_W

        offspring = draw_offspring(moved, dt, rng)
        current = apply_offspring(moved, offspring)
        if cap is not None and current.count > cap:
            raise PopulationCapError(current.count, cap)
        is_v = moved.labels == LABEL_V
        trajectory.exits.append(int(leaving.sum()))
        trajectory.v_deaths.append(int(np.count_nonzero(is_v & (offspring == 0))))
        trajectory.v_splits.append(int(np.count_nonzero(is_v & (offspring == 2))))
        trajectory.record(current, immigration_rate(current, R, law))
        if current.count == 0:
            trajectory.extinction_time = current.time

    if current.count == 0 and trajectory.extinction_time is None:
        trajectory.extinction_time = current.time
    trajectory.final = current
    return trajectory


@dataclass(frozen=True)
class LedgerCheck:
    """Per-step mass bookkeeping of a coupled run"""
    exact: bool
    max_sum_error: float
    max_ledger_error: float


def mass_ledger_check(traj: LabeledTrajectory) -> LedgerCheck:
    """V + W = X at every step and V(k+1) = V(k) + splits - deaths - exits in particle counts

    V(k) and V(k+1) are counted from the recorded labels; the events are
    tallied separately while the step runs.
    """
    v = np.asarray(traj.v_count)
    sum_error = np.max(np.abs(np.asarray(traj.v_mass) + np.asarray(traj.w_mass) - np.asarray(traj.x_mass)))
    steps = len(traj.exits)
    if not (len(traj.v_deaths) == len(traj.v_splits) == steps and v.size == steps + 1):
        raise InvariantViolationError(
            f"Event ledger covers {steps} steps but {v.size} V counts were recorded"
        )
    predicted = v[:-1] + np.asarray(traj.v_splits) - np.asarray(traj.v_deaths) - np.asarray(traj.exits)
    ledger_error = float(np.max(np.abs(v[1:] - predicted))) * traj.mass_unit if steps else 0.0
    # counts are integers; the mass sum can only differ by rounding
    rounding = 1e-12 * max(1.0, float(np.max(traj.x_mass)))
    return LedgerCheck(exact=bool(sum_error <= rounding and ledger_error == 0.0),
                       max_sum_error=float(sum_error), max_ledger_error=ledger_error)


@dataclass(frozen=True)
class FluxComparison:
    """Realized relabeled-mass flux against the integrated immigration rate"""
    exit_flux: float
    exit_flux_stderr: float
    immigration: float
    immigration_stderr: float


def flux_comparison(trajectories: Sequence[LabeledTrajectory], dt: float) -> FluxComparison:
    """Mean relabeled mass per unit time against mean A-dot, over replicas"""
    exit_rates, immigration = [], []
    for traj in trajectories:
        steps = len(traj.exits)
        if steps == 0:
            continue
        exit_rates.append(sum(traj.exits) * traj.mass_unit / (steps * dt))
        immigration.append(float(np.mean(traj.a_dot[:steps])))
    flux, flux_se = mean_and_stderr(exit_rates)
    rate, rate_se = mean_and_stderr(immigration)
    return FluxComparison(flux, flux_se, rate, rate_se)


@dataclass
class IncrementScan:
    """Fourth moments of A-dot increments over lags s"""
    t: float
    s_values: List[float]
    fourth_moments: List[float]
    stderrs: List[float]
    fit: Optional[SlopeFit]

    def to_rows(self) -> List[dict]:
        return [
            {'t': self.t, 's': s, 'fourth_moment': m, 'stderr': e}
            for s, m, e in zip(self.s_values, self.fourth_moments, self.stderrs)
        ]


def _killed_a_dot_path(X0: ParticlePopulation, law: StableLaw, R: float, times: Sequence[float],
                       dt: float, rng: np.random.Generator, cap: Optional[int]) -> List[float]:
    """A-dot of the killed population V^R at the requested times"""
    current = X0.relabeled(LABEL_V)
    values = []
    clock = X0.time
    for target in times:
        while clock < target - 1e-12 and current.count:
            moved = move_particles(current, dt, law, rng)
            moved = moved.restrict(np.abs(moved.positions) < R)
            current = branch_particles(moved, dt, rng)
            if cap is not None and current.count > cap:
                raise PopulationCapError(current.count, cap)
            clock += dt
        values.append(immigration_rate(current, R, law))
    return values


def increment_moment_scan(X0: ParticlePopulation, law: StableLaw, R: float, s_values: Sequence[float],
                          n_replicas: int, dt: float, seed: int, t: float = 0.0,
                          cap: Optional[int] = None) -> IncrementScan:
    """Monte Carlo E[(A-dot_{t+s} - A-dot_t)^4] at each lag and its log-log slope in s"""
    if law.alpha >= 2.0 / 3.0:
        raise ParameterGateError(f"Increment scan needs alpha < 2/3, got {law.alpha}")
    lags = [float(s) for s in s_values]
    if t < 0 or any(s < 0 or t + s > 1.0 for s in lags):
        raise ParameterDomainError("Need 0 <= t and t + s <= 1 for every lag")
    check_branching_step(X0.mass_unit, dt)

    # every lag must sit on the step grid
    times = [t] + [t + s for s in lags]
    samples = np.zeros((n_replicas, len(lags)))
    for replica in range(n_replicas):
        rng = replica_stream(seed, replica)
        path = _killed_a_dot_path(X0, law, R, sorted(set(times)), dt, rng, cap)
        lookup = dict(zip(sorted(set(times)), path))
        samples[replica] = [(lookup[t + s] - lookup[t]) ** 4 for s in lags]

    means, errors = zip(*(mean_and_stderr(samples[:, j]) for j in range(len(lags))))
    positive = [(s, m) for s, m in zip(lags, means) if s > 0 and m > 0]
    fit = None
    if len(positive) >= 3:
        fit = loglog_slope([s for s, _ in positive], [m for _, m in positive])
        logger.info(f"Increment scan slope {fit.slope:.3f} (95% CI {fit.ci_low:.3f}..{fit.ci_high:.3f})")
    return IncrementScan(t, lags, list(means), list(errors), fit)


@dataclass
class ComparisonRun:
    """Euler paths of W(1) and Z-tilde driven by the same Gaussian increments"""
    dt: float
    a_dot_path: np.ndarray
    w_path: np.ndarray
    z_path: np.ndarray
    delta: float
    tau_index: int
    noise: np.ndarray

    @property
    def violations(self) -> np.ndarray:
        return np.maximum(self.w_path[:self.tau_index + 1] - self.z_path[:self.tau_index + 1], 0.0)

    @property
    def max_violation(self) -> float:
        return float(self.violations.max()) if self.violations.size else 0.0

    @property
    def first_violation(self) -> Optional[int]:
        hits = np.flatnonzero(self.violations > 0)
        return int(hits[0]) if hits.size else None

    def to_rows(self) -> List[dict]:
        flags = np.zeros(self.w_path.size, dtype=int)
        flags[:self.violations.size] = self.violations > 0
        a_dot = np.append(self.a_dot_path, np.nan)
        return [
            {'step': k, 'w': w, 'z': z, 'a_dot': a, 'violation_flag': int(f)}
            for k, (w, z, a, f) in enumerate(zip(self.w_path, self.z_path, a_dot, flags))
        ]


def _euler_sqrt(drift: np.ndarray, noise: np.ndarray, dt: float) -> np.ndarray:
    """x_{k+1} = max(x_k + sqrt(x_k+) dB_k + drift_k dt, 0) from x_0 = 0"""
    path = np.zeros(noise.size + 1)
    for k in range(noise.size):
        current = path[k]
        path[k + 1] = max(current + np.sqrt(max(current, 0.0)) * noise[k] + drift[k] * dt, 0.0)
    return path


def sde_comparison(a_dot_path: Sequence[float], delta: float, dt: float, seed: int,
                   noise: Optional[np.ndarray] = None) -> ComparisonRun:
    """Compare dW = sqrt(W) dB + A-dot dt with dZ = sqrt(Z) dB + delta dt under shared noise"""
    if not (0.0 < delta < 0.25):
        raise ParameterDomainError(f"delta must lie in (0, 1/4), got {delta}")
    drift = np.asarray(a_dot_path, dtype=float)
    if np.any(drift < 0):
        raise ParameterDomainError("Immigration path must be non-negative")
    if noise is None:
        noise = replica_stream(seed).standard_normal(drift.size) * np.sqrt(dt)

    w_path = _euler_sqrt(drift, noise, dt)
    z_path = _euler_sqrt(np.full(drift.size, delta), noise, dt)
    reached = np.flatnonzero(drift >= delta)
    tau_index = int(reached[0]) if reached.size else drift.size
    run = ComparisonRun(dt, drift, w_path, z_path, delta, tau_index, noise)
    if run.first_violation is not None:
        logger.debug(f"Comparison violated at step {run.first_violation}, max {run.max_violation:.3g}")
    return run


def comparison_refinement(a_dot_fn: Callable[[np.ndarray], np.ndarray], delta: float, T: float,
                          dts: Sequence[float], seed: int) -> List[ComparisonRun]:
    """Comparison runs on nested grids sharing one Brownian path

    Increments on a coarse grid are sums of the finest-grid increments.
    """
    finest = min(dts)
    n_fine = int(round(T / finest))
    fine_noise = replica_stream(seed).standard_normal(n_fine) * np.sqrt(finest)
    runs = []
    for dt in dts:
        block = int(round(dt / finest))
        if abs(block * finest - dt) > 1e-12 * dt:
            raise ParameterDomainError(f"Step {dt} is not a multiple of the finest step {finest}")
        noise = fine_noise[: (n_fine // block) * block].reshape(-1, block).sum(axis=1)
        times = np.arange(noise.size) * dt
        runs.append(sde_comparison(a_dot_fn(times), delta, dt, seed, noise=noise))
    return runs


@dataclass(frozen=True)
class CollapseInterval:
    """Grid interval on which W is extinct while X survives"""
    start: float
    end: float
    support_min: float
    support_max: float


def detect_support_collapse(traj: LabeledTrajectory) -> List[CollapseInterval]:
    """Maximal runs of recorded times with zero W particles and at least one particle"""
    intervals = []
    start = None
    low, high = np.inf, -np.inf
    for k, time in enumerate(traj.times):
        collapsed = traj.w_count[k] == 0 and (traj.v_count[k] + traj.w_count[k]) > 0
        if collapsed:
            if start is None:
                start, low, high = time, np.inf, -np.inf
            low = min(low, traj.support_min[k])
            high = max(high, traj.support_max[k])
            end = time
            continue
        if start is not None:
            intervals.append(CollapseInterval(start, end, low, high))
            start = None
    if start is not None:
        intervals.append(CollapseInterval(start, end, low, high))
    return intervals
