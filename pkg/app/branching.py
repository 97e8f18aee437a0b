"""
Branching particle approximation of the stable superprocess
Handles critical binary branching of 1/N-mass particles, the total-mass
Feller diffusion and its exact extinction law
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Iterator, List, Optional, Tuple

import numpy as np

from errors import ConfigError, ParameterDomainError, PopulationCapError
from stable_motion import StableLaw, sample_increment

logger = logging.getLogger(__name__)

LABEL_V = 0
LABEL_W = 1


@dataclass
class ParticlePopulation:
    """Empirical measure: equal-mass particles with lineage labels"""
    positions: np.ndarray
    labels: np.ndarray
    time: float
    mass_unit: float

    @classmethod
    def from_positions(cls, positions, mass_unit: float, time: float = 0.0) -> 'ParticlePopulation':
        positions = np.asarray(positions, dtype=float).ravel()
        return cls(positions, np.full(positions.size, LABEL_V, dtype=np.int8), float(time), float(mass_unit))

    @classmethod
    def empty(cls, mass_unit: float, time: float = 0.0) -> 'ParticlePopulation':
        return cls.from_positions(np.empty(0), mass_unit, time)

    @property
    def branching_rate(self) -> float:
        """Rate N of the binary branching, the inverse of the particle mass"""
        return 1.0 / self.mass_unit

    @property
    def count(self) -> int:
        return int(self.positions.size)

    @property
    def particles(self) -> Iterator[Tuple[float, float, int]]:
        """(position, mass, label) triples"""
        for position, label in zip(self.positions, self.labels):
            yield float(position), self.mass_unit, int(label)

    def total_mass(self) -> float:
        return self.count * self.mass_unit

    def labeled_mass(self, label: int) -> float:
        return int(np.count_nonzero(self.labels == label)) * self.mass_unit

    def support_extremes(self) -> Tuple[float, float]:
        """(min, max) of particle positions; NaN pair when empty"""
        if self.count == 0:
            return float('nan'), float('nan')
        return float(self.positions.min()), float(self.positions.max())

    def mass_in_ball(self, center: float, radius: float) -> float:
        return int(np.count_nonzero(np.abs(self.positions - center) < radius)) * self.mass_unit

    def restrict(self, mask: np.ndarray) -> 'ParticlePopulation':
        return ParticlePopulation(self.positions[mask].copy(), self.labels[mask].copy(), self.time, self.mass_unit)

    def translate(self, shift: float) -> 'ParticlePopulation':
        return ParticlePopulation(self.positions + shift, self.labels.copy(), self.time, self.mass_unit)

    def relabeled(self, label: int) -> 'ParticlePopulation':
        return ParticlePopulation(self.positions.copy(), np.full(self.count, label, dtype=np.int8),
                                  self.time, self.mass_unit)

    def at_time(self, time: float) -> 'ParticlePopulation':
        return ParticlePopulation(self.positions.copy(), self.labels.copy(), float(time), self.mass_unit)

    def integrate(self, phi: Callable[[np.ndarray], np.ndarray]) -> float:
        """<X, phi>"""
        if self.count == 0:
            return 0.0
        return float(np.sum(phi(self.positions)) * self.mass_unit)


def check_branching_step(mass_unit: float, dt: float) -> None:
    """Per-step death and split probabilities N dt / 2 must stay valid"""
    if dt <= 0:
        raise ParameterDomainError(f"Time step must be positive, got {dt}")
    if dt / mass_unit > 0.5:
        raise ConfigError(f"N*dt = {dt / mass_unit:.4g} exceeds 0.5; reduce dt or N")


def move_particles(pop: ParticlePopulation, dt: float, law: StableLaw,
                   rng: np.random.Generator) -> ParticlePopulation:
    """Independent exact stable increments over dt"""
    moved = pop.positions + sample_increment(law, dt, rng, pop.count) if pop.count else pop.positions.copy()
    return ParticlePopulation(moved, pop.labels.copy(), pop.time + dt, pop.mass_unit)


def draw_offspring(pop: ParticlePopulation, dt: float, rng: np.random.Generator) -> np.ndarray:
    """Offspring numbers 0, 1 or 2 per particle; 0 and 2 each with probability N dt / 2"""
    p = 0.5 * dt * pop.branching_rate
    u = rng.random(pop.count)
    offspring = np.ones(pop.count, dtype=np.int64)
    offspring[u < p] = 0
    offspring[u >= 1.0 - p] = 2
    return offspring


def apply_offspring(pop: ParticlePopulation, offspring: np.ndarray) -> ParticlePopulation:
    """Replace each particle by its offspring at the same position and label"""
    return ParticlePopulation(np.repeat(pop.positions, offspring), np.repeat(pop.labels, offspring),
                              pop.time, pop.mass_unit)


def branch_particles(pop: ParticlePopulation, dt: float, rng: np.random.Generator) -> ParticlePopulation:
    """Each particle dies or splits in two, each with probability N dt / 2"""
    if pop.count == 0:
        return pop
    return apply_offspring(pop, draw_offspring(pop, dt, rng))


def evolve_step(pop: ParticlePopulation, dt: float, law: StableLaw, rng: np.random.Generator,
                kill_radius: Optional[float] = None,
                cap: Optional[int] = None) -> Tuple[ParticlePopulation, np.ndarray]:
    """One move-kill-branch step; returns (population, positions of killed particles)"""
    check_branching_step(pop.mass_unit, dt)
    moved = move_particles(pop, dt, law, rng)
    exited = np.empty(0)
    if kill_radius is not None and moved.count:
        inside = np.abs(moved.positions) < kill_radius
        exited = moved.positions[~inside]
        moved = moved.restrict(inside)
    branched = branch_particles(moved, dt, rng)
    if cap is not None and branched.count > cap:
        raise PopulationCapError(branched.count, cap)
    return branched, exited


def evolve_population(pop: ParticlePopulation, dt: float, law: StableLaw, rng: np.random.Generator,
                      kill_radius: Optional[float] = None, cap: Optional[int] = None) -> ParticlePopulation:
    """Advance the population by one step of length dt"""
    evolved, _ = evolve_step(pop, dt, law, rng, kill_radius, cap)
    return evolved


def extinction_probability_formula(m0: float, t: float) -> float:
    """P(zeta > t) = 1 - exp(-2 m0 / t) for the Feller total-mass diffusion"""
    if t <= 0:
        raise ParameterDomainError(f"Time must be positive, got {t}")
    if m0 < 0:
        raise ParameterDomainError(f"Initial mass must be non-negative, got {m0}")
    return float(-np.expm1(-2.0 * m0 / t))


@dataclass
class FellerMassPath:
    """Total-mass trajectory absorbed at zero"""
    times: np.ndarray
    masses: np.ndarray
    extinction_time: Optional[float]


def _grid(T: float, dt: float) -> np.ndarray:
    if dt <= 0:
        raise ParameterDomainError(f"Time step must be positive, got {dt}")
    n_steps = int(np.ceil(T / dt - 1e-9))
    return np.arange(n_steps + 1) * (T / n_steps if n_steps else 0.0)


def _absorbed_path(times: np.ndarray, masses: np.ndarray) -> FellerMassPath:
    zeros = np.flatnonzero(masses <= 0.0)
    if zeros.size == 0:
        return FellerMassPath(times, masses, None)
    first = int(zeros[0])
    masses[first:] = 0.0
    return FellerMassPath(times, masses, float(times[first]))


def simulate_feller_mass(m0: float, T: float, dt: float, rng: np.random.Generator) -> FellerMassPath:
    """Euler-Maruyama for dM = sqrt(M+) dB with truncation at zero"""
    times = _grid(T, dt)
    masses = np.empty(times.size)
    masses[0] = m0
    noise = rng.standard_normal(times.size - 1) * np.sqrt(np.diff(times))
    for k in range(times.size - 1):
        current = masses[k]
        if current <= 0.0:
            masses[k + 1:] = 0.0
            break
        masses[k + 1] = max(current + np.sqrt(current) * noise[k], 0.0)
    return _absorbed_path(times, masses)


def simulate_feller_masses(m0: float, T: float, dt: float, n_paths: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Terminal masses of n_paths independent Euler paths"""
    times = _grid(T, dt)
    masses = np.full(n_paths, float(m0))
    for step in np.diff(times):
        alive = masses > 0.0
        if not alive.any():
            break
        masses[alive] = np.maximum(
            masses[alive] + np.sqrt(masses[alive] * step) * rng.standard_normal(int(alive.sum())), 0.0
        )
    return masses


def sample_feller_transition(m: np.ndarray, t: float, rng: np.random.Generator) -> np.ndarray:
    """Exact transition: Poisson(2m/t) many exponential clusters of mean t/2"""
    m = np.asarray(m, dtype=float)
    clusters = rng.poisson(2.0 * m / t)
    out = np.zeros(m.shape)
    positive = clusters > 0
    out[positive] = rng.gamma(clusters[positive], t / 2.0)
    return out


def simulate_feller_mass_exact(m0: float, T: float, dt: float, rng: np.random.Generator) -> FellerMassPath:
    """Skeleton of the Feller diffusion drawn from its exact transition law"""
    times = _grid(T, dt)
    masses = np.empty(times.size)
    masses[0] = m0
    for k, step in enumerate(np.diff(times)):
        masses[k + 1] = sample_feller_transition(np.array([masses[k]]), step, rng)[0] if masses[k] > 0 else 0.0
    return _absorbed_path(times, masses)


def split_initial(pop: ParticlePopulation, K: float) -> Tuple[ParticlePopulation, ParticlePopulation]:
    """Partition into |x| < K and |x| >= K"""
    if K <= 0:
        raise ParameterDomainError(f"Split radius must be positive, got {K}")
    inside = np.abs(pop.positions) < K
    return pop.restrict(inside), pop.restrict(~inside)


@dataclass
class PopulationTrajectory:
    """Recorded summary of one particle-system run"""
    times: List[float] = field(default_factory=list)
    masses: List[float] = field(default_factory=list)
    v_masses: List[float] = field(default_factory=list)
    w_masses: List[float] = field(default_factory=list)
    counts: List[int] = field(default_factory=list)
    support_min: List[float] = field(default_factory=list)
    support_max: List[float] = field(default_factory=list)
    snapshots: Deque[ParticlePopulation] = field(default_factory=deque)
    extinction_time: Optional[float] = None
    stopped_at: Optional[float] = None
    final: Optional[ParticlePopulation] = None

    def record(self, pop: ParticlePopulation) -> None:
        low, high = pop.support_extremes()
        self.times.append(pop.time)
        self.masses.append(pop.total_mass())
        self.v_masses.append(pop.labeled_mass(LABEL_V))
        self.w_masses.append(pop.labeled_mass(LABEL_W))
        self.counts.append(pop.count)
        self.support_min.append(low)
        self.support_max.append(high)
        if pop.count and self.snapshots.maxlen:
            self.snapshots.append(pop)

    def mass_at(self, t: float) -> float:
        """Total mass at the last recorded time <= t; zero after extinction"""
        if self.extinction_time is not None and t >= self.extinction_time:
            return 0.0
        index = int(np.searchsorted(self.times, t + 1e-12, side='right')) - 1
        return self.masses[max(index, 0)]

    def to_rows(self) -> List[dict]:
        return [
            {'time': t, 'total_mass': m, 'v_mass': v, 'w_mass': w, 'support_min': lo, 'support_max': hi,
             'particle_count': n}
            for t, m, v, w, lo, hi, n in zip(self.times, self.masses, self.v_masses, self.w_masses,
                                             self.support_min, self.support_max, self.counts)
        ]


def simulate_population(pop: ParticlePopulation, T: float, dt: float, law: StableLaw,
                        rng: np.random.Generator, kill_radius: Optional[float] = None,
                        cap: Optional[int] = None, keep_last: int = 0,
                        stop_when: Optional[Callable[[ParticlePopulation], bool]] = None) -> PopulationTrajectory:
    """Run the particle system on the grid k*dt up to T, extinction or stop_when"""
    check_branching_step(pop.mass_unit, dt)
    trajectory = PopulationTrajectory(snapshots=deque(maxlen=keep_last))
    n_steps = int(np.ceil((T - pop.time) / dt - 1e-9))
    current = pop
    trajectory.record(current)

    for _ in range(max(n_steps, 0)):
        if current.count == 0:
            break
        if stop_when is not None and stop_when(current):
            trajectory.stopped_at = current.time
            break
        current, _ = evolve_step(current, dt, law, rng, kill_radius, cap)
        trajectory.record(current)
        if current.count == 0:
            trajectory.extinction_time = current.time
            logger.debug(f"Population extinct at t={current.time:.4f}")

    if current.count == 0 and trajectory.extinction_time is None:
        trajectory.extinction_time = current.time
    if trajectory.stopped_at is None and stop_when is not None and current.count and stop_when(current):
        trajectory.stopped_at = current.time
    trajectory.final = current
    return trajectory
