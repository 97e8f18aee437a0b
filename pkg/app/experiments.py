"""
Experiment pipelines for exceptional times of the stable superprocess
Handles initial-mass splitting, exceptional-time detection before
extinction, extinction-point estimation, the tau-epsilon stopping rule
and near-extinction support collapse
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from bessel import DimensionEstimate, box_count_dimension
from branching import ParticlePopulation, PopulationTrajectory, simulate_population, split_initial
from config_manager import ExperimentConfig, gates_for
from decomposition import CollapseInterval, LabeledTrajectory, coupled_simulate, detect_support_collapse
from errors import ParameterDomainError, ParameterGateError
from monte_carlo import ReplicaRunner, proportion_and_stderr

logger = logging.getLogger(__name__)

RUN_RECORD_COLUMNS = [
    'replica', 'included', 'zeta_inner', 'zeta_outer', 'window_low', 'window_high', 'split_event',
    'detected', 'n_collapse', 'f_hat', 'concentration', 'tau_time', 'tau_center', 'mass_at_tau', 'flags',
]
SUMMARY_COLUMNS = [
    'pipeline', 'epsilon', 'n_replicas', 'n_included', 'n_excluded', 'split_frequency', 'split_stderr',
    'split_bound', 'detection_fraction', 'detection_stderr',
]

Trajectory = Union[PopulationTrajectory, LabeledTrajectory]


def initial_population(config: ExperimentConfig) -> ParticlePopulation:
    """N particles of mass 1/N, so X_0(1) = 1"""
    n, width = config.N, config.layout_width
    if config.layout == 'point':
        positions = np.zeros(n)
    elif config.layout == 'uniform':
        positions = np.linspace(-width, width, n)
    elif config.layout == 'outlier':
        positions = np.zeros(n)
        positions[-1] = width
    else:
        raise ParameterDomainError(f"Unknown layout '{config.layout}'")
    return ParticlePopulation.from_positions(positions, config.mass_unit)


def choose_K(positions: Sequence[float], masses: Sequence[float], epsilon: float, pitch: float = 1.0) -> float:
    """Smallest K in pitch * {1, 2, ...} with X_0(|x| >= K) < epsilon^3 / 2"""
    distances = np.abs(np.asarray(positions, dtype=float))
    masses = np.asarray(masses, dtype=float)
    threshold = epsilon ** 3 / 2.0
    K = pitch
    while masses[distances >= K].sum() >= threshold:
        K += pitch
    return K


@dataclass
class FEstimate:
    """Extinction-point estimate and concentration diagnostic"""
    f_hat: float
    concentration: float
    extinct: bool


def estimate_F(traj: Trajectory, r: float, k: Optional[int] = None) -> FEstimate:
    """Mass-weighted centroid of the last k recorded nonempty populations

    The concentration is X_t(B(F, r)) / X_t(1) at the last recorded nonempty time.
    """
    snapshots = list(traj.snapshots)
    if not snapshots:
        return FEstimate(float('nan'), float('nan'), traj.extinction_time is not None)
    if k is not None:
        snapshots = snapshots[-k:]
    positions = np.concatenate([pop.positions for pop in snapshots])
    f_hat = float(positions.mean())
    last = snapshots[-1]
    concentration = last.mass_in_ball(f_hat, r) / last.total_mass()
    return FEstimate(f_hat, float(concentration), traj.extinction_time is not None)


def phi_test_function(center: float, r: float) -> Callable[[np.ndarray], np.ndarray]:
    """0 on B(center, r/4), 1 off B(center, r/2), linear in between"""
    quarter = r / 4.0

    def phi(x):
        distance = np.abs(np.asarray(x, dtype=float) - center)
        return np.clip((distance - quarter) / quarter, 0.0, 1.0)

    return phi


def centers_lattice(half_width: float, r: float) -> np.ndarray:
    """Centers of pitch r/4 covering [-half_width, half_width]"""
    pitch = r / 4.0
    count = int(np.ceil(half_width / pitch))
    return np.arange(-count, count + 1) * pitch


@dataclass(frozen=True)
class TauResult:
    time: float
    center_index: int
    ratio: float
    mass: float


def tau_check(pop: ParticlePopulation, epsilon: float, r: float, centers: np.ndarray) -> Optional[TauResult]:
    """Stopping condition at one time: 0 < X(1) <= eps and some X(phi_k)/X(1) <= eps^3"""
    mass = pop.total_mass()
    if not (0.0 < mass <= epsilon):
        return None
    quarter = r / 4.0
    distance = np.abs(pop.positions[:, None] - centers[None, :])
    ratios = np.clip((distance - quarter) / quarter, 0.0, 1.0).mean(axis=0)
    qualifying = np.flatnonzero(ratios <= epsilon ** 3)
    if qualifying.size == 0:
        return None
    index = int(qualifying[0])
    return TauResult(pop.time, index, float(ratios[index]), mass)


def tau_epsilon(populations: Sequence[ParticlePopulation], epsilon: float, r: float,
                centers: np.ndarray) -> Optional[TauResult]:
    """First recorded population meeting the stopping condition, smallest center index"""
    for pop in populations:
        result = tau_check(pop, epsilon, r, centers)
        if result is not None:
            return result
    return None


@dataclass
class RunRecord:
    """Per-replica outcome of an exceptional-time pipeline"""
    replica: int
    zeta_inner: Optional[float] = None
    zeta_outer: Optional[float] = None
    window: Tuple[float, float] = (float('nan'), float('nan'))
    split_event: bool = False
    detected: bool = False
    collapse_intervals: List[CollapseInterval] = field(default_factory=list)
    detected_intervals: List[Tuple[float, float]] = field(default_factory=list)
    f_hat: float = float('nan')
    concentration: float = float('nan')
    tau: Optional[TauResult] = None
    flags: List[str] = field(default_factory=list)

    @property
    def included(self) -> bool:
        return not any(flag.startswith('gate:') for flag in self.flags)

    def to_row(self) -> dict:
        def opt(value):
            return float('nan') if value is None else value

        return {
            'replica': self.replica,
            'included': int(self.included),
            'zeta_inner': opt(self.zeta_inner),
            'zeta_outer': opt(self.zeta_outer),
            'window_low': self.window[0],
            'window_high': self.window[1],
            'split_event': int(self.split_event),
            'detected': int(self.detected),
            'n_collapse': len(self.collapse_intervals),
            'f_hat': self.f_hat,
            'concentration': self.concentration,
            'tau_time': opt(self.tau.time if self.tau else None),
            'tau_center': -1 if self.tau is None else self.tau.center_index,
            'mass_at_tau': opt(self.tau.mass if self.tau else None),
            'flags': ';'.join(self.flags),
        }


def _window_event(zeta_outer: Optional[float], zeta_inner: Optional[float], low: float, high: float) -> bool:
    """zeta_outer <= low < high < zeta_inner; None means alive at the horizon"""
    outer_dead = zeta_outer is not None and zeta_outer <= low
    inner_alive = zeta_inner is None or zeta_inner > high
    return outer_dead and inner_alive


def _detections(intervals: Sequence[CollapseInterval], low: float, high: float,
                outer_death: Optional[float]) -> List[Tuple[float, float]]:
    """Parts of collapse intervals inside (low, high) after the outer part died"""
    if outer_death is None:
        return []
    found = []
    for interval in intervals:
        start = max(interval.start, low, outer_death)
        end = min(interval.end, high)
        if start <= end and start < high and end > low:
            found.append((start, end))
    return found


@dataclass
class PipelineSummary:
    pipeline: str
    epsilon: float
    n_replicas: int
    n_included: int
    split_frequency: float
    split_stderr: float
    split_bound: float
    detection_fraction: float
    detection_stderr: float

    @property
    def n_excluded(self) -> int:
        return self.n_replicas - self.n_included

    def to_row(self) -> dict:
        return {
            'pipeline': self.pipeline,
            'epsilon': self.epsilon,
            'n_replicas': self.n_replicas,
            'n_included': self.n_included,
            'n_excluded': self.n_excluded,
            'split_frequency': self.split_frequency,
            'split_stderr': self.split_stderr,
            'split_bound': self.split_bound,
            'detection_fraction': self.detection_fraction,
            'detection_stderr': self.detection_stderr,
        }


def _summarize(pipeline: str, config: ExperimentConfig, records: List[RunRecord], bound: float) -> PipelineSummary:
    included = [record for record in records if record.included]
    excluded = len(records) - len(included)
    if excluded:
        logger.warning(f"{pipeline}: {excluded} of {len(records)} replicas excluded by gates")
    split, split_se = proportion_and_stderr([record.split_event for record in included])
    detection, detection_se = proportion_and_stderr([record.detected for record in included])
    summary = PipelineSummary(pipeline, config.epsilon, len(records), len(included),
                              split, split_se, bound, detection, detection_se)
    logger.info(f"{pipeline} eps={config.epsilon}: split frequency {split:.4f} +- {split_se:.4f} "
                f"(bound {bound:.4f}), detection fraction {detection:.4f}")
    return summary


def _resolve_K(config: ExperimentConfig, X0: ParticlePopulation) -> float:
    masses = np.full(X0.count, X0.mass_unit)
    K = config.K if config.K > 0 else choose_K(X0.positions, masses, config.epsilon)
    outside = float(masses[np.abs(X0.positions) >= K].sum())
    if outside >= config.epsilon ** 3 / 2.0:
        raise ParameterGateError(f"X_0(|x| >= {K}) = {outside:.3g} is not below epsilon^3/2")
    if not config.R > 2 * K + 1:
        raise ParameterGateError(f"Need R > 2K + 1, got R={config.R}, K={K}")
    return K


def run_theorem11(config: ExperimentConfig,
                  runner: Optional[ReplicaRunner] = None) -> Tuple[List[RunRecord], PipelineSummary]:
    """Exceptional-time proxy in (eps^2, eps) for a unit-mass initial condition

    Each replica splits X_0 at |x| = K, runs the coupled V/W system from
    the inner part with radius R and the plain system from the outer part.
    """
    gates_for(config, 'exceptional-times')
    law = config.law
    X0 = initial_population(config)
    K = _resolve_K(config, X0)
    inner, outer = split_initial(X0, K)
    low, high = config.epsilon ** 2, config.epsilon
    logger.info(f"Exceptional-time pipeline: K={K}, inner mass {inner.total_mass():.4f}, "
                f"outer mass {outer.total_mass():.4g}")

    def replica(replica_id: int, rng: np.random.Generator) -> RunRecord:
        coupled = coupled_simulate(inner, law, config.R, config.T, config.dt, rng, config.cap,
                                   keep_last=config.keep_last)
        plain = simulate_population(outer, config.T, config.dt, law, rng, cap=config.cap)
        record = RunRecord(replica_id, coupled.extinction_time, plain.extinction_time, (low, high))
        record.split_event = _window_event(record.zeta_outer, record.zeta_inner, low, high)
        record.collapse_intervals = detect_support_collapse(coupled)
        record.detected_intervals = _detections(record.collapse_intervals, low, high, record.zeta_outer)
        record.detected = bool(record.detected_intervals)
        if record.zeta_inner is None:
            record.flags.append('inner_survived_horizon')
        estimate = estimate_F(coupled, config.r)
        record.f_hat, record.concentration = estimate.f_hat, estimate.concentration
        return record

    runner = runner or ReplicaRunner(config.seed, config.threads)
    records = runner.run(replica, config.n_replicas)
    return records, _summarize('exceptional-times', config, records, 1.0 - 2.0 * config.epsilon)


def run_theorem12(config: ExperimentConfig,
                  runner: Optional[ReplicaRunner] = None) -> Tuple[List[RunRecord], PipelineSummary]:
    """Support collapse just before extinction, restarted at tau_epsilon

    Times in each record are measured from tau_epsilon; the detection
    window is (eps^2 mu(1), eps mu(1)) with mu the population at tau_epsilon.
    """
    gates_for(config, 'near-extinction')
    law = config.law
    X0 = initial_population(config)
    centers = centers_lattice(config.lattice_half_width, config.r)
    eps, r = config.epsilon, config.r

    def replica(replica_id: int, rng: np.random.Generator) -> RunRecord:
        record = RunRecord(replica_id)
        before = simulate_population(
            X0, config.T, config.dt, law, rng, cap=config.cap,
            stop_when=lambda pop: tau_check(pop, eps, r, centers) is not None,
        )
        if before.stopped_at is None:
            record.flags.append('gate:tau_not_reached')
            return record

        mu = before.final
        record.tau = tau_check(mu, eps, r, centers)
        shift = float(centers[record.tau.center_index])
        restarted = mu.translate(-shift).at_time(0.0)
        inner, outer = split_initial(restarted, r / 2.0)
        m = mu.total_mass()
        if outer.total_mass() > m * eps ** 3 + 1e-15:
            record.flags.append('gate:outer_mass')
        if inner.total_mass() < m / 2.0:
            record.flags.append('gate:inner_mass')
        if not record.included:
            logger.warning(f"Replica {replica_id} failed the split gates at tau_epsilon")
            return record

        coupled = coupled_simulate(inner, law, r, config.T, config.dt, rng, config.cap,
                                   keep_last=config.keep_last)
        plain = simulate_population(outer, config.T, config.dt, law, rng, cap=config.cap)
        low, high = eps ** 2 * m, eps * m
        record.zeta_inner, record.zeta_outer = coupled.extinction_time, plain.extinction_time
        record.window = (low, high)
        record.split_event = _window_event(record.zeta_outer, record.zeta_inner, low, high)
        record.collapse_intervals = detect_support_collapse(coupled)
        record.detected_intervals = _detections(record.collapse_intervals, low, high, record.zeta_outer)
        record.detected = bool(record.detected_intervals)

        estimate = estimate_F(coupled, r)
        record.f_hat, record.concentration = estimate.f_hat + shift, estimate.concentration
        for interval in record.collapse_intervals:
            inside = any(interval.start <= end and interval.end >= start
                         for start, end in record.detected_intervals)
            if inside and (interval.support_min < estimate.f_hat - 3 * r
                           or interval.support_max > estimate.f_hat + 3 * r):
                record.flags.append('support_outside_3r')
                break
        return record

    runner = runner or ReplicaRunner(config.seed, config.threads)
    records = runner.run(replica, config.n_replicas)
    return records, _summarize('near-extinction', config, records, 1.0 - 3.0 * eps)


def dimension_of_detected_set(records: Sequence[RunRecord], scales: Sequence[float],
                              min_records: int = 100) -> DimensionEstimate:
    """Box-counting slope of the pooled detected collapse times

    Each record's detected times are divided by its window scale, mu(1) for
    near-extinction records, so all windows become (eps^2, eps).
    """
    if len(records) < min_records:
        raise ValueError(f"Need at least {min_records} records, got {len(records)}")
    pooled = []
    window = None
    for record in records:
        if not record.included or not np.isfinite(record.window[0]):
            continue
        scale = record.tau.mass if record.tau is not None else 1.0
        window = (record.window[0] / scale, record.window[1] / scale)
        pooled.extend((start / scale, end / scale) for start, end in record.detected_intervals)
    if window is None or not pooled:
        logger.warning("No detected collapse times; dimension estimate flagged")
        window = window or (0.0, 1.0)
        return DimensionEstimate(window, sorted(scales), [0] * len(scales), float('nan'), float('nan'), False)
    return box_count_dimension(pooled, window, scales)


def sweep_epsilon(config: ExperimentConfig, epsilons: Sequence[float],
                  pipeline: Callable[..., Tuple[List[RunRecord], PipelineSummary]],
                  runner: Optional[ReplicaRunner] = None) -> Dict[float, PipelineSummary]:
    """Pipeline summary per epsilon, same seed for each"""
    summaries = {}
    for epsilon in epsilons:
        _, summary = pipeline(config.replace(epsilon=float(epsilon)), runner)
        summaries[float(epsilon)] = summary
    return summaries
