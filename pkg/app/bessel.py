"""
Squared Bessel processes of dimension 4*delta < 1
Handles the entrance density from zero, the T0 first-passage law, the
zero-gap probability by three independent routes, the zero-gap bound
constant, Euler and exact simulation, and box counting of zero sets
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, special, stats

from bound_report import BoundReport
from errors import ParameterDomainError, ParameterGateError

logger = logging.getLogger(__name__)

ZERO_INTERVAL_COLUMNS = ['path', 'start', 'end']
DIMENSION_COLUMNS = ['window_start', 'window_end', 'scale', 'count', 'slope']

QUAD_TOL = dict(epsabs=1e-12, epsrel=1e-11, limit=200)


def _check_delta(delta: float) -> None:
    if not (0.0 < delta < 0.25):
        raise ParameterGateError(f"delta must lie in (0, 1/4), got {delta}")


def besq_c_delta(delta: float) -> float:
    """Normalization of the T0 density: 2^(2 delta - 1) / Gamma(1 - 2 delta)"""
    if not (0.0 < delta < 0.5):
        raise ParameterGateError(f"T0 law needs delta < 1/2, got {delta}")
    return float(2.0 ** (2.0 * delta - 1.0) / special.gamma(1.0 - 2.0 * delta))


@dataclass(frozen=True)
class BesqParams:
    """BESQ of dimension 4*delta started at `start`"""
    delta: float
    start: float = 0.0
    c_delta: float = field(init=False)

    def __post_init__(self):
        _check_delta(self.delta)
        if self.start < 0:
            raise ParameterDomainError(f"Start must be non-negative, got {self.start}")
        object.__setattr__(self, 'c_delta', besq_c_delta(self.delta))

    @property
    def dimension(self) -> float:
        return 4.0 * self.delta


def besq_density(delta: float, t: float, y):
    """q_t(0, y): Gamma density with shape 2*delta and scale 2t"""
    y = np.asarray(y, dtype=float)
    if t <= 0 or np.any(y <= 0):
        raise ParameterDomainError("besq_density needs t > 0 and y > 0")
    value = stats.gamma.pdf(y, 2.0 * delta, scale=2.0 * t)
    return float(value) if value.ndim == 0 else value


def t0_survival(delta: float, y: float, tau: float) -> float:
    """P_y(T0 > tau) by quadrature of the T0 density"""
    c = besq_c_delta(delta)
    if y <= 0:
        raise ParameterDomainError(f"Start must be positive, got {y}")
    if tau < 0:
        raise ParameterDomainError(f"Horizon must be non-negative, got {tau}")

    def density(s):
        return c * y ** (1.0 - 2.0 * delta) * s ** (2.0 * delta - 2.0) * np.exp(-y / (2.0 * s))

    # the density peaks near s ~ y; split there so quad sees the bump
    split = max(tau, y)
    head = integrate.quad(density, tau, split, **QUAD_TOL)[0] if split > tau else 0.0
    tail = integrate.quad(density, split, np.inf, **QUAD_TOL)[0]
    return float(min(max(head + tail, 0.0), 1.0))


def t0_survival_closed_form(delta: float, y: float, tau: float) -> float:
    """P_y(T0 > tau) = P(1 - 2 delta, y / (2 tau)), regularized lower incomplete gamma"""
    besq_c_delta(delta)
    if y <= 0 or tau < 0:
        raise ParameterDomainError("t0_survival_closed_form needs y > 0 and tau >= 0")
    if tau == 0:
        return 1.0
    return float(special.gammainc(1.0 - 2.0 * delta, y / (2.0 * tau)))


def zero_gap_nested(a: float, b: float, delta: float) -> float:
    """E_0[P_{Z_a}(T0 > b - a)] with the inner survival computed by its own quadrature"""
    gap = b - a
    shape = 2.0 * delta

    # y = 2a v turns q_a(0, .) into the Gamma(2 delta, 1) density in v
    def smooth_part(v):
        if v <= 0.0:
            return 0.0
        return t0_survival(delta, 2.0 * a * v, gap) * np.exp(-v) / special.gamma(shape)

    head = integrate.quad(smooth_part, 0.0, 1.0, weight='alg', wvar=(shape - 1.0, 0.0), **QUAD_TOL)[0]
    tail = integrate.quad(lambda v: smooth_part(v) * v ** (shape - 1.0), 1.0, np.inf, **QUAD_TOL)[0]
    return float(head + tail)


def zero_gap_reduced(a: float, b: float, delta: float) -> float:
    """Single integral left after integrating out Z_a analytically

    The remaining integral over s in (b - a, inf) of s^(2 delta - 1) 2a/(s + a)
    is taken in u = 1/s, where it has an integrable u^(-2 delta) endpoint.
    """
    c = besq_c_delta(delta)
    prefactor = c * (2.0 * a) ** (-2.0 * delta) / special.gamma(2.0 * delta)
    value = integrate.quad(lambda u: 2.0 * a / (1.0 + a * u), 0.0, 1.0 / (b - a),
                           weight='alg', wvar=(-2.0 * delta, 0.0), **QUAD_TOL)[0]
    return float(prefactor * value)


def zero_gap_probability_beta(a: float, b: float, delta: float) -> float:
    """Closed form: Beta(1 - 2 delta, 2 delta) distribution function at a/b"""
    _check_gap(a, b)
    return float(stats.beta.cdf(a / b, 1.0 - 2.0 * delta, 2.0 * delta))


def _check_gap(a: float, b: float) -> None:
    if not (0.0 < a < b):
        raise ParameterDomainError(f"Need 0 < a < b, got a={a}, b={b}")


def zero_gap_probability(a: float, b: float, delta: float, cross_check: bool = True,
                         tolerance: float = 1e-6) -> float:
    """P_0(no zero of BESQ(4 delta) in (a, b))

    Returns the reduced quadrature; with cross_check the nested quadrature is
    computed too and a disagreement above `tolerance` is logged.
    """
    _check_gap(a, b)
    _check_delta(delta)
    reduced = zero_gap_reduced(a, b, delta)
    if cross_check:
        nested = zero_gap_nested(a, b, delta)
        if abs(nested - reduced) > tolerance:
            logger.warning(f"Zero-gap quadratures disagree at a={a}, b={b}, delta={delta}: "
                           f"nested={nested:.10g} reduced={reduced:.10g}")
    return float(min(max(reduced, 0.0), 1.0))


def lemma23_limit_constant(delta: float) -> float:
    """Limit of I * ((b - a)/a)^(1 - 2 delta) as (b - a)/a grows: sin(2 pi delta) / (pi (1 - 2 delta))"""
    _check_delta(delta)
    return float(np.sin(2.0 * np.pi * delta) / (np.pi * (1.0 - 2.0 * delta)))


def _bound_ratio(a: float, b: float, delta: float) -> float:
    return zero_gap_probability(a, b, delta, cross_check=False) * a ** (2.0 * delta - 1.0) \
        * (b - a) ** (1.0 - 2.0 * delta)


def lemma23_bound_check(delta: float, a_range: Tuple[float, float] = (0.1, 1.0),
                        gap_range: Tuple[float, float] = (0.01, 1.0), levels: int = 3,
                        points: int = 5) -> BoundReport:
    """Fitted C in P(no zero in (a, b)) <= C a^(1 - 2 delta) (b - a)^(2 delta - 1)

    Level l uses points * 2^l log-spaced values of a and of b - a over the
    given ranges; the report trace is the sup ratio per level.
    """
    _check_delta(delta)
    report = BoundReport(lemma_id='lemma23_zero_gap', alpha=float('nan'), R=float('nan'), gamma=delta)
    best = (float('nan'), float('nan'))
    for level in range(levels):
        count = points * 2 ** level
        a_values = np.geomspace(a_range[0], a_range[1], count)
        gaps = np.geomspace(gap_range[0], gap_range[1], count)
        sup = 0.0
        for a in a_values:
            for gap in gaps:
                ratio = _bound_ratio(float(a), float(a + gap), delta)
                if ratio > sup:
                    sup, best = ratio, (float(a), float(a + gap))
        report.refinement_trace.append(sup)

    report.details['argmax'] = best
    report.details['limit_constant'] = lemma23_limit_constant(delta)
    if not report.is_stable():
        report.flag('unstable')
    logger.info(f"Zero-gap constant for delta={delta}: {report.sup_ratio:.6g} "
                f"(limit {report.details['limit_constant']:.6g})")
    return report


@dataclass
class BesqPath:
    times: np.ndarray
    values: np.ndarray


@dataclass
class ZeroSet:
    """Grid zero set of one path; intervals are closed [start, end] runs of zero states"""
    dt: float
    intervals: List[Tuple[float, float]]
    zero_flags: Optional[np.ndarray] = None

    def hits(self, a: float, b: float) -> bool:
        """Whether some zero lies in the open interval (a, b)"""
        return any(start < b and end > a for start, end in self.intervals)

    def to_rows(self, path: int = 0) -> List[dict]:
        return [{'path': path, 'start': start, 'end': end} for start, end in self.intervals]


def _zero_runs(flags: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Start and end indices of maximal True runs"""
    padded = np.concatenate(([False], flags, [False])).astype(np.int8)
    edges = np.diff(padded)
    return np.flatnonzero(edges == 1), np.flatnonzero(edges == -1) - 1


def _euler_besq_step(z: np.ndarray, noise: np.ndarray, delta: float, dt: float) -> np.ndarray:
    return np.maximum(z + 2.0 * np.sqrt(np.maximum(z, 0.0)) * noise + 4.0 * delta * dt, 0.0)


def simulate_besq(delta: float, T: float, dt: float, rng: np.random.Generator,
                  start: float = 0.0) -> Tuple[BesqPath, ZeroSet]:
    """Euler path of dZ = 2 sqrt(Z+) dB + 4 delta dt truncated at zero"""
    _check_delta(delta)
    if dt <= 0:
        raise ParameterDomainError(f"Time step must be positive, got {dt}")
    n_steps = int(np.ceil(T / dt - 1e-9))
    noise = rng.standard_normal(n_steps) * np.sqrt(dt)
    values = np.empty(n_steps + 1)
    values[0] = start
    z = np.array([float(start)])
    for k in range(n_steps):
        z = _euler_besq_step(z, noise[k:k + 1], delta, dt)
        values[k + 1] = z[0]

    times = np.arange(n_steps + 1) * dt
    flags = values[1:] <= 0.0
    starts, ends = _zero_runs(flags)
    intervals = [(float(times[s + 1]), float(times[e + 1])) for s, e in zip(starts, ends)]
    return BesqPath(times, values), ZeroSet(dt, intervals, flags)


def simulate_besq_zero_sets(delta: float, T: float, dt: float, n_paths: int,
                            rng: np.random.Generator, chunk: int = 50_000) -> Tuple[np.ndarray, List[ZeroSet]]:
    """Many Euler paths stepped together; keeps terminal values and zero intervals only"""
    _check_delta(delta)
    if dt <= 0:
        raise ParameterDomainError(f"Time step must be positive, got {dt}")
    n_steps = int(np.ceil(T / dt - 1e-9))
    z = np.zeros(n_paths)
    runs: List[List[List[int]]] = [[] for _ in range(n_paths)]

    for offset in range(0, n_steps, chunk):
        width = min(chunk, n_steps - offset)
        noise = rng.standard_normal((width, n_paths)) * np.sqrt(dt)
        flags = np.empty((width, n_paths), dtype=bool)
        for k in range(width):
            z = _euler_besq_step(z, noise[k], delta, dt)
            flags[k] = z <= 0.0
        for path in range(n_paths):
            starts, ends = _zero_runs(flags[:, path])
            for s, e in zip(starts + offset, ends + offset):
                previous = runs[path][-1] if runs[path] else None
                # runs touching across a chunk boundary are one run
                if previous is not None and previous[1] == s - 1:
                    previous[1] = int(e)
                else:
                    runs[path].append([int(s), int(e)])

    zero_sets = [
        ZeroSet(dt, [((s + 1) * dt, (e + 1) * dt) for s, e in path_runs])
        for path_runs in runs
    ]
    return z, zero_sets


def sample_besq_transition(x: np.ndarray, t: float, delta: float, rng: np.random.Generator) -> np.ndarray:
    """Exact BESQ(4 delta) transition: Gamma(2 delta + Poisson(x / 2t), scale 2t)"""
    x = np.asarray(x, dtype=float)
    shape = 2.0 * delta + rng.poisson(x / (2.0 * t))
    return rng.gamma(shape, 2.0 * t)


def simulate_besq_exact(delta: float, T: float, dt: float, rng: np.random.Generator,
                        start: float = 0.0) -> BesqPath:
    """Skeleton from the exact transition; never exactly zero, so not for zero detection"""
    _check_delta(delta)
    n_steps = int(np.ceil(T / dt - 1e-9))
    values = np.empty(n_steps + 1)
    values[0] = start
    for k in range(n_steps):
        values[k + 1] = sample_besq_transition(np.array([values[k]]), dt, delta, rng)[0]
    return BesqPath(np.arange(n_steps + 1) * dt, values)


@dataclass
class DimensionEstimate:
    """Box-counting slope over a window"""
    window: Tuple[float, float]
    scales: List[float]
    counts: List[int]
    slope: float
    intercept: float
    reliable: bool

    def to_rows(self) -> List[dict]:
        return [
            {'window_start': self.window[0], 'window_end': self.window[1], 'scale': s, 'count': c,
             'slope': self.slope}
            for s, c in zip(self.scales, self.counts)
        ]


def _occupied_boxes(intervals: Sequence[Tuple[float, float]], window: Tuple[float, float], scale: float) -> int:
    low, high = window
    n_boxes = int(np.ceil((high - low) / scale - 1e-9))
    clipped = [(max(s, low), min(e, high)) for s, e in intervals if e >= low and s <= high]
    if not clipped:
        return 0
    starts = np.array([s for s, _ in clipped])
    ends = np.array([e for _, e in clipped])
    first = np.clip(np.floor((starts - low) / scale).astype(np.int64), 0, n_boxes - 1)
    last = np.clip(np.floor((ends - low) / scale).astype(np.int64), 0, n_boxes - 1)
    marks = np.zeros(n_boxes + 1, dtype=np.int64)
    np.add.at(marks, first, 1)
    np.add.at(marks, last + 1, -1)
    return int(np.count_nonzero(np.cumsum(marks[:-1]) > 0))


def box_count_dimension(intervals: Sequence[Tuple[float, float]], window: Tuple[float, float],
                        scales: Sequence[float], min_boxes: int = 10) -> DimensionEstimate:
    """Slope of log(occupied boxes) against log(1/scale) for a union of closed intervals"""
    scales = sorted(float(s) for s in scales)
    if len(scales) < 4:
        raise ValueError(f"Need at least 4 scales, got {len(scales)}")
    if scales[-1] / scales[0] < 100.0:
        raise ValueError("Scales must span at least two decades")
    if not window[0] < window[1]:
        raise ParameterDomainError(f"Empty window {window}")

    counts = [_occupied_boxes(intervals, window, s) for s in scales]
    occupied = [(s, c) for s, c in zip(scales, counts) if c > 0]
    if len(occupied) < 2:
        logger.warning(f"Too few occupied boxes in window {window}; no dimension estimate")
        return DimensionEstimate(tuple(window), scales, counts, float('nan'), float('nan'), False)

    log_inverse = np.log([1.0 / s for s, _ in occupied])
    log_counts = np.log([c for _, c in occupied])
    slope, intercept = np.polyfit(log_inverse, log_counts, 1)
    reliable = len(occupied) == len(scales) and max(counts) >= min_boxes
    if not reliable:
        logger.warning(f"Box count in window {window} is unreliable (max count {max(counts)})")
    return DimensionEstimate(tuple(window), scales, counts, float(slope), float(intercept), reliable)


def box_dimension(zeros: ZeroSet, window: Tuple[float, float], scales: Sequence[float]) -> DimensionEstimate:
    return box_count_dimension(zeros.intervals, window, scales)
