"""
Monte Carlo harness for the superprocess lab
Handles seeded per-replica streams, replica fan-out and summary statistics
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Sequence, TypeVar

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

T = TypeVar('T')


def replica_stream(seed: int, replica: int = 0) -> np.random.Generator:
    """Counter-based stream for one replica, independent of execution order"""
    sequence = np.random.SeedSequence(int(seed), spawn_key=(int(replica),))
    return np.random.Generator(np.random.Philox(sequence))


class ReplicaRunner:
    """Runs independent replicas, optionally on worker threads"""

    def __init__(self, seed: int, threads: int = 1):
        self.logger = logging.getLogger(__name__)
        self.seed = int(seed)
        self.threads = max(1, int(threads))

    def run(self, task: Callable[[int, np.random.Generator], T], n_replicas: int) -> List[T]:
        """Run task(replica_id, rng) for every replica; results ordered by replica id"""
        ids = list(range(int(n_replicas)))
        self.logger.debug(f"Running {len(ids)} replicas on {self.threads} thread(s)")

        def call(replica: int) -> T:
            return task(replica, replica_stream(self.seed, replica))

        if self.threads == 1:
            return [call(i) for i in ids]

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(call, ids))

    def spawn_keys(self, n_replicas: int) -> List[List[int]]:
        """Spawn keys recorded in the run manifest"""
        return [[i] for i in range(int(n_replicas))]


def mean_and_stderr(samples: Sequence[float]) -> tuple:
    """Sample mean and its standard error"""
    values = np.asarray(samples, dtype=float)
    if values.size == 0:
        return float('nan'), float('nan')
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def proportion_and_stderr(flags: Sequence[bool]) -> tuple:
    """Empirical frequency of an event and its binomial standard error"""
    values = np.asarray(flags, dtype=bool)
    if values.size == 0:
        return float('nan'), float('nan')
    p = float(values.mean())
    return p, float(np.sqrt(p * (1.0 - p) / values.size))


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares slope of log(y) against log(x) with a 95% confidence band"""
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    n_points: int


def loglog_slope(x: Sequence[float], y: Sequence[float], level: float = 0.95) -> SlopeFit:
    """Fit log(y) = intercept + slope*log(x), skipping non-positive points"""
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    keep = (xs > 0) & (ys > 0) & np.isfinite(xs) & np.isfinite(ys)
    xs, ys = np.log(xs[keep]), np.log(ys[keep])
    if xs.size < 3:
        raise ValueError(f"Need at least 3 positive points for a log-log fit, got {xs.size}")

    fit = stats.linregress(xs, ys)
    quantile = stats.t.ppf(0.5 + level / 2.0, xs.size - 2)
    half_width = quantile * fit.stderr
    return SlopeFit(
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        ci_low=float(fit.slope - half_width),
        ci_high=float(fit.slope + half_width),
        n_points=int(xs.size),
    )


@dataclass(frozen=True)
class TwoSampleResult:
    """Outcome of a two-sample distribution test"""
    statistic: float
    p_value: float
    level: float

    @property
    def passed(self) -> bool:
        return self.p_value >= self.level


def two_sample_test(first: Sequence[float], second: Sequence[float], level: float = 0.01) -> TwoSampleResult:
    """Kolmogorov-Smirnov two-sample test"""
    result = stats.ks_2samp(np.asarray(first, dtype=float), np.asarray(second, dtype=float))
    return TwoSampleResult(statistic=float(result.statistic), p_value=float(result.pvalue), level=level)
