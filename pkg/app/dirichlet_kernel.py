"""
Boundary flux, fractional Laplacian and Dirichlet heat-kernel bound checks
Handles f_R, the principal-value operator, the comparability envelope kappa
and the numerical verification of the kernel integral bounds
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate

from bound_report import BoundReport, classify_divergence
from errors import ParameterDomainError
from monte_carlo import mean_and_stderr
from stable_motion import StableLaw, sample_killed_endpoints

logger = logging.getLogger(__name__)

GAUSS_ORDER = 8
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(GAUSS_ORDER)


def f_R(x, R: float, law: StableLaw):
    """Rate (c_alpha/alpha)((R-x)^-alpha + (R+x)^-alpha) of jumping out of (-R, R)"""
    xs = np.asarray(x, dtype=float)
    if np.any(np.abs(xs) >= R):
        raise ParameterDomainError(f"f_R diverges on |x| >= R={R}")
    value = law.c_alpha / law.alpha * ((R - xs) ** (-law.alpha) + (R + xs) ** (-law.alpha))
    return float(value) if value.ndim == 0 else value


def flux_by_quadrature(x: float, R: float, law: StableLaw) -> float:
    """Direct quadrature of c_alpha int_{|y| >= R} |y - x|^(-1-alpha) dy"""
    if abs(x) >= R:
        raise ParameterDomainError(f"Flux is defined for |x| < R={R}, got {x}")
    options = dict(epsabs=0.0, epsrel=1e-11, limit=200)
    right, _ = integrate.quad(lambda y: (y - x) ** (-1.0 - law.alpha), R, np.inf, **options)
    left, _ = integrate.quad(lambda y: (x - y) ** (-1.0 - law.alpha), -np.inf, -R, **options)
    return law.c_alpha * (right + left)


def _panel_rule(breaks: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on consecutive break points"""
    a, b = breaks[:-1], breaks[1:]
    half = 0.5 * (b - a)
    nodes = (0.5 * (a + b))[:, None] + half[:, None] * _GL_NODES[None, :]
    weights = half[:, None] * _GL_WEIGHTS[None, :]
    return nodes.ravel(), weights.ravel()


def apply_frac_laplacian(f: Callable[[np.ndarray], np.ndarray], x: float, law: StableLaw,
                         cutoff: float = 1e-4, far_limit: float = 2000.0,
                         far_mean: Optional[float] = None) -> float:
    """Principal-value quadrature of c_alpha int (f(x+h) - f(x)) |h|^(-1-alpha) dh

    The symmetric combination f(x+h) + f(x-h) - 2f(x) is integrated over
    [cutoff, far_limit]; the excluded inner interval is replaced by its
    second-order Taylor term and the far field by the mean of f there.
    """
    alpha, c = law.alpha, law.c_alpha
    center = float(np.asarray(f(np.array([x])), dtype=float)[0])

    inner = np.geomspace(cutoff, 1.0, int(8 * np.log10(1.0 / cutoff)) + 2)
    outer = np.arange(1.0, far_limit + 0.25, 0.5)
    h, w = _panel_rule(np.unique(np.concatenate([inner, outer])))

    plus = np.asarray(f(x + h), dtype=float)
    minus = np.asarray(f(x - h), dtype=float)
    if not (np.isfinite(center) and np.all(np.isfinite(plus)) and np.all(np.isfinite(minus))):
        raise ParameterDomainError("Function samples must be finite")

    body = np.sum(w * (plus + minus - 2.0 * center) * h ** (-1.0 - alpha))

    k = max(cutoff, 1e-3)
    curvature = (np.asarray(f(np.array([x + k, x - k])), dtype=float).sum() - 2.0 * center) / k ** 2
    inner_term = curvature * cutoff ** (2.0 - alpha) / (2.0 - alpha)

    if far_mean is None:
        offsets = np.linspace(far_limit / 2.0, far_limit, 4001)
        far_mean = 0.5 * float(np.mean(np.asarray(f(x + offsets)) + np.asarray(f(x - offsets))))
    far_term = (2.0 * far_mean - 2.0 * center) * far_limit ** (-alpha) / alpha

    return float(c * (body + inner_term + far_term))


@dataclass
class KernelBoundParams:
    """Radius, stability index and evaluation grids for the kernel bound checks"""
    R: float
    alpha: float
    t_grid: Sequence[float]
    x_grid: Sequence[float] = field(default_factory=list)
    y_grid: Sequence[float] = field(default_factory=list)

    def __post_init__(self):
        if self.R <= 0:
            raise ParameterDomainError(f"Radius must be positive, got {self.R}")
        self.t_grid = np.asarray(self.t_grid, dtype=float)
        self.x_grid = np.asarray(self.x_grid, dtype=float)
        self.y_grid = np.asarray(self.y_grid, dtype=float)
        if np.any(self.t_grid <= 0) or np.any(self.t_grid > 1):
            raise ParameterDomainError("Time grid must lie in (0, 1]")
        for name in ('x_grid', 'y_grid'):
            if np.any(np.abs(getattr(self, name)) >= self.R):
                raise ParameterDomainError(f"{name} must lie strictly inside (-R, R)")

    @property
    def law(self) -> StableLaw:
        return StableLaw.from_alpha(self.alpha)


def _kappa(t, x, y, R: float, alpha: float):
    """Unvalidated envelope; broadcasts over t, x and y"""
    t = np.asarray(t, dtype=float)
    sqrt_t = np.sqrt(t)
    left = np.minimum(1.0, (R - np.abs(x)) ** (alpha / 2.0) / sqrt_t)
    right = np.minimum(1.0, (R - np.abs(y)) ** (alpha / 2.0) / sqrt_t)
    distance = np.abs(np.asarray(y, dtype=float) - np.asarray(x, dtype=float))
    peak = t ** (-1.0 / alpha)
    safe = np.where(distance > 0, distance, 1.0)
    # on the diagonal t/|y-x|^(1+alpha) is infinite and the minimum is the peak
    core = np.where(distance > 0, np.minimum(peak, t / safe ** (1.0 + alpha)), peak)
    return left * right * core


def kernel_bound(t: float, x, y, R: float, law: StableLaw):
    """Comparability envelope kappa(t, x, y) of the killed transition density"""
    if not (0 < t <= 1):
        raise ParameterDomainError(f"kappa is defined for 0 < t <= 1, got {t}")
    if np.any(np.abs(np.asarray(x)) >= R) or np.any(np.abs(np.asarray(y)) >= R):
        raise ParameterDomainError(f"kappa needs both points inside (-{R}, {R})")
    value = _kappa(t, x, y, R, law.alpha)
    return float(value) if np.ndim(value) == 0 else value


@dataclass
class KernelEstimate:
    """Histogram estimate of p_t^R(x, .) over (-R, R)"""
    edges: np.ndarray
    density: np.ndarray
    survival: float
    n_paths: int
    empty: bool = False

    @property
    def total(self) -> float:
        return float(np.sum(self.density * np.diff(self.edges)))

    def at(self, y: float) -> float:
        """Density of the bin containing y"""
        index = int(np.clip(np.searchsorted(self.edges, y, side='right') - 1, 0, self.density.size - 1))
        return float(self.density[index])

    def stderr_at(self, y: float) -> float:
        """Binomial standard error of the bin containing y"""
        index = int(np.clip(np.searchsorted(self.edges, y, side='right') - 1, 0, self.density.size - 1))
        width = self.edges[index + 1] - self.edges[index]
        p = self.density[index] * width
        return float(np.sqrt(p * (1.0 - p) / self.n_paths) / width)


def estimate_p_R(t: float, x: float, R: float, law: StableLaw, n_paths: int, bins: int,
                 rng: np.random.Generator, dt: Optional[float] = None) -> KernelEstimate:
    """Histogram of surviving killed endpoints; integrates to the survival fraction"""
    if t <= 0:
        raise ParameterDomainError(f"Kernel estimate needs t > 0, got {t}")
    step = dt if dt is not None else t / 64.0
    positions, alive = sample_killed_endpoints(law, R, x, t, step, n_paths, rng)
    counts, edges = np.histogram(positions[alive], bins=bins, range=(-R, R))
    density = counts / (n_paths * np.diff(edges))
    survivors = int(alive.sum())
    if survivors == 0:
        logger.warning(f"No killed path survived to t={t} from x={x}; estimate is empty")
    return KernelEstimate(edges, density, survivors / n_paths, n_paths, empty=survivors == 0)


def graded_nodes(R: float, level: int, focus: Optional[float] = None,
                 focus_scale: Optional[float] = None,
                 kinks: Sequence[float] = ()) -> Tuple[np.ndarray, np.ndarray]:
    """Quadrature on (-R, R) with panels graded geometrically toward both ends

    Each level doubles the panels per decade and moves the innermost break
    point two decades closer to the boundary. An optional focus point gets
    its own geometric grading outward from focus_scale. Kinks are added
    as extra break points.
    """
    per_decade = 4 * 2 ** level
    d_min = R * 10.0 ** (-3 - 2 * level)
    count = int(np.ceil(np.log10(R / d_min) * per_decade)) + 1
    gaps = np.geomspace(d_min, R, count)
    pieces = [-R + gaps, R - gaps, [0.0], list(kinks)]

    if focus is not None:
        scale = max(focus_scale or d_min, d_min)
        spread = np.geomspace(scale, 2.0 * R, int(np.ceil(np.log10(2.0 * R / scale) * per_decade)) + 2)
        pieces += [focus - spread, focus + spread, [focus]]

    breaks = np.unique(np.clip(np.concatenate([np.ravel(p) for p in pieces]), -R + d_min, R - d_min))
    return _panel_rule(breaks)


def _boundary_distance(x, R: float):
    return R - np.abs(x)


def check_lemma34(gamma: float, params: KernelBoundParams, levels: int = 3) -> BoundReport:
    """Fitted C in int kappa(s,y,x) (R-|x|)^(-gamma alpha) dx <= C (R-|y|+s^(1/alpha))^(-gamma alpha)"""
    if gamma <= 0:
        raise ParameterDomainError(f"gamma must be positive, got {gamma}")

    R, alpha = params.R, params.alpha
    report = BoundReport(lemma_id='lemma3.4', alpha=alpha, R=R, gamma=gamma)

    for level in range(levels):
        sup_ratio = 0.0
        for s in params.t_grid:
            for y in params.y_grid:
                spread = s ** (1.0 / alpha)
                nodes, weights = graded_nodes(R, level, focus=y, focus_scale=spread,
                                              kinks=(R - spread, spread - R))
                integrand = _kappa(s, y, nodes, R, alpha) * _boundary_distance(nodes, R) ** (-gamma * alpha)
                value = np.sum(weights * integrand)
                shape = (_boundary_distance(y, R) + s ** (1.0 / alpha)) ** (-gamma * alpha)
                sup_ratio = max(sup_ratio, value / shape)
        report.refinement_trace.append(float(sup_ratio))
        logger.debug(f"lemma3.4 gamma={gamma} level={level} sup_ratio={sup_ratio:.6g}")

    report.diverging = classify_divergence(report.refinement_trace)
    if report.diverging:
        report.flag('diverging')
        logger.info(f"lemma3.4 integral diverges under refinement for gamma={gamma}, alpha={alpha}")
    return report


def lemma35_envelope(s, d, alpha: float):
    """Envelope (d^-alpha) min (s d^(-2 alpha)); the first branch binds iff d <= s^(1/alpha)"""
    d = np.asarray(d, dtype=float)
    return np.minimum(d ** (-alpha), s * d ** (-2.0 * alpha))


def check_lemma35(params: KernelBoundParams, n_paths: int, rng: np.random.Generator,
                  steps: int = 16) -> BoundReport:
    """Fitted C in |P_s^R f_R(x) - f_R(x)| <= C envelope(s, R-|x|)

    P_s^R f_R(x) is the mean of f_R over surviving killed endpoints; paths
    killed before s contribute zero, which is the boundary-loss term. The
    trace records the sup ratio per s in params.t_grid.
    """
    R, alpha = params.R, params.alpha
    law = params.law
    report = BoundReport(lemma_id='lemma3.5', alpha=alpha, R=R)
    noisy_points = 0

    for s in params.t_grid:
        sup_ratio = 0.0
        for x in params.x_grid:
            positions, alive = sample_killed_endpoints(law, R, x, s, s / steps, n_paths, rng)
            samples = np.zeros(n_paths)
            samples[alive] = f_R(positions[alive], R, law)
            mean, stderr = mean_and_stderr(samples)
            difference = abs(mean - f_R(x, R, law))
            if difference < 3.0 * stderr:
                noisy_points += 1
            sup_ratio = max(sup_ratio, difference / lemma35_envelope(s, R - abs(x), alpha))
        report.refinement_trace.append(float(sup_ratio))

    report.details['noisy_points'] = noisy_points
    if noisy_points:
        report.flag('noise_dominated')
        logger.warning(f"lemma3.5: {noisy_points} grid point(s) within Monte Carlo noise; tolerance widened")
    return report


def _time_rule(t: float, level: int) -> Tuple[np.ndarray, np.ndarray]:
    """Panels on (0, t) graded geometrically toward both ends"""
    per_decade = 2 * 2 ** level
    u_min = t * 10.0 ** (-3 - level)
    count = int(np.ceil(np.log10(0.5 * t / u_min) * per_decade)) + 1
    gaps = np.geomspace(u_min, 0.5 * t, count)
    breaks = np.unique(np.concatenate([gaps, t - gaps]))
    return _panel_rule(breaks)


def lemma36_admissible(gamma: float, rho: float, alpha: float) -> bool:
    return 0 <= gamma < 1.0 / alpha - 0.5 and 0 <= rho <= min(1.0, 1.0 / alpha - gamma)


def check_lemma36(gamma: float, rho: float, params: KernelBoundParams, levels: int = 3) -> BoundReport:
    """Fitted C in the space-time bound

    int_0^t du int kappa(t-u,y,x) (R-|x|+u^(1/alpha))^(-(2+gamma)alpha) dx
        <= C t^rho (R-|y|+t^(1/alpha))^(-(1+gamma+rho)alpha)
    """
    R, alpha = params.R, params.alpha
    if not lemma36_admissible(gamma, rho, alpha):
        raise ParameterDomainError(
            f"Inadmissible (gamma, rho)=({gamma}, {rho}) for alpha={alpha}: need "
            f"0 <= gamma < {1.0 / alpha - 0.5:.4g} and 0 <= rho <= {min(1.0, 1.0 / alpha - gamma):.4g}"
        )

    report = BoundReport(lemma_id='lemma3.6', alpha=alpha, R=R, gamma=gamma, rho=rho)
    exponent = -(2.0 + gamma) * alpha

    for level in range(levels):
        sup_ratio = 0.0
        for t in params.t_grid:
            u_nodes, u_weights = _time_rule(t, level)
            for y in params.y_grid:
                total = 0.0
                for u, wu in zip(u_nodes, u_weights):
                    lag = t - u
                    spread = lag ** (1.0 / alpha)
                    nodes, weights = graded_nodes(R, level, focus=y, focus_scale=spread,
                                                  kinks=(R - spread, spread - R))
                    weight = (_boundary_distance(nodes, R) + u ** (1.0 / alpha)) ** exponent
                    total += wu * np.sum(weights * _kappa(lag, y, nodes, R, alpha) * weight)
                shape = t ** rho * (_boundary_distance(y, R) + t ** (1.0 / alpha)) ** (-(1.0 + gamma + rho) * alpha)
                sup_ratio = max(sup_ratio, total / shape)
        report.refinement_trace.append(float(sup_ratio))
        logger.debug(f"lemma3.6 gamma={gamma} rho={rho} level={level} sup_ratio={sup_ratio:.6g}")

    report.diverging = classify_divergence(report.refinement_trace)
    if report.diverging:
        report.flag('diverging')
    return report


def kernel_ratio_scan(params: KernelBoundParams, n_paths: int, bins: int,
                      rng: np.random.Generator) -> List[Tuple[float, float, float, float]]:
    """Ratios estimate/kappa of the Monte Carlo kernel over the (t, x, y) grid"""
    law = params.law
    rows = []
    for t in params.t_grid:
        for x in params.x_grid:
            estimate = estimate_p_R(t, x, params.R, law, n_paths, bins, rng)
            for y in params.y_grid:
                envelope = kernel_bound(t, x, y, params.R, law)
                rows.append((float(t), float(x), float(y), estimate.at(y) / envelope))
    return rows
