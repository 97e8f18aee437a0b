"""
Moment recursion for the stable superprocess
Handles full-space stable densities, semigroup oracles, the recursion for
v_1..v_4, raw and centered moments and envelope checks near the boundary
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, interpolate, linalg, special

from bound_report import BoundReport, classify_divergence
from dirichlet_kernel import f_R
from errors import ParameterDomainError, ParameterGateError
from stable_motion import StableLaw, sample_killed_endpoints

logger = logging.getLogger(__name__)

MAX_ORDER = 4
TABLE_LIMIT = 50.0
MOMENT_TABLE_COLUMNS = ['s', 'phi_id', 'order', 'recursion_value', 'mc_value', 'mc_stderr']


class _DensityTable:
    """Unit-time stable density p_1 on [0, TABLE_LIMIT] with series tails"""

    def __init__(self, alpha: float, n_nodes: int = 600):
        self.alpha = alpha
        nodes = 2.0 * np.sinh(np.linspace(0.0, np.arcsinh(TABLE_LIMIT / 2.0), n_nodes))
        values = np.array([self._fourier_inversion(z) for z in nodes])
        self.spline = interpolate.CubicSpline(nodes, values, bc_type=((1, 0.0), 'not-a-knot'))
        self.antiderivative = self.spline.antiderivative()
        self.terms = self._series_terms()

    def _fourier_inversion(self, z: float) -> float:
        """(1/pi) int_0^inf exp(-xi^alpha) cos(z xi) dxi"""
        alpha = self.alpha
        if z == 0.0:
            return float(special.gamma(1.0 + 1.0 / alpha) / np.pi)
        value, _ = integrate.quad(lambda xi: np.exp(-xi ** alpha), 0.0, np.inf,
                                  weight='cos', wvar=z, epsabs=1e-13, epsrel=1e-10)
        return float(value / np.pi)

    def _series_terms(self) -> int:
        """Number of tail-series terms usable at the table limit"""
        if self.alpha < 1.0:
            return 40
        # asymptotic for alpha >= 1: stop before terms start growing
        k, previous = 1, np.inf
        while k < 40:
            size = special.gamma(self.alpha * k + 1.0) / special.factorial(k) * TABLE_LIMIT ** (-self.alpha * k)
            if size > previous:
                break
            previous = size
            k += 1
        return k - 1

    def _tail_series(self, z: np.ndarray, density: bool) -> np.ndarray:
        alpha = self.alpha
        total = np.zeros_like(z)
        for k in range(1, self.terms + 1):
            sign = (-1.0) ** (k + 1) * np.sin(k * np.pi * alpha / 2.0) / special.factorial(k)
            if density:
                total += sign * special.gamma(alpha * k + 1.0) * z ** (-alpha * k - 1.0)
            else:
                total += sign * special.gamma(alpha * k) * z ** (-alpha * k)
        return total / np.pi

    def density(self, z: np.ndarray) -> np.ndarray:
        z = np.abs(np.asarray(z, dtype=float))
        out = np.empty_like(z)
        near = z <= TABLE_LIMIT
        out[near] = self.spline(z[near])
        out[~near] = self._tail_series(z[~near], density=True)
        return out

    def cdf(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        a = np.abs(z)
        upper = np.empty_like(a)
        near = a <= TABLE_LIMIT
        upper[near] = 0.5 + self.antiderivative(a[near])
        upper[~near] = 1.0 - self._tail_series(a[~near], density=False)
        return np.where(z >= 0, upper, 1.0 - upper)


@lru_cache(maxsize=16)
def _density_table(alpha: float) -> _DensityTable:
    logger.debug(f"Building stable density table for alpha={alpha}")
    return _DensityTable(alpha)


def stable_density(law: StableLaw, t: float, x):
    """Density of Y_t by Fourier inversion of exp(-t |xi|^alpha); p_t(x) = t^(-1/alpha) p_1(t^(-1/alpha) x)"""
    if t <= 0:
        raise ParameterDomainError(f"Density needs t > 0, got {t}")
    scale = law.scale(t)
    value = _density_table(law.alpha).density(np.asarray(x, dtype=float) / scale) / scale
    return float(value) if np.ndim(value) == 0 else value


def stable_cdf(law: StableLaw, t: float, x):
    """Distribution function of Y_t"""
    if t <= 0:
        raise ParameterDomainError(f"Distribution function needs t > 0, got {t}")
    value = _density_table(law.alpha).cdf(np.asarray(x, dtype=float) / law.scale(t))
    return float(value) if np.ndim(value) == 0 else value


class SemigroupOracle(ABC):
    """phi -> P_s phi on a fixed spatial grid"""

    kind: str = 'abstract'

    def __init__(self, grid: np.ndarray):
        self.grid = np.asarray(grid, dtype=float)

    @abstractmethod
    def apply(self, values: np.ndarray, s: float) -> np.ndarray:
        """P_s applied to a function given by its samples on the grid"""

    def evaluate(self, phi_values: np.ndarray, s: float, x: float) -> float:
        """(P_s phi)(x), interpolated from the grid"""
        return float(np.interp(x, self.grid, self.apply(phi_values, s)))

    def sample(self, phi: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        return np.asarray(phi(self.grid), dtype=float)


class FullSpaceOracle(SemigroupOracle):
    """Stable semigroup on uniform cells over [-L, L]; the two end cells reach to infinity

    Cell probabilities are CDF differences, so every row of the transition
    matrix sums to one and constants are preserved exactly.
    """

    kind = 'full-space'

    def __init__(self, law: StableLaw, half_width: float = 20.0, spacing: float = 0.05):
        self.law = law
        self.spacing = spacing
        n_cells = int(round(2.0 * half_width / spacing))
        super().__init__(-half_width + spacing * (np.arange(n_cells) + 0.5))

    def matrix(self, s: float) -> np.ndarray:
        n = self.grid.size
        if s <= 0:
            return np.eye(n)
        # edge e_j minus center x_i is (j - i - 1/2) * spacing, so T is Toeplitz
        cdf = stable_cdf(self.law, s, (np.arange(-n, n + 1) - 0.5) * self.spacing)
        steps = np.diff(cdf)
        offset = np.arange(n)
        transition = linalg.toeplitz(steps[n - offset], steps[n + offset])
        transition[:, 0] = cdf[n + 1 - offset]
        transition[:, -1] = 1.0 - cdf[2 * n - 1 - offset]
        return transition

    def apply(self, values: np.ndarray, s: float) -> np.ndarray:
        return self.matrix(s) @ values


class KappaKilledOracle(SemigroupOracle):
    """Killed-semigroup surrogate built from the comparability envelope kappa

    Cells are graded toward both ends of (-R, R). The envelope is integrated
    exactly over each cell in the distance variable, with the two boundary
    factors frozen at the cell midpoints.
    """

    kind = 'killed'

    def __init__(self, law: StableLaw, R: float, level: int = 0):
        self.law = law
        self.R = R
        self.level = level
        per_decade = 6 * 2 ** level
        d_min = R * 10.0 ** (-3 - level)
        gaps = np.geomspace(d_min, R, int(np.ceil(np.log10(R / d_min) * per_decade)) + 1)
        self.edges = np.unique(np.concatenate([-R + gaps, R - gaps, [0.0]]))
        self.edges = self.edges[(self.edges >= -R + d_min) & (self.edges <= R - d_min)]
        super().__init__(0.5 * (self.edges[:-1] + self.edges[1:]))
        self.widths = np.diff(self.edges)

    def _core_primitive(self, z: np.ndarray, t: float) -> np.ndarray:
        """Signed int_0^z (t^(-1/alpha) min t|h|^(-1-alpha)) dh"""
        alpha = self.law.alpha
        knee = t ** (1.0 / alpha)
        a = np.abs(z)
        inner = a / knee
        outer = 1.0 + (1.0 - t * np.maximum(a, knee) ** (-alpha)) / alpha
        return np.sign(z) * np.where(a <= knee, inner, outer)

    def matrix(self, s: float) -> np.ndarray:
        alpha = self.law.alpha
        boundary = np.minimum(1.0, (self.R - np.abs(self.grid)) ** (alpha / 2.0) / np.sqrt(s))
        shifted_hi = self.edges[None, 1:] - self.grid[:, None]
        shifted_lo = self.edges[None, :-1] - self.grid[:, None]
        cell = self._core_primitive(shifted_hi, s) - self._core_primitive(shifted_lo, s)
        return boundary[:, None] * cell * boundary[None, :]

    def apply(self, values: np.ndarray, s: float) -> np.ndarray:
        if s <= 0:
            return np.asarray(values, dtype=float).copy()
        return self.matrix(s) @ values


class PathKilledOracle(SemigroupOracle):
    """Killed semigroup by averaging over Monte Carlo killed skeletons"""

    kind = 'killed'

    def __init__(self, law: StableLaw, R: float, grid: np.ndarray, n_paths: int,
                 rng: np.random.Generator, steps: int = 32):
        if np.any(np.abs(np.asarray(grid)) >= R):
            raise ParameterDomainError("Path oracle grid must lie inside (-R, R)")
        super().__init__(grid)
        self.law = law
        self.R = R
        self.n_paths = n_paths
        self.rng = rng
        self.steps = steps

    def apply(self, values: np.ndarray, s: float) -> np.ndarray:
        if s <= 0:
            return np.asarray(values, dtype=float).copy()
        out = np.empty(self.grid.size)
        for i, x in enumerate(self.grid):
            positions, alive = sample_killed_endpoints(self.law, self.R, x, s, s / self.steps, self.n_paths, self.rng)
            sampled = np.interp(positions[alive], self.grid, values)
            out[i] = sampled.sum() / self.n_paths
        return out


@dataclass
class TimeGrid:
    """Gauss-Legendre panels on (0, s), geometrically graded toward both ends

    Half the panels shrink toward u = s, where P_{s-u} tends to the identity
    and the integrand keeps the boundary singularity of v_k(u). The other
    half shrink toward u = 0, where P_u phi is still close to phi.
    """
    s: float
    panels: int = 8
    order: int = 6
    grading: float = 1e-3

    def __post_init__(self):
        if self.s <= 0:
            raise ParameterDomainError(f"Time grid needs s > 0, got {self.s}")
        if self.panels < 2:
            raise ParameterDomainError(f"Time grid needs at least 2 panels, got {self.panels}")
        near_zero = 0.5 * self.s * np.geomspace(1.0, self.grading, self.panels // 2)[::-1]
        near_end = self.s - near_zero[::-1]
        self.breaks = np.concatenate([[0.0], near_zero, near_end[1:], [self.s]])

        self.reference, self.reference_weights = np.polynomial.legendre.leggauss(self.order)
        a, b = self.breaks[:-1], self.breaks[1:]
        self.nodes = (0.5 * (a + b))[:, None] + 0.5 * (b - a)[:, None] * self.reference[None, :]
        self.weights = 0.5 * (b - a)[:, None] * self.reference_weights[None, :]

    @property
    def n_panels(self) -> int:
        return self.breaks.size - 1

    def panel_of(self, index: int) -> int:
        return index // self.order


class MomentRecursion:
    """v_n(s) = sum_k C(n-1,k) int_0^s P_{s-u}(v_k(u) v_{n-k}(u)) du for n <= 4

    Values of v_k at every time node are memoized by (order, node index).
    Integrals ending inside a panel use barycentric interpolation of the
    product over that panel's nodes.
    """

    def __init__(self, oracle: SemigroupOracle, phi_values: np.ndarray, time_grid: TimeGrid):
        self.logger = logging.getLogger(__name__)
        self.oracle = oracle
        self.phi = np.asarray(phi_values, dtype=float)
        self.time_grid = time_grid
        self.memo: Dict[Tuple[int, int], np.ndarray] = {}
        self.final: Dict[int, np.ndarray] = {}
        self.flags: List[str] = []
        if np.any(self.phi < 0):
            raise ParameterDomainError("Recursion requires phi >= 0")

    def _nodes(self) -> np.ndarray:
        return self.time_grid.nodes.ravel()

    def combine(self, n: int, index: int, reverse: bool = False) -> np.ndarray:
        """sum_k C(n-1,k) v_k v_{n-k} at a time node; reverse sums with k and n-k swapped"""
        total = np.zeros_like(self.phi)
        for k in range(1, n):
            first, second = (n - k, k) if reverse else (k, n - k)
            total = total + comb(n - 1, k) * self.memo[(first, index)] * self.memo[(second, index)]
        return total

    def _integrate_to(self, n: int, end: float, products: np.ndarray) -> np.ndarray:
        """int_0^end P_{end-u}(g_n(u)) du from g_n at the time nodes"""
        grid = self.time_grid
        nodes = grid.nodes
        total = np.zeros_like(self.phi)
        for p in range(grid.n_panels):
            a, b = grid.breaks[p], grid.breaks[p + 1]
            if a >= end:
                break
            panel_products = products[p * grid.order:(p + 1) * grid.order]
            if b <= end * (1.0 + 1e-14):
                for j in range(grid.order):
                    total += grid.weights[p, j] * self.oracle.apply(panel_products[j], end - nodes[p, j])
                continue
            # partial panel [a, end]
            interpolant = interpolate.BarycentricInterpolator(nodes[p], panel_products)
            half = 0.5 * (end - a)
            for xi, w in zip(grid.reference, grid.reference_weights):
                u = a + half * (xi + 1.0)
                total += half * w * self.oracle.apply(interpolant(u), end - u)
        return total

    def run(self, max_order: int = MAX_ORDER) -> Dict[int, np.ndarray]:
        if not 1 <= max_order <= MAX_ORDER:
            raise ParameterDomainError(f"Orders 1..{MAX_ORDER} are supported, got {max_order}")
        nodes = self._nodes()
        s = self.time_grid.s

        for i, u in enumerate(nodes):
            self.memo[(1, i)] = self.oracle.apply(self.phi, u)
        self.final[1] = self.oracle.apply(self.phi, s)

        for n in range(2, max_order + 1):
            products = np.array([self.combine(n, i) for i in range(nodes.size)])
            for i, u in enumerate(nodes):
                self.memo[(n, i)] = self._integrate_to(n, u, products)
            self.final[n] = self._integrate_to(n, s, products)
            if not np.all(np.isfinite(self.final[n])):
                self.flags.append(f'divergence_order_{n}')
                self.logger.warning(f"v_{n} is not finite on the grid; phi is not integrable for this oracle")
        return self.final


def v_n(phi: np.ndarray, s: float, n: int, oracle: SemigroupOracle,
        time_grid: Optional[TimeGrid] = None) -> np.ndarray:
    """v_n(s) on the oracle grid for phi given by its samples there"""
    if n not in range(1, MAX_ORDER + 1):
        raise ParameterDomainError(f"n must lie in 1..{MAX_ORDER}, got {n}")
    recursion = MomentRecursion(oracle, phi, time_grid or TimeGrid(s))
    return recursion.run(n)[n]


@dataclass
class MomentTable:
    """v_1..v_4 at time s and the moments of <X_s, phi> they determine"""
    s: float
    phi_id: str
    grid: np.ndarray
    v_values: Dict[int, np.ndarray]
    cumulants: Dict[int, float]
    raw_moments: Dict[int, float] = field(default_factory=dict)
    centered: Dict[int, float] = field(default_factory=dict)
    flags: List[str] = field(default_factory=list)

    def to_rows(self, mc_values: Optional[Dict[int, Tuple[float, float]]] = None) -> List[dict]:
        mc_values = mc_values or {}
        rows = []
        for order in sorted(self.raw_moments):
            mc_value, mc_stderr = mc_values.get(order, (float('nan'), float('nan')))
            rows.append({
                's': self.s, 'phi_id': self.phi_id, 'order': order,
                'recursion_value': self.raw_moments[order],
                'mc_value': mc_value, 'mc_stderr': mc_stderr,
            })
        return rows


def raw_from_cumulants(k: Dict[int, float]) -> Dict[int, float]:
    """Raw moments of orders 1..4 from cumulants <mu, v_n>"""
    k1, k2, k3, k4 = k[1], k[2], k[3], k[4]
    return {
        1: k1,
        2: k1 ** 2 + k2,
        3: k1 ** 3 + 3.0 * k1 * k2 + k3,
        4: k1 ** 4 + 6.0 * k1 ** 2 * k2 + 4.0 * k1 * k3 + 3.0 * k2 ** 2 + k4,
    }


def moments_of(mu: Tuple[Sequence[float], Sequence[float]], phi: np.ndarray, s: float,
               oracle: SemigroupOracle, time_grid: Optional[TimeGrid] = None,
               phi_id: str = 'phi') -> MomentTable:
    """Moments of <X_s, phi> for X_0 = mu given as (atom positions, atom masses)"""
    positions = np.asarray(mu[0], dtype=float)
    masses = np.asarray(mu[1], dtype=float)
    recursion = MomentRecursion(oracle, phi, time_grid or TimeGrid(s))
    values = recursion.run(MAX_ORDER)

    cumulants = {
        n: float(np.sum(masses * np.interp(positions, oracle.grid, values[n]))) if positions.size else 0.0
        for n in values
    }
    raw = raw_from_cumulants(cumulants)
    centered = {
        2: cumulants[2],
        3: cumulants[3],
        4: cumulants[4] + 3.0 * cumulants[2] ** 2,
    }
    return MomentTable(s=s, phi_id=phi_id, grid=oracle.grid, v_values=values, cumulants=cumulants,
                       raw_moments=raw, centered=centered, flags=list(recursion.flags))


def default_delta0(alpha: float) -> float:
    """delta_0 = (1 + eps_0)/4 with eps_0 = (1 min (1/alpha - 3/2)) / 2"""
    epsilon0 = 0.5 * min(1.0, 1.0 / alpha - 1.5)
    return (1.0 + epsilon0) / 4.0


def check_vn_envelopes(R: float, law: StableLaw, s_grid: Sequence[float], y_grid: Sequence[float],
                       delta0: Optional[float] = None, phi_kind: str = 'f_R',
                       levels: int = 2, time_grid_panels: int = 6) -> List[BoundReport]:
    """Fitted constants for v_n(s,y) <= C s^(e_n) (R-|y|+s^(1/alpha))^(-(1+n delta0) alpha)

    phi_kind 'f_R' uses e_1 = 0 and e_n = n delta0 for n >= 2, with exponent
    1 in place of 1+delta0 for n = 1. phi_kind 'F_R' uses
    F_R(x) = (R-|x|)^(-(1+delta0) alpha) and e_n = 0 for every n.
    One report per order; the trace runs over oracle refinement levels.
    """
    alpha = law.alpha
    if alpha >= 2.0 / 3.0:
        raise ParameterGateError(f"Moment envelopes need alpha < 2/3, got {alpha}")
    if delta0 is None:
        delta0 = default_delta0(alpha)
    if not (0.25 < delta0 < 0.25 * (1.0 / alpha - 0.5)):
        raise ParameterGateError(
            f"delta0 must satisfy 1 < 4 delta0 < 1/alpha - 1/2, got {delta0} for alpha={alpha}"
        )
    if delta0 >= 0.5:
        raise ParameterGateError(f"delta0 = (1 + eps0)/4 needs eps0 < 1, got delta0={delta0}")
    if phi_kind not in ('f_R', 'F_R'):
        raise ParameterDomainError(f"Unknown phi_kind {phi_kind}")

    ys = np.asarray(y_grid, dtype=float)
    reports = [
        BoundReport(lemma_id=f'vn_envelope_{phi_kind}_n{n}', alpha=alpha, R=R, gamma=delta0)
        for n in range(1, MAX_ORDER + 1)
    ]

    for level in range(levels):
        oracle = KappaKilledOracle(law, R, level)
        if phi_kind == 'f_R':
            phi = f_R(oracle.grid, R, law)
        else:
            phi = (R - np.abs(oracle.grid)) ** (-(1.0 + delta0) * alpha)
        sup = np.zeros(MAX_ORDER)
        for s in s_grid:
            values = MomentRecursion(oracle, phi, TimeGrid(s, panels=time_grid_panels)).run(MAX_ORDER)
            spread = (R - np.abs(ys) + s ** (1.0 / alpha))
            for n in range(1, MAX_ORDER + 1):
                if phi_kind == 'f_R':
                    time_power = 0.0 if n == 1 else n * delta0
                    space_power = 1.0 if n == 1 else 1.0 + n * delta0
                else:
                    time_power, space_power = 0.0, 1.0 + n * delta0
                envelope = s ** time_power * spread ** (-space_power * alpha)
                ratio = np.interp(ys, oracle.grid, values[n]) / envelope
                sup[n - 1] = max(sup[n - 1], float(np.max(ratio)))
        for n, report in enumerate(reports, start=1):
            report.refinement_trace.append(float(sup[n - 1]))
        logger.debug(f"vn envelopes level={level} sup={sup}")

    for report in reports:
        report.diverging = classify_divergence(report.refinement_trace)
        if report.diverging:
            report.flag('diverging')
    return reports
