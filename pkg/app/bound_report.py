"""
Fitted-constant reports for the kernel, moment and Bessel bound checks
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List

BOUND_REPORT_COLUMNS = ['lemma_id', 'alpha', 'R', 'gamma', 'rho', 'refinement_level', 'sup_ratio']


@dataclass
class BoundReport:
    """Empirically fitted constant C in LHS <= C * shape over a parameter grid

    refinement_trace holds the fitted constant at successive refinement levels
    (or successive sweep values where a check has no spatial refinement).
    """
    lemma_id: str
    alpha: float
    R: float
    gamma: float = math.nan
    rho: float = math.nan
    refinement_trace: List[float] = field(default_factory=list)
    diverging: bool = False
    flags: List[str] = field(default_factory=list)
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def sup_ratio(self) -> float:
        return self.refinement_trace[-1] if self.refinement_trace else math.nan

    @property
    def finite(self) -> bool:
        return bool(self.refinement_trace) and all(math.isfinite(v) for v in self.refinement_trace)

    def is_stable(self, rtol: float = 0.05) -> bool:
        """Last two trace entries agree to rtol"""
        if len(self.refinement_trace) < 2 or not self.finite:
            return False
        last, previous = self.refinement_trace[-1], self.refinement_trace[-2]
        return abs(last - previous) <= rtol * max(abs(last), abs(previous))

    def flag(self, name: str) -> None:
        if name not in self.flags:
            self.flags.append(name)

    def to_rows(self) -> List[Dict[str, Any]]:
        """One CSV row per refinement level"""
        return [
            {
                'lemma_id': self.lemma_id,
                'alpha': self.alpha,
                'R': self.R,
                'gamma': self.gamma,
                'rho': self.rho,
                'refinement_level': level,
                'sup_ratio': value,
            }
            for level, value in enumerate(self.refinement_trace)
        ]


def classify_divergence(trace: List[float], ratio: float = 0.5, floor: float = 1e-4) -> bool:
    """A trace diverges when its increments stop shrinking geometrically

    Convergent power-law truncation errors shrink by a fixed factor per level;
    a logarithmic or power-law blow-up keeps increments of comparable size.
    """
    if len(trace) < 3 or not all(math.isfinite(v) for v in trace):
        return not all(math.isfinite(v) for v in trace)
    last_step = trace[-1] - trace[-2]
    previous_step = trace[-2] - trace[-3]
    if last_step <= floor * abs(trace[-1]) or previous_step <= 0:
        return False
    return last_step >= ratio * previous_step

