"""Hidden-bias sensitivity analysis for the matched binary comparison.

Within a discordant matched pair, an unobserved bias of magnitude Gamma
lets the probability that the healthy-arm member is the "improved" one
range over [1/(1+Gamma), Gamma/(1+Gamma)].  The worst-case one-sided
p-value is the exact upper binomial tail at that upper probability; the
critical Gamma is the largest value at which the test still rejects.
The (Lambda, Delta) amplification factors a given Gamma into the hidden
covariate's effect on treatment odds and on outcome-difference odds via
Gamma = (Lambda * Delta + 1) / (Lambda + Delta).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from mensa.stats import binom_tail_ge


@dataclass
class SensitivityResult:
    gamma_critical: float
    p_curve: list[tuple[float, float]]  # (Gamma, worst-case one-sided p)
    bounds: tuple[float, float]  # treatment probability bounds at gamma_critical
    alpha: float
    discordant_pos: int
    discordant_total: int
    note: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "gamma_critical": self.gamma_critical,
            "bounds_lo": self.bounds[0],
            "bounds_hi": self.bounds[1],
            "alpha": self.alpha,
            "discordant_pos": self.discordant_pos,
            "discordant_total": self.discordant_total,
            "p_curve": [{"gamma": g, "p": p} for g, p in self.p_curve],
            "note": self.note,
        }


def worst_case_p(discordant_pos: int, discordant_total: int, gamma: float) -> float:
    """Exact upper tail P(X >= pos) with X ~ Binomial(total, Gamma/(1+Gamma))."""
    if gamma < 1:
        raise ValueError("gamma must be at least 1")
    return binom_tail_ge(discordant_pos, discordant_total, gamma / (1.0 + gamma))


def treatment_probability_bounds(gamma: float) -> tuple[float, float]:
    if gamma < 1:
        raise ValueError("gamma must be at least 1")
    return (1.0 / (1.0 + gamma), gamma / (1.0 + gamma))


def rosenbaum_binary(discordant_pos: int, discordant_total: int, alpha: float = 0.05,
                     gamma_step: float = 0.01) -> SensitivityResult:
    """Critical Gamma by grid scan plus bisection refinement to 0.001."""
    if not 0 <= discordant_pos <= discordant_total:
        raise ValueError("discordant_pos must lie in [0, discordant_total]")
    if discordant_total < 1:
        raise ValueError("discordant_total must be at least 1")
    if gamma_step <= 0:
        raise ValueError("gamma_step must be positive")

    p1 = worst_case_p(discordant_pos, discordant_total, 1.0)
    curve: list[tuple[float, float]] = [(1.0, p1)]
    if p1 > alpha:
        note = ("effect not significant at Gamma=1"
                if 2 * discordant_pos < discordant_total
                else f"p={p1:.4g} exceeds alpha at Gamma=1")
        return SensitivityResult(
            gamma_critical=1.0, p_curve=curve,
            bounds=treatment_probability_bounds(1.0), alpha=alpha,
            discordant_pos=discordant_pos, discordant_total=discordant_total, note=note)

    gamma = 1.0
    while True:
        gamma = round(gamma + gamma_step, 12)
        p = worst_case_p(discordant_pos, discordant_total, gamma)
        curve.append((gamma, p))
        if p > alpha:
            break

    lo, hi = gamma - gamma_step, gamma
    while hi - lo > 1e-3:
        mid = 0.5 * (lo + hi)
        if worst_case_p(discordant_pos, discordant_total, mid) <= alpha:
            lo = mid
        else:
            hi = mid
    gamma_critical = lo
    return SensitivityResult(
        gamma_critical=gamma_critical, p_curve=curve,
        bounds=treatment_probability_bounds(gamma_critical), alpha=alpha,
        discordant_pos=discordant_pos, discordant_total=discordant_total)


@dataclass
class AmplificationCurve:
    gamma: float
    points: list[tuple[float, float]]  # (Lambda, Delta), each > 1
    skipped: list[float] = field(default_factory=list)  # grid Lambdas <= gamma

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "gamma": self.gamma,
            "points": [{"lambda": l, "delta": d} for l, d in self.points],
            "skipped_lambdas": self.skipped,
        }


def amplify(gamma: float, lambda_grid: Sequence[float]) -> AmplificationCurve:
    """Delta = (Lambda * Gamma - 1) / (Lambda - Gamma) per grid point."""
    if gamma <= 1:
        raise ValueError("amplification needs gamma > 1")
    points: list[tuple[float, float]] = []
    skipped: list[float] = []
    for lam in lambda_grid:
        if lam <= gamma:
            skipped.append(float(lam))
            continue
        delta = (lam * gamma - 1.0) / (lam - gamma)
        points.append((float(lam), float(delta)))
    return AmplificationCurve(gamma=gamma, points=points, skipped=skipped)


def default_lambda_grid(gamma: float, n_points: int = 100, span: float = 3.0) -> list[float]:
    """Evenly spaced Lambdas just above gamma, covering the curve's knee."""
    start = gamma + 0.01
    step = span / max(n_points - 1, 1)
    return [start + k * step for k in range(n_points)]
