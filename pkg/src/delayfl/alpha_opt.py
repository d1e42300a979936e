"""Choice of the local/global combiner weight alpha per aggregation round."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bounds import CombinerSchedule, HyperParams, psi_term

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class AlphaSolverConfig:
    grid_floor: float = 1e-3
    grid_points: int = 1000
    refine_tol: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.grid_floor < 1.0:
            raise ValueError("grid_floor must lie in (0, 1)")
        if self.grid_points < 10:
            raise ValueError("grid_points must be at least 10")
        if self.refine_tol <= 0:
            raise ValueError("refine_tol must be positive")


def _golden(f, lo: float, hi: float, tol: float) -> float:
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def alpha_numeric(k: int, sigma_k: float, hp: HyperParams, cfg: AlphaSolverConfig | None = None) -> float:
    """Minimise psi(., k) over [grid_floor, 1].

    A uniform grid locates the best bracket and golden-section search refines
    inside it. Ties go to the largest alpha (the standard-averaging end).
    """
    cfg = cfg or AlphaSolverConfig()
    grid = np.linspace(cfg.grid_floor, 1.0, cfg.grid_points)
    vals = psi_term(k, grid, sigma_k, hp)
    best_val = vals.min()
    # last index within rounding distance of the minimum
    i = int(np.flatnonzero(vals <= best_val + 1e-14 * max(1.0, abs(best_val)))[-1])
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]

    def f(a):
        return psi_term(k, a, sigma_k, hp)

    refined = _golden(f, lo, hi, cfg.refine_tol)
    if f(refined) < vals[i] - 1e-14 * max(1.0, abs(vals[i])):
        return float(refined)
    return float(grid[i])


def closed_form_denominator(sigma_inf: float, hp: HyperParams) -> float:
    """The denominator A of the asymptotic closed-form combiner weight."""
    eta, beta, L, tau, delay = hp.eta, hp.beta, hp.lipschitz, hp.tau, hp.delay
    b1 = hp.growth(tau)
    b5 = 1.0 + hp.growth(tau - delay)
    return float(2 * eta * delay * (L + sigma_inf) * b1
                 + eta * delay * L * b5
                 - (hp.delta + sigma_inf) / beta * b5 * hp.growth(delay)
                 + eta * hp.delta * delay)


def alpha_closed_form(sigma_inf: float, hp: HyperParams, full_output: bool = False):
    """Asymptotic (k -> infinity) minimiser of psi in closed form, capped at 1.

    When the denominator is not positive the ratio is meaningless; the weight is
    clamped to 1 (its limit as the denominator tends to 0+). With
    ``full_output=True`` a ``(alpha, clamped)`` pair is returned, where
    ``clamped`` flags that case.
    """
    denom = closed_form_denominator(sigma_inf, hp)
    if denom <= 0.0:
        return (1.0, True) if full_output else 1.0
    num = 2 * hp.eta * hp.tau * (hp.lipschitz + sigma_inf) * hp.growth(hp.tau)
    alpha = min(1.0, math.sqrt(num / denom))
    return (alpha, False) if full_output else alpha


def build_schedule(sigmas, hp: HyperParams, mode: str = "numeric", alpha: float | None = None,
                   cfg: AlphaSolverConfig | None = None) -> CombinerSchedule:
    """Combiner weights for every round given the per-round noise bounds.

    ``mode`` is ``"numeric"`` (round ``j`` minimises psi at k = j + 1),
    ``"closed_form"``, or ``"fixed"`` (constant ``alpha``; 1 is plain averaging).
    """
    sigmas = np.asarray(sigmas, dtype=float).reshape(-1)
    if mode == "fixed":
        if alpha is None or not 0.0 < alpha <= 1.0:
            raise ValueError(f"fixed combiner weight must lie in (0, 1], got {alpha}")
        return CombinerSchedule(np.full(sigmas.size, float(alpha)))
    if mode == "numeric":
        return CombinerSchedule(np.array([alpha_numeric(j + 1, s, hp, cfg) for j, s in enumerate(sigmas)]))
    if mode == "closed_form":
        return CombinerSchedule(np.array([alpha_closed_form(s, hp) for s in sigmas]))
    raise ValueError(f"unknown combiner mode {mode!r}")
