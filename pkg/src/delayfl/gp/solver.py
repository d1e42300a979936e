"""Successive condensation for the minibatch-allocation problem, with combiner refresh."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..alpha_opt import alpha_closed_form, alpha_numeric, build_schedule
from ..bounds import CombinerSchedule, HyperParams, MinibatchSchedule, psi_term, sigma_schedule
from ..cost_model import CostWeights, DeviceProfile, battery_feasible, network_snapshot, objective_terms
from .barrier import GpInfeasibleError, solve_inner
from .posynomial import condense
from .problem import (SLACK_CAP, GpState, PenaltyConfig, build_subproblem, condensed_families, lift,
                      make_consts, penalty_floor)

log = logging.getLogger(__name__)

ALPHA_MODES = ("numeric", "closed_form", "fixed")
_KAPPA = 1e-3
_START_SLACK = 1.5
_INTERIOR = 1e-6


@dataclass
class ObjectiveReport:
    objective: float
    energy: float
    time: float
    loss_gap: float
    psi_total: float
    converged: bool
    outer_iterations: int
    penalized_history: list
    diagnostics: list
    continuous_batches: np.ndarray
    continuous_alpha: np.ndarray
    max_slack: float
    max_condensation_gap: float
    equality_residual: float
    rounding_decrements: int
    battery_margin: np.ndarray
    closure: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "objective": self.objective, "energy": self.energy, "time": self.time,
            "loss_gap": self.loss_gap, "psi_total": self.psi_total, "converged": self.converged,
            "outer_iterations": self.outer_iterations, "max_slack": self.max_slack,
            "max_condensation_gap": self.max_condensation_gap,
            "equality_residual": self.equality_residual,
            "rounding_decrements": self.rounding_decrements,
        }


def _condensation_gap(c, alpha, anchor: GpState, values: dict) -> float:
    worst = 0.0
    for _, f in condensed_families(c, alpha):
        exact = f(values)
        approx = condense(f, anchor.values)(values)
        worst = max(worst, abs(exact - approx) / exact)
    return worst


def _interior_start(c, n) -> np.ndarray:
    """Clip to the open box and shrink any device whose battery would be exhausted."""
    n = np.clip(np.asarray(n, dtype=float), 1.0 + _INTERIOR, c.sizes[None, :] * (1 - _INTERIOR))
    for i in range(c.I):
        budget = c.battery[i] * (1 - _INTERIOR) - c.K * c.e_tx[i]
        need = c.e_datum[i] * n[:, i].sum()
        if need >= budget:
            floor_need = c.e_datum[i] * c.K * (1.0 + 2 * _INTERIOR)
            if budget <= floor_need:
                raise GpInfeasibleError(
                    f"device {i} cannot run {c.K} rounds even at minibatch 1: needs "
                    f"{c.K * (c.e_datum[i] + c.e_tx[i]):.6g} J, battery holds {c.battery[i]:.6g} J")
            excess = n[:, i] - 1.0
            scale = (budget * (1 - _INTERIOR) / c.e_datum[i] - c.K) / excess.sum()
            n[:, i] = 1.0 + excess * min(scale, 1.0)
            n[:, i] = np.maximum(n[:, i], 1.0 + _INTERIOR)
    return n


def _refresh_alpha(mode, alpha, sigmas, hp, fixed_alpha):
    if mode == "fixed":
        return alpha
    new = alpha.copy()
    for j, s in enumerate(sigmas):
        k = j + 1
        cand = alpha_numeric(k, s, hp) if mode == "numeric" else alpha_closed_form(s, hp)
        # accept only weights that do not raise psi, so the penalised objective cannot rise
        if psi_term(k, cand, s, hp) <= psi_term(k, alpha[j], s, hp):
            new[j] = cand
    return new


def round_schedule(devices: Sequence[DeviceProfile], n_cont, tau: int, model_bits: int):
    """Nearest integers in [1, N_i]; then trim the largest entries of any device over budget.

    Returns (integer schedule, number of unit decrements applied).
    """
    sizes = np.array([d.data_size for d in devices])
    n = np.clip(np.rint(np.asarray(n_cont, dtype=float)), 1, sizes[None, :]).astype(int)
    dec = 0
    ok, _ = battery_feasible(devices, n, tau, model_bits)
    while not ok.all():
        i = int(np.flatnonzero(~ok)[0])
        col = n[:, i]
        if col.max() <= 1:
            raise GpInfeasibleError(f"device {i} exceeds its battery even at minibatch 1")
        k = int(np.argmax(col))  # earliest round among the largest entries
        col[k] -= 1
        dec += 1
        ok, _ = battery_feasible(devices, n, tau, model_bits)
    return n, dec


def solve_sp(hp: HyperParams, devices: Sequence[DeviceProfile], weights: CostWeights,
             pen: PenaltyConfig | None = None, init: MinibatchSchedule | None = None,
             alpha_mode: str = "closed_form", fixed_alpha: float | None = None,
             diagnostics: Callable[[dict], None] | None = None):
    """Optimise minibatch sizes (and combiner weights) by successive condensation.

    Each outer iteration builds the condensed subproblem at the current anchor,
    solves it with the barrier method, then refreshes the combiner weights from
    the new noise levels. The final continuous schedule is rounded and repaired
    against the batteries, and the reported objective is the exact one.

    Returns ``(MinibatchSchedule, CombinerSchedule, ObjectiveReport)``.
    """
    if alpha_mode not in ALPHA_MODES:
        raise ValueError(f"alpha_mode must be one of {ALPHA_MODES}")
    pen = pen or PenaltyConfig()
    c = make_consts(hp, devices, weights)
    network = network_snapshot(devices)
    if init is None:
        n = np.tile(np.maximum(1.0, np.rint(c.sizes / 2.0)), (c.K, 1))
    else:
        n = np.array(init, dtype=float)
        if n.shape != (c.K, c.I):
            raise ValueError(f"initial schedule must be {c.K} x {c.I}")
        MinibatchSchedule(n).check_sizes(c.sizes)
    n = _interior_start(c, n)

    if alpha_mode == "fixed":
        if fixed_alpha is None or not 0 < fixed_alpha <= 1:
            raise ValueError("fixed alpha mode needs fixed_alpha in (0, 1]")
        alpha = np.full(c.K, float(fixed_alpha))
    else:
        alpha = np.array([alpha_closed_form(s, hp) for s in sigma_schedule(n, network)])

    if pen.relative:
        scale = objective_terms(devices, n, CombinerSchedule(alpha), weights, hp, network)["objective"]
        pen = dataclasses.replace(pen, w1=pen.w1 * scale, w_round=pen.w_round * scale, w7=pen.w7 * scale,
                                  relative=False)

    s7 = np.ones((c.K, c.I))
    history, floors, diag = [], [], []
    converged = False
    last = None
    it = 0
    for it in range(1, pen.max_outer + 1):
        # the anchor may sit on the boundary; only the start must be interior
        anchor = lift(c, n, alpha, s7)
        start = lift(c, _interior_start(c, n), alpha, s7, kappa=_KAPPA, slack=_START_SLACK, base=anchor)
        prog = build_subproblem(hp, devices, weights, CombinerSchedule(alpha), anchor, pen, consts=c)
        cgp = prog.compile()
        res = solve_inner(cgp, cgp.to_log(start.values), inner_tol=pen.inner_tol, max_inner=pen.max_inner)
        vals = res.values
        sol = GpState(vals, alpha.copy(), c.K, c.I)
        slacks = sol.slacks()
        cgap = _condensation_gap(c, alpha, anchor, vals)
        history.append(res.objective)
        # the slack floor is a constant offset; progress is measured without it
        floors.append(penalty_floor(c, alpha, pen))
        record = {
            "iteration": it,
            "objective": res.objective,
            "max_slack": max(slacks.values()),
            "max_condensation_gap": cgap,
            "alpha": [float(a) for a in alpha],
            "newton_steps": res.newton_steps,
            "inner_gap": res.gap,
            "inner_converged": res.converged,
            "equality_residual": res.equality_residual,
        }
        diag.append(record)
        if diagnostics is not None:
            diagnostics(record)
        last = (sol, res, cgap)

        n = np.clip(sol.batches(), 1.0, c.sizes[None, :])
        s7 = np.minimum(sol.slack7(), SLACK_CAP / 10)
        sig_next = lift(c, n, alpha, s7).sigmas()
        new_alpha = _refresh_alpha(alpha_mode, alpha, sig_next, hp, fixed_alpha)
        alpha_moved = float(np.max(np.abs(new_alpha - alpha)))
        alpha = new_alpha
        if it >= 2:
            rel = abs(history[-2] - history[-1]) / max(abs(history[-2] - floors[-2]), 1e-300)
            if rel <= pen.outer_tol and alpha_moved <= 1e-6:
                converged = True
                break

    sol, res, cgap = last
    n_cont = sol.batches()
    n_int, dec = round_schedule(devices, n_cont, hp.tau, weights.model_bits)
    if alpha_mode == "fixed":
        alpha_int = CombinerSchedule(np.full(c.K, float(fixed_alpha)))
    else:
        alpha_int = build_schedule(sigma_schedule(n_int, network), hp, mode=alpha_mode)
    terms = objective_terms(devices, n_int, alpha_int, weights, hp, network)
    _, margin = battery_feasible(devices, n_int, hp.tau, weights.model_bits)
    closure = _closure(c, sol)
    report = ObjectiveReport(
        objective=terms["objective"], energy=terms["energy"], time=terms["time"],
        loss_gap=terms["loss_gap"], psi_total=terms["psi_total"], converged=converged,
        outer_iterations=it, penalized_history=history, diagnostics=diag,
        continuous_batches=n_cont, continuous_alpha=sol.alpha.copy(),
        max_slack=max(sol.slacks().values()), max_condensation_gap=cgap,
        equality_residual=res.equality_residual, rounding_decrements=dec,
        battery_margin=margin, closure=closure,
    )
    if not converged:
        log.warning("condensation loop stopped after %d iterations without meeting outer_tol", it)
    return MinibatchSchedule(n_int.astype(float)), alpha_int, report


def _closure(c, sol: GpState) -> dict:
    """Relative tightness of the noise-bound identities at the final iterate."""
    v = sol.values
    sig_gap = 0.0
    p_gap = 0.0
    for k in range(1, c.K + 1):
        rhs = sum(c.noise_coef[i] * v[("P", k, i)] for i in range(c.I))
        sig_gap = max(sig_gap, (v[("sigma", k)] - rhs) / v[("sigma", k)])
        for i in range(c.I):
            f8 = v[("P", k, i)] ** 2 * v[("n", k, i)] + v[("n", k, i)] / c.sizes[i]
            p_gap = max(p_gap, abs(1.0 - f8))
    return {"sigma_tightness": sig_gap, "p_tightness": p_gap}


def diagnostics_writer(stream) -> Callable[[dict], None]:
    """Callback writing each diagnostics record as one JSON line."""

    def emit(record: dict) -> None:
        stream.write(json.dumps(record, sort_keys=True) + "\n")

    return emit


def brute_force(hp: HyperParams, devices: Sequence[DeviceProfile], weights: CostWeights,
                alpha_mode: str = "numeric"):
    """Exhaustive search over integer schedules (tiny instances only)."""
    import itertools

    sizes = [d.data_size for d in devices]
    network = network_snapshot(devices)
    if math.prod(sizes) ** hp.rounds > 2_000_000:
        raise ValueError("instance too large for exhaustive search")
    best = (math.inf, None, None)
    ranges = [range(1, sizes[i] + 1) for _ in range(hp.rounds) for i in range(len(devices))]
    for combo in itertools.product(*ranges):
        n = np.array(combo, dtype=float).reshape(hp.rounds, len(devices))
        ok, _ = battery_feasible(devices, n, hp.tau, weights.model_bits)
        if not ok.all():
            continue
        alpha = build_schedule(sigma_schedule(n, network), hp, mode=alpha_mode)
        val = objective_terms(devices, n, alpha, weights, hp, network)["objective"]
        if val < best[0]:
            best = (val, n, alpha)
    return best
