"""The condensed minibatch-allocation subproblem.

Variables are keyed by tuples: scalars ``("gap",)``, ``("P1",)``, ``("Psi",)``,
``("m1",)``..``("m3",)``, ``("s1",)``; per round ``(name, k)`` for
``Tcmp, Ttx, Ecmp, Etx, sigma, h1, h2, eps, psi, s2..s6``; per round and device
``(name, k, i)`` for ``n, P, Ecmp_i, Etx_i, s7``. Rounds are numbered k = 1..K
and row k-1 of every schedule belongs to round k.

The loss-gap bound is encoded as a chain of lower-bounding posynomial
constraints (gap >= m1 + P1 + L*Psi, Psi >= sum psi, psi >= its five terms,
h, eps and P bounded below through condensed denominators) plus slack-relaxed
upper companions that keep each variable close to the expression it stands for.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..bounds import CombinerSchedule, HyperParams, epsilon_term, h_term
from ..cost_model import CostWeights, DeviceProfile
from .posynomial import Monomial, Posynomial, condense
from .program import GpProgram

V = Monomial.var
P_FLOOR = 1e-7
SLACK_CAP = 1e8
BOX_SPAN = 40.0


@dataclass(frozen=True)
class PenaltyConfig:
    """Slack penalty weights and loop limits.

    With ``relative`` the weights are multiples of the unpenalised objective at
    the initial schedule, so the penalty keeps the same pull whatever the scale
    of c1, c2, c3.
    """

    w1: float = 1e-5
    w_round: float = 1e-5
    w7: float = 1e-4
    outer_tol: float = 1e-7
    inner_tol: float = 1e-11
    max_outer: int = 150
    max_inner: int = 800
    relative: bool = True

    def __post_init__(self):
        if min(self.w1, self.w_round, self.w7) <= 0:
            raise ValueError("penalty weights must be positive")
        if self.outer_tol <= 0 or self.inner_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration limits must be at least 1")


@dataclass
class GpState:
    """A point of the condensed problem plus the combiner weights it was built with."""

    values: dict
    alpha: np.ndarray
    rounds: int
    devices: int
    meta: dict = field(default_factory=dict)

    def batches(self) -> np.ndarray:
        return np.array([[self.values[("n", k, i)] for i in range(self.devices)]
                         for k in range(1, self.rounds + 1)])

    def sigmas(self) -> np.ndarray:
        return np.array([self.values[("sigma", k)] for k in range(1, self.rounds + 1)])

    def slack7(self) -> np.ndarray:
        return np.array([[self.values[("s7", k, i)] for i in range(self.devices)]
                         for k in range(1, self.rounds + 1)])

    def slacks(self) -> dict:
        return {key: v for key, v in self.values.items() if key[0].startswith("s") and key[0] != "sigma"}


@dataclass(frozen=True)
class _Consts:
    """Everything about an instance that does not depend on the decision variables."""

    hp: HyperParams
    devices: tuple
    weights: CostWeights
    rho: np.ndarray
    noise_coef: np.ndarray  # rho_i S_i Theta_i sqrt(2)
    e_datum: np.ndarray  # tau * gamma d varrho^2 / 2
    e_tx: np.ndarray
    t_cmp: np.ndarray  # tau d / varrho
    t_tx: np.ndarray
    sizes: np.ndarray
    battery: np.ndarray

    @property
    def K(self):
        return self.hp.rounds

    @property
    def I(self):
        return len(self.devices)

    @property
    def use_tx(self):
        return self.weights.model_bits > 0

    @property
    def use_h1(self):
        return self.hp.tau >= 2

    @property
    def use_h2(self):
        return self.hp.tau - self.hp.delay >= 2

    @property
    def horizon_scale(self):
        return self.hp.eta * self.hp.phi * self.hp.horizon


def make_consts(hp: HyperParams, devices: Sequence[DeviceProfile], weights: CostWeights) -> _Consts:
    devices = tuple(devices)
    if not devices:
        raise ValueError("at least one device is required")
    sizes = np.array([d.data_size for d in devices], dtype=float)
    if np.any(sizes < 2):
        raise ValueError("every device needs N_i >= 2 for a nontrivial minibatch range")
    rho = sizes / sizes.sum()
    coef = rho * np.array([d.stddev * d.variability for d in devices]) * math.sqrt(2.0)
    if not np.any(coef > 0):
        raise ValueError("noise bound vanishes identically (all S_i * Theta_i are zero)")
    return _Consts(
        hp=hp, devices=devices, weights=weights, rho=rho, noise_coef=coef,
        e_datum=np.array([hp.tau * d.energy_per_datum for d in devices]),
        e_tx=np.array([d.tx_power * weights.model_bits / d.rate for d in devices]),
        t_cmp=np.array([hp.tau * d.cycles_per_datum / d.clock for d in devices]),
        t_tx=np.array([weights.model_bits / d.rate for d in devices]),
        sizes=sizes,
        battery=np.array([d.battery for d in devices]),
    )


def _round_consts(c: _Consts, a: float, k: int) -> dict:
    hp = c.hp
    return {
        "B1": float(hp.growth(hp.tau)),
        "B2": float(hp.growth(hp.tau - hp.delay)),
        "B3": 1.0 - (1.0 - a) ** k,
        "B4": 1.0 - a,
        "B5": 1.0 + float(hp.growth(hp.tau - hp.delay)),
        "B6": hp.tau - a * hp.delay,
        "B7": float(hp.tau - hp.delay),
    }


def _posy(terms) -> Posynomial | None:
    """Posynomial from (coefficient, monomial) pairs, dropping zero coefficients."""
    kept = [m * coef for coef, m in terms if coef > 0]
    return Posynomial(kept) if kept else None


def psi_terms(c: _Consts, a: float, k: int) -> Posynomial:
    """The five-term posynomial that psi(k) must dominate."""
    b = _round_consts(c, a, k)
    hp = c.hp
    return _posy([
        (b["B4"] * b["B1"], V(("eps", k))),
        (b["B4"] if c.use_h1 else 0.0, V(("h1", k))),
        (a if c.use_h2 else 0.0, V(("h2", k))),
        (a * hp.eta * hp.delay * hp.lipschitz * b["B5"], Monomial(1.0)),
        (hp.eta * b["B6"], V(("sigma", k))),
    ])


def h_pair(c: _Consts, name: str, k: int, x: float, B: float) -> tuple[Posynomial, Posynomial]:
    """(f3, f4): h >= ((d+s)/beta) B - eta (d+s) x  <=>  f4 <= f3."""
    hp = c.hp
    hinv = V((name, k), -1)
    f3 = _posy([(1.0, Monomial(1.0)), (hp.eta * hp.delta * x, hinv), (hp.eta * x, hinv * V(("sigma", k)))])
    f4 = _posy([(B * hp.delta / hp.beta, hinv), (B / hp.beta, hinv * V(("sigma", k)))])
    return f3, f4


def eps_pair(c: _Consts, a: float, k: int) -> tuple[Posynomial, Posynomial]:
    """(f5, f6): eps >= B3 2 eta (L + sigma)(tau/alpha - delay)  <=>  f6 <= f5."""
    hp = c.hp
    b3 = _round_consts(c, a, k)["B3"]
    einv = V(("eps", k), -1)
    f5 = _posy([(1.0, Monomial(1.0)),
                (b3 * 2 * hp.eta * hp.lipschitz * hp.delay, einv),
                (b3 * 2 * hp.eta * hp.delay, einv * V(("sigma", k)))])
    f6 = _posy([(b3 * 2 * hp.eta * hp.lipschitz * hp.tau / a, einv),
                (b3 * 2 * hp.eta * hp.tau / a, einv * V(("sigma", k)))])
    return f5, f6


def sigma_posy(c: _Consts, k: int) -> Posynomial:
    return _posy([(c.noise_coef[i], V(("P", k, i))) for i in range(c.I)])


def p_posy(c: _Consts, k: int, i: int) -> Posynomial:
    n = V(("n", k, i))
    return Posynomial([V(("P", k, i), 2) * n, n / c.sizes[i]])


def condensed_families(c: _Consts, alpha) -> list[tuple[str, Posynomial]]:
    """Every posynomial that the subproblem replaces by its condensation."""
    out = [("f1", Posynomial([V(("psi", k)) for k in range(1, c.K + 1)]))]
    for k in range(1, c.K + 1):
        a = float(alpha[k - 1])
        out.append((f"f2[{k}]", psi_terms(c, a, k)))
        rc = _round_consts(c, a, k)
        if c.use_h1 and a < 1.0:
            f3, f4 = h_pair(c, "h1", k, c.hp.tau, rc["B1"])
            out += [(f"f3[h1,{k}]", f3), (f"f4[h1,{k}]", f4)]
        if c.use_h2:
            f3, f4 = h_pair(c, "h2", k, rc["B7"], rc["B2"])
            out += [(f"f3[h2,{k}]", f3), (f"f4[h2,{k}]", f4)]
        if a < 1.0:
            f5, f6 = eps_pair(c, a, k)
            out += [(f"f5[{k}]", f5), (f"f6[{k}]", f6)]
        out.append((f"f7[{k}]", sigma_posy(c, k)))
        for i in range(c.I):
            out.append((f"f8[{k},{i}]", p_posy(c, k, i)))
    return out


def active_keys(c: _Consts, alpha) -> list:
    """Variables present in the subproblem for this combiner schedule."""
    keys = [("gap",), ("P1",), ("Psi",), ("m1",), ("m2",), ("m3",), ("s1",)]
    for k in range(1, c.K + 1):
        a = float(alpha[k - 1])
        keys += [("Tcmp", k), ("Ecmp", k), ("sigma", k), ("psi", k), ("s2", k), ("s6", k)]
        if c.use_tx:
            keys += [("Ttx", k), ("Etx", k)]
        if c.use_h1 and a < 1.0:
            keys += [("h1", k), ("s3", k)]
        if c.use_h2:
            keys += [("h2", k), ("s4", k)]
        if a < 1.0:
            keys += [("eps", k), ("s5", k)]
        for i in range(c.I):
            keys += [("n", k, i), ("P", k, i), ("Ecmp_i", k, i), ("s7", k, i)]
            if c.use_tx:
                keys.append(("Etx_i", k, i))
    return keys


def objective_posy(c: _Consts, alpha, pen: PenaltyConfig) -> Posynomial:
    w = c.weights
    terms = []
    for k in range(1, c.K + 1):
        terms += [(w.c1, V(("Ecmp", k))), (w.c2, V(("Tcmp", k)))]
        if c.use_tx:
            terms += [(w.c1, V(("Etx", k))), (w.c2, V(("Ttx", k)))]
    terms.append((w.c3, V(("gap",))))
    keys = set(active_keys(c, alpha))
    for key in sorted(keys, key=repr):
        if key[0] == "s1":
            terms.append((pen.w1, V(key)))
        elif key[0] in ("s2", "s3", "s4", "s5", "s6"):
            terms.append((pen.w_round, V(key)))
        elif key[0] == "s7":
            terms.append((pen.w7, V(key)))
    return _posy(terms)


def penalty_floor(c: _Consts, alpha, pen: PenaltyConfig) -> float:
    """Value of the penalty terms when every slack sits at its minimum of 1."""
    weights = {"s1": pen.w1, "s7": pen.w7}
    return float(sum(weights.get(key[0], pen.w_round) for key in set(active_keys(c, alpha))
                     if key[0] in ("s1", "s2", "s3", "s4", "s5", "s6", "s7")))


def build_subproblem(hp: HyperParams, devices: Sequence[DeviceProfile], weights: CostWeights,
                     alpha_hat: CombinerSchedule, anchor: GpState, pen: PenaltyConfig,
                     consts: _Consts | None = None) -> GpProgram:
    """Condensed GP at ``anchor`` for fixed combiner weights ``alpha_hat``."""
    alpha = np.asarray(alpha_hat, dtype=float).reshape(-1)
    c = consts or make_consts(hp, devices, weights)
    if alpha.size != c.K:
        raise ValueError(f"combiner schedule has {alpha.size} rounds, expected {c.K}")
    if np.any(alpha <= 0) or np.any(alpha > 1):
        raise ValueError("combiner weights must lie in (0, 1]")
    av = anchor.values
    L = hp.lipschitz
    ephi = c.horizon_scale
    prog = GpProgram(objective=objective_posy(c, alpha, pen))

    # energy and time accounting
    for k in range(1, c.K + 1):
        prog.add_le(f"C1[{k}]", Posynomial([V(("Ecmp_i", k, i)) for i in range(c.I)]) / V(("Ecmp", k)))
        if c.use_tx:
            prog.add_le(f"C2[{k}]", Posynomial([V(("Etx_i", k, i)) for i in range(c.I)]) / V(("Etx", k)))
        for i in range(c.I):
            prog.add_eq(f"C4[{k},{i}]", V(("n", k, i)) * c.e_datum[i] / V(("Ecmp_i", k, i)))
            if c.use_tx:
                prog.add_eq(f"C5[{k},{i}]", Monomial(c.e_tx[i]) / V(("Etx_i", k, i)))
            prog.add_le(f"C6[{k},{i}]", V(("n", k, i)) * c.t_cmp[i] / V(("Tcmp", k)))
            if c.use_tx:
                prog.add_le(f"C7[{k},{i}]", Monomial(c.t_tx[i]) / V(("Ttx", k)))
    for i in range(c.I):
        terms = [V(("Ecmp_i", k, i)) for k in range(1, c.K + 1)]
        if c.use_tx:
            terms += [V(("Etx_i", k, i)) for k in range(1, c.K + 1)]
        prog.add_le(f"C3[{i}]", Posynomial(terms) / c.battery[i])

    # loss-gap chain
    prog.add_le("C8.1", (V(("m1",)) + V(("P1",)) + V(("Psi",)) * L) / V(("gap",)))
    prog.add_eq("C8.2", (V(("m1",)) * (2 * ephi)).inverse())
    prog.add_le("C8.3", (V(("m2",)) + V(("m3",)) * V(("Psi",))) / V(("P1",), 2))
    prog.add_eq("C8.4", V(("m2",), -1) * (1.0 / (2 * ephi)) ** 2)
    prog.add_eq("C8.5", V(("m3",), -1) * (L / ephi))
    f1 = Posynomial([V(("psi", k)) for k in range(1, c.K + 1)])
    prog.add_le("C8.6", f1 / V(("Psi",)))
    prog.add_le("C8.7", V(("Psi",)) / (V(("s1",)) * condense(f1, av)))
    for k in range(1, c.K + 1):
        a = float(alpha[k - 1])
        rc = _round_consts(c, a, k)
        f2 = psi_terms(c, a, k)
        prog.add_le(f"C8.8[{k}]", f2 / V(("psi", k)))
        prog.add_le(f"C8.9[{k}]", V(("psi", k)) / (V(("s2", k)) * condense(f2, av)))
        if c.use_h1 and a < 1.0:
            f3, f4 = h_pair(c, "h1", k, hp.tau, rc["B1"])
            prog.add_le(f"C8.10[{k}]", f4 / condense(f3, av))
            prog.add_le(f"C8.11[{k}]", f3 / (V(("s3", k)) * condense(f4, av)))
        if c.use_h2:
            f3, f4 = h_pair(c, "h2", k, rc["B7"], rc["B2"])
            prog.add_le(f"C8.12[{k}]", f4 / condense(f3, av))
            prog.add_le(f"C8.13[{k}]", f3 / (V(("s4", k)) * condense(f4, av)))
        if a < 1.0:
            f5, f6 = eps_pair(c, a, k)
            prog.add_le(f"C8.14[{k}]", f6 / condense(f5, av))
            prog.add_le(f"C8.15[{k}]", f5 / (V(("s5", k)) * condense(f6, av)))
        f7 = sigma_posy(c, k)
        prog.add_le(f"C8.16[{k}]", f7 / V(("sigma", k)))
        prog.add_le(f"C8.17[{k}]", V(("sigma", k)) / (V(("s6", k)) * condense(f7, av)))
        for i in range(c.I):
            f8 = p_posy(c, k, i)
            prog.add_le(f"C8.18[{k},{i}]", f8)
            prog.add_le(f"C8.19[{k},{i}]", (V(("s7", k, i)) * condense(f8, av)).inverse())

    # boxes
    for key in active_keys(c, alpha):
        name = key[0]
        if name == "n":
            prog.box(key, 1.0, float(c.sizes[key[2]]))
        elif name == "P":
            prog.box(key, P_FLOOR, 1.0)
        elif name.startswith("s") and name != "sigma":
            prog.box(key, 1.0, SLACK_CAP)
        else:
            v = av[key]
            prog.box(key, v * math.exp(-BOX_SPAN), v * math.exp(BOX_SPAN))
    return prog


def lift(c: _Consts, batches, alpha, s7=None, kappa: float = 0.0, slack: float = 1.0,
         base: GpState | None = None) -> GpState:
    """Point of the condensed problem determined by minibatches, combiner weights and s7.

    With ``kappa = 0`` and ``slack = 1`` every lower-bounding constraint holds with
    equality (this is the condensation anchor). With small ``kappa > 0`` and
    ``slack > 1`` the point is strictly feasible for the subproblem anchored at the
    ``kappa = 0`` point, which makes it a valid interior start. Pass that anchor
    as ``base`` so the start's P values shrink from the anchor's rather than
    being recomputed (they are nearly free near full batch).
    """
    hp = c.hp
    n = np.array(batches, dtype=float).reshape(c.K, c.I)
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    s7 = np.ones_like(n) if s7 is None else np.asarray(s7, dtype=float).reshape(c.K, c.I)
    up = 1.0 + kappa
    v: dict = {}
    ephi = c.horizon_scale
    v[("m1",)] = 1.0 / (2 * ephi)
    v[("m2",)] = v[("m1",)] ** 2
    v[("m3",)] = hp.lipschitz / ephi
    psi_sum = 0.0
    for k in range(1, c.K + 1):
        a = float(alpha[k - 1])
        rc = _round_consts(c, a, k)
        sig = 0.0
        for i in range(c.I):
            nk = n[k - 1, i]
            N = c.sizes[i]
            v[("n", k, i)] = nk
            v[("s7", k, i)] = s7[k - 1, i] * (slack if kappa > 0 else 1.0)
            # largest P allowed by the upper row, shrunk to keep it strict
            p_hi = math.sqrt(max((N - nk) / (N * nk), 0.0))
            p_lo = math.sqrt(max(1.0 / s7[k - 1, i] - nk / N, 0.0) / nk)
            p = max(p_lo, P_FLOOR * 10) if kappa == 0 else max(p_lo, P_FLOOR * 10) * (1 - kappa)
            if base is not None:
                p = max(base.values[("P", k, i)] * (1 - kappa), P_FLOOR * 1.01)
            p = min(p, p_hi * (1 - kappa)) if p_hi > 0 else p
            v[("P", k, i)] = p
            v[("Ecmp_i", k, i)] = c.e_datum[i] * nk
            sig += c.noise_coef[i] * p
            if c.use_tx:
                v[("Etx_i", k, i)] = float(c.e_tx[i])
        v[("Ecmp", k)] = float(c.e_datum @ n[k - 1]) * up
        v[("Tcmp", k)] = float(np.max(c.t_cmp * n[k - 1])) * up
        if c.use_tx:
            v[("Etx", k)] = float(c.e_tx.sum()) * up
            v[("Ttx", k)] = float(np.max(c.t_tx)) * up
        sig *= up
        v[("sigma", k)] = sig
        terms = {}
        if c.use_h1 and a < 1.0:
            v[("h1", k)] = float(h_term(hp.tau, sig, hp)) * up
        if c.use_h2:
            v[("h2", k)] = float(h_term(rc["B7"], sig, hp)) * up
        if a < 1.0:
            v[("eps", k)] = float(epsilon_term(k, a, sig, hp)) * up
        terms = psi_terms(c, a, k)
        v[("psi", k)] = terms(v) * up
        psi_sum += v[("psi", k)]
        for s in ("s2", "s3", "s4", "s5", "s6"):
            v[(s, k)] = slack if kappa > 0 else 1.0
    v[("Psi",)] = psi_sum * up
    v[("P1",)] = math.sqrt(v[("m2",)] + v[("m3",)] * v[("Psi",)]) * up
    v[("gap",)] = (v[("m1",)] + v[("P1",)] + hp.lipschitz * v[("Psi",)]) * up
    v[("s1",)] = slack if kappa > 0 else 1.0
    keys = active_keys(c, alpha)
    return GpState(values={key: v[key] for key in keys}, alpha=alpha.copy(), rounds=c.K, devices=c.I)
