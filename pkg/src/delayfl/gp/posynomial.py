"""Monomials and posynomials over named positive variables, plus AM-GM condensation.

Variables are any hashable keys. A monomial is ``c * prod(v**a_v)`` with c > 0.
"""

from __future__ import annotations

import math
from typing import Hashable, Iterable, Mapping


class Monomial:
    __slots__ = ("coef", "exps")

    def __init__(self, coef: float, exps: Mapping[Hashable, float] | None = None):
        coef = float(coef)
        if not (coef > 0 and math.isfinite(coef)):
            raise ValueError(f"monomial coefficient must be positive and finite, got {coef}")
        self.coef = coef
        self.exps = {k: float(a) for k, a in (exps or {}).items() if a != 0}

    @classmethod
    def var(cls, key: Hashable, power: float = 1.0) -> "Monomial":
        return cls(1.0, {key: power})

    def __mul__(self, other):
        if isinstance(other, Monomial):
            exps = dict(self.exps)
            for k, a in other.exps.items():
                exps[k] = exps.get(k, 0.0) + a
            return Monomial(self.coef * other.coef, exps)
        if isinstance(other, Posynomial):
            return other * self
        return Monomial(self.coef * float(other), self.exps)

    __rmul__ = __mul__

    def __pow__(self, p: float) -> "Monomial":
        return Monomial(self.coef**p, {k: a * p for k, a in self.exps.items()})

    def inverse(self) -> "Monomial":
        return self**-1

    def __truediv__(self, other):
        if isinstance(other, Monomial):
            return self * other.inverse()
        return Monomial(self.coef / float(other), self.exps)

    def __add__(self, other):
        return Posynomial([self]) + other

    __radd__ = __add__

    def variables(self) -> set:
        return set(self.exps)

    def log_value(self, values: Mapping[Hashable, float]) -> float:
        return math.log(self.coef) + sum(a * math.log(values[k]) for k, a in self.exps.items())

    def __call__(self, values: Mapping[Hashable, float]) -> float:
        return math.exp(self.log_value(values))

    def __repr__(self):
        body = " ".join(f"{k}^{a:g}" for k, a in self.exps.items())
        return f"Monomial({self.coef:.6g} {body})"


class Posynomial:
    __slots__ = ("terms",)

    def __init__(self, terms: Iterable[Monomial]):
        self.terms = [t for t in terms]
        if not self.terms:
            raise ValueError("posynomial needs at least one term")

    def __add__(self, other):
        if isinstance(other, Monomial):
            return Posynomial(self.terms + [other])
        if isinstance(other, Posynomial):
            return Posynomial(self.terms + other.terms)
        return Posynomial(self.terms + [Monomial(other)])

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Monomial) or not isinstance(other, Posynomial):
            return Posynomial([t * other for t in self.terms])
        return Posynomial([a * b for a in self.terms for b in other.terms])

    __rmul__ = __mul__

    def __truediv__(self, m):
        if isinstance(m, Posynomial):
            raise TypeError("division by a posynomial is not a posynomial")
        return Posynomial([t / m for t in self.terms])

    def variables(self) -> set:
        out = set()
        for t in self.terms:
            out |= t.variables()
        return out

    def __call__(self, values: Mapping[Hashable, float]) -> float:
        return sum(t(values) for t in self.terms)

    def __len__(self):
        return len(self.terms)

    def __repr__(self):
        return " + ".join(repr(t) for t in self.terms)


def as_posynomial(p) -> Posynomial:
    return Posynomial([p]) if isinstance(p, Monomial) else p


def condense(p, anchor: Mapping[Hashable, float]) -> Monomial:
    """Best local monomial under-estimator of ``p`` at ``anchor`` (weighted AM-GM).

    With lambda_j = q_j(anchor) / p(anchor), returns prod_j (q_j / lambda_j)**lambda_j.
    The result never exceeds ``p`` on the positive orthant and matches it at the anchor.
    """
    p = as_posynomial(p)
    vals = []
    for t in p.terms:
        try:
            v = t(anchor)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"anchor does not give a positive value to {t}") from exc
        if not (v > 0 and math.isfinite(v)):
            raise ValueError(f"anchor makes term {t} evaluate to {v}")
        vals.append(v)
    if len(vals) == 1:
        return p.terms[0]
    total = math.fsum(vals)
    log_coef = 0.0
    exps: dict = {}
    for t, v in zip(p.terms, vals):
        lam = v / total
        log_coef += lam * (math.log(t.coef) - math.log(lam))
        for k, a in t.exps.items():
            exps[k] = exps.get(k, 0.0) + lam * a
    return Monomial(math.exp(log_coef), exps)
