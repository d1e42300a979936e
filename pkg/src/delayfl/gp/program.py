"""A geometric program in standard form and its log-space compilation.

    minimise    p0(v)
    subject to  p_c(v) <= 1        (posynomials)
                m_e(v)  = 1        (monomials)
                lo_v <= v <= hi_v  (boxes)

After x = log v every inequality becomes log-sum-exp(A_c x + b_c) <= 0 and every
equality an affine row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable

import numpy as np
import scipy.sparse as sp

from .posynomial import Monomial, Posynomial, as_posynomial


@dataclass
class GpProgram:
    objective: Posynomial
    inequalities: list[tuple[str, Posynomial]] = field(default_factory=list)
    equalities: list[tuple[str, Monomial]] = field(default_factory=list)
    boxes: dict[Hashable, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        self.objective = as_posynomial(self.objective)

    def add_le(self, label: str, p) -> None:
        self.inequalities.append((label, as_posynomial(p)))

    def add_eq(self, label: str, m: Monomial) -> None:
        if not isinstance(m, Monomial):
            raise TypeError("equality constraints must be monomials")
        self.equalities.append((label, m))

    def box(self, key: Hashable, lo: float, hi: float) -> None:
        if not 0 < lo < hi:
            raise ValueError(f"bad box for {key}: [{lo}, {hi}]")
        self.boxes[key] = (lo, hi)

    def variables(self) -> list:
        seen = dict.fromkeys(self.objective.variables())
        for _, p in self.inequalities:
            seen.update(dict.fromkeys(p.variables()))
        for _, m in self.equalities:
            seen.update(dict.fromkeys(m.variables()))
        seen.update(dict.fromkeys(self.boxes))
        return list(seen)

    def counts(self) -> dict[str, int]:
        """Number of constraints per label prefix (the text before the first '[')."""
        out: dict[str, int] = {}
        for label, _ in self.inequalities + self.equalities:
            head = label.split("[")[0]
            out[head] = out.get(head, 0) + 1
        return out

    def compile(self) -> "CompiledGp":
        return CompiledGp(self)


def _stack(posys: list[Posynomial], index: dict) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
    rows, cols, vals, b, seg = [], [], [], [], []
    r = 0
    for c, p in enumerate(posys):
        for t in p.terms:
            for k, a in t.exps.items():
                rows.append(r)
                cols.append(index[k])
                vals.append(a)
            b.append(math.log(t.coef))
            seg.append(c)
            r += 1
    A = sp.csr_matrix((vals, (rows, cols)), shape=(r, len(index)))
    return A, np.array(b), np.array(seg, dtype=np.int64)


class CompiledGp:
    """Arrays describing a GpProgram in log coordinates."""

    def __init__(self, prog: GpProgram):
        self.program = prog
        self.keys = prog.variables()
        self.index = {k: j for j, k in enumerate(self.keys)}
        nv = len(self.keys)
        self.A0, self.b0, _ = _stack([prog.objective], self.index)
        self.labels = [lab for lab, _ in prog.inequalities]
        self.A, self.b, self.seg = _stack([p for _, p in prog.inequalities], self.index)
        self.m = len(prog.inequalities)
        # indicator of term -> constraint, used to sum per constraint
        self.S = sp.csr_matrix((np.ones(self.seg.size), (self.seg, np.arange(self.seg.size))),
                               shape=(self.m, self.seg.size))
        self.seg_start = np.searchsorted(self.seg, np.arange(self.m)) if self.m else np.zeros(0, int)
        eq_rows, eq_cols, eq_vals, beq = [], [], [], []
        for r, (_, mono) in enumerate(prog.equalities):
            for k, a in mono.exps.items():
                eq_rows.append(r)
                eq_cols.append(self.index[k])
                eq_vals.append(a)
            beq.append(-math.log(mono.coef))
        self.Aeq = sp.csr_matrix((eq_vals, (eq_rows, eq_cols)), shape=(len(beq), nv))
        self.beq = np.array(beq)
        self.eq_labels = [lab for lab, _ in prog.equalities]
        lo = np.full(nv, -np.inf)
        hi = np.full(nv, np.inf)
        for k, (a, c) in prog.boxes.items():
            lo[self.index[k]] = math.log(a)
            hi[self.index[k]] = math.log(c)
        self.lo, self.hi = lo, hi

    @property
    def nvars(self) -> int:
        return len(self.keys)

    def to_log(self, values) -> np.ndarray:
        return np.array([math.log(values[k]) for k in self.keys])

    def to_values(self, x) -> dict:
        return {k: float(math.exp(v)) for k, v in zip(self.keys, x)}

    def constraint_logs(self, x) -> np.ndarray:
        """log p_c(v) for every inequality (<= 0 means satisfied)."""
        if self.m == 0:
            return np.zeros(0)
        z = self.A @ x + self.b
        mx = np.maximum.reduceat(z, self.seg_start)
        s = np.add.reduceat(np.exp(z - mx[self.seg]), self.seg_start)
        return mx + np.log(s)

    def objective_value(self, x) -> float:
        z = self.A0 @ x + self.b0
        mx = z.max()
        return float(np.exp(mx) * np.exp(z - mx).sum())

    def equality_residuals(self, x) -> np.ndarray:
        return self.Aeq @ x - self.beq
