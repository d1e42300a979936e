"""Interior-point solver for a compiled geometric program.

Works in log coordinates x = log v and minimises log p0(x). Each iteration takes
a Newton step on the barrier-perturbed KKT conditions (primal-dual form of the
log-barrier method), keeps the equality rows through the KKT system, and uses a
backtracking line search on the residual norm.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .program import CompiledGp

log = logging.getLogger(__name__)


class GpInfeasibleError(RuntimeError):
    """The program has no strictly feasible point (with a human-readable certificate)."""


@dataclass
class InnerResult:
    x: np.ndarray
    values: dict
    objective: float
    gap: float
    newton_steps: int
    converged: bool
    max_violation: float
    equality_residual: float
    dual_residual: float


class _Kkt:
    def __init__(self, cgp: CompiledGp):
        self.g = cgp
        self.lo_idx = np.flatnonzero(np.isfinite(cgp.lo))
        self.hi_idx = np.flatnonzero(np.isfinite(cgp.hi))
        self.m = cgp.m + self.lo_idx.size + self.hi_idx.size
        self.Aeq = cgp.Aeq.toarray()
        self.Aeq_s = cgp.Aeq.tocsr()

    def f(self, x):
        g = self.g
        return np.concatenate([g.constraint_logs(x), g.lo[self.lo_idx] - x[self.lo_idx],
                               x[self.hi_idx] - g.hi[self.hi_idx]])

    def split(self, lam):
        a = self.g.m
        b = a + self.lo_idx.size
        return lam[:a], lam[a:b], lam[b:]

    def first_order(self, x):
        g = self.g
        z0 = g.A0 @ x + g.b0
        e0 = np.exp(z0 - z0.max())
        w0 = e0 / e0.sum()
        grad0 = g.A0.T @ w0
        if g.m:
            z = g.A @ x + g.b
            mx = np.maximum.reduceat(z, g.seg_start)
            e = np.exp(z - mx[g.seg])
            s = np.add.reduceat(e, g.seg_start)
            F = mx + np.log(s)
            w = e / s[g.seg]
            G = g.S @ g.A.multiply(w[:, None])
        else:
            F, w, G = np.zeros(0), np.zeros(0), None
        f = np.concatenate([F, g.lo[self.lo_idx] - x[self.lo_idx], x[self.hi_idx] - g.hi[self.hi_idx]])
        return f, w0, grad0, w, G

    def dual_residual(self, grad0, G, lam, nu):
        lp, ll, lh = self.split(lam)
        r = grad0.copy()
        if G is not None:
            r += G.T @ lp
        np.subtract.at(r, self.lo_idx, ll)
        np.add.at(r, self.hi_idx, lh)
        if self.Aeq.shape[0]:
            r += self.Aeq.T @ nu
        return r

    def residuals(self, x, lam, nu, t):
        f, _, grad0, _, G = self.first_order(x)
        rd = self.dual_residual(grad0, G, lam, nu)
        rc = -lam * f - 1.0 / t
        rp = self.Aeq @ x - self.g.beq if self.Aeq.shape[0] else np.zeros(0)
        return f, rd, rc, rp


def solve_inner(cgp: CompiledGp, x0, inner_tol: float = 1e-10, max_inner: int = 200,
                mu: float = 10.0, feas_tol: float = 1e-9) -> InnerResult:
    """Minimise the compiled program from the strictly feasible log-point ``x0``.

    Stops when the surrogate duality gap (a relative gap on p0) is below
    ``inner_tol`` and the primal and dual residuals are below ``feas_tol``.
    Hitting ``max_inner`` returns the last iterate with ``converged=False``.
    """
    kk = _Kkt(cgp)
    g = cgp
    x = np.array(x0, dtype=float)
    f = kk.f(x)
    if np.any(f >= 0):
        worst = int(np.argmax(f))
        where = g.labels[worst] if worst < g.m else "variable box"
        raise GpInfeasibleError(f"start point is not strictly feasible (worst row {where})")
    p = kk.Aeq.shape[0]
    if p and np.max(np.abs(cgp.equality_residuals(x))) > 1e-8:
        raise ValueError("start point violates the equality rows")
    m = kk.m
    if m == 0:
        raise ValueError("the program needs at least one inequality or variable box")
    nv = g.nvars
    lam = 1.0 / (-f) / m
    nu = np.zeros(p)
    steps = 0
    converged = False
    gap = float(-f @ lam)
    rd = np.zeros(nv)
    while steps < max_inner:
        f, w0, grad0, w, G = kk.first_order(x)
        gap = float(-f @ lam)
        rd = kk.dual_residual(grad0, G, lam, nu)
        rp = kk.Aeq @ x - g.beq if p else np.zeros(0)
        if gap <= inner_tol and np.linalg.norm(rd) <= feas_tol and (not p or np.linalg.norm(rp) <= feas_tol):
            converged = True
            break
        t = mu * m / gap
        lp, ll, lh = kk.split(lam)
        # Hessian of the Lagrangian plus the barrier-scaled Gauss-Newton term; the
        # objective's rank-one part -grad0 grad0^T is applied by Sherman-Morrison
        H = g.A0.T @ g.A0.multiply(w0[:, None])
        if g.m:
            d = -f[: g.m]
            H = H + g.A.T @ g.A.multiply((lp[g.seg] * w)[:, None])
            H = H + G.T @ G.multiply((lp / d - lp)[:, None])
        diag = np.zeros(nv)
        np.add.at(diag, kk.lo_idx, ll / -f[g.m: g.m + kk.lo_idx.size])
        np.add.at(diag, kk.hi_idx, lh / -f[g.m + kk.lo_idx.size:])
        H = H + sp.diags(diag)
        rc = -lam * f - 1.0 / t
        # eliminate the multiplier step: rhs = r_dual + Df^T diag(1/f) r_cent
        corr = rc / f
        rhs = rd.copy()
        if g.m:
            rhs += G.T @ corr[: g.m]
        np.subtract.at(rhs, kk.lo_idx, corr[g.m: g.m + kk.lo_idx.size])
        np.add.at(rhs, kk.hi_idx, corr[g.m + kk.lo_idx.size:])
        K = sp.bmat([[H, kk.Aeq_s.T], [kk.Aeq_s, None]], format="csc") if p else H.tocsc()
        u = np.concatenate([grad0, np.zeros(p)])
        b = -np.concatenate([rhs, rp])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            lu = spla.splu(K)
            zb = lu.solve(b)
            zu = lu.solve(u)
        sol = zb + zu * (u @ zb) / (1.0 - u @ zu)
        dx, dnu = sol[:nv], sol[nv:]
        # directional derivative of every constraint
        Dfdx = np.concatenate([G @ dx if g.m else np.zeros(0), -dx[kk.lo_idx], dx[kk.hi_idx]])
        dlam = -(lam * Dfdx) / f + corr
        neg = dlam < 0
        s = min(1.0, float(np.min(-lam[neg] / dlam[neg]))) if np.any(neg) else 1.0
        s *= 0.99
        while np.any(kk.f(x + s * dx) >= 0):
            s *= 0.5
            if s < 1e-16:
                break
        r0 = np.sqrt(rd @ rd + rc @ rc + (rp @ rp if p else 0.0))
        while s >= 1e-16:
            _, rd1, rc1, rp1 = kk.residuals(x + s * dx, lam + s * dlam, nu + s * dnu, t)
            if np.sqrt(rd1 @ rd1 + rc1 @ rc1 + (rp1 @ rp1 if p else 0.0)) <= (1 - 0.01 * s) * r0:
                break
            s *= 0.5
        steps += 1
        if s < 1e-16:
            log.warning("interior-point line search stalled (gap %.3g)", gap)
            break
        x = x + s * dx
        lam = lam + s * dlam
        nu = nu + s * dnu

    viol = cgp.constraint_logs(x)
    return InnerResult(
        x=x,
        values=cgp.to_values(x),
        objective=cgp.objective_value(x),
        gap=gap,
        newton_steps=steps,
        converged=converged,
        max_violation=float(max(viol.max(), 0.0)) if viol.size else 0.0,
        equality_residual=float(np.max(np.abs(cgp.equality_residuals(x)))) if p else 0.0,
        dual_residual=float(np.linalg.norm(rd)),
    )
