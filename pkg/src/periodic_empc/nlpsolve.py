"""Smooth box-constrained minimization with general inequality constraints.

An augmented-Lagrangian outer loop handles the general constraints; each
subproblem is solved by a projected quasi-Newton method (BFGS on the free
variables, projected gradient on the active ones) with an Armijo search along
the projection arc. Problems here are small and dense (dimension <= ~50).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max-iter"


class EvaluationFailure(RuntimeError):
    def __init__(self, message, x):
        super().__init__(message)
        self.x = np.array(x, dtype=float)


@dataclass
class Constraint:
    """Vector inequality ``fun(x) <= 0`` with Jacobian ``jac(x)`` (k x dim)."""

    fun: Callable
    jac: Callable
    name: str = ""

    @classmethod
    def linear(cls, A, b, name=""):
        """``A @ x <= b``."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        return cls(lambda x: A @ x - b, lambda x: A, name)


@dataclass
class Coupling:
    """Two-sided constraint ``|fun(x)| <= tol`` elementwise."""

    fun: Callable
    jac: Callable
    tol: float = 0.0
    name: str = ""

    def as_constraints(self):
        return [
            Constraint(lambda x: self.fun(x) - self.tol, self.jac, self.name + "+"),
            Constraint(lambda x: -self.fun(x) - self.tol, lambda x: -self.jac(x), self.name + "-"),
        ]


@dataclass
class SmoothProblem:
    """Minimize ``objective(x) -> (value, gradient)`` subject to bounds and constraints."""

    dim: int
    objective: Callable
    lower: np.ndarray
    upper: np.ndarray
    constraints: Sequence[Constraint] = field(default_factory=list)
    couplings: Sequence[Coupling] = field(default_factory=list)

    def __post_init__(self):
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (self.dim,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (self.dim,)).copy()
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    def inequalities(self):
        out = list(self.constraints)
        for c in self.couplings:
            out.extend(c.as_constraints())
        return out


@dataclass(frozen=True)
class SolverConfig:
    max_outer: int = 30
    max_inner: int = 200
    max_total_inner: int = 2000
    ctol: float = 1e-6
    gtol: float = 1e-6
    penalty0: float = 10.0
    penalty_growth: float = 10.0
    armijo: float = 1e-4
    backtrack: float = 0.5
    restarts: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("max_outer", "max_inner", "max_total_inner", "ctol", "gtol", "penalty0",
                     "armijo", "backtrack"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SolverConfig.{name} must be positive")
        if not self.penalty_growth > 1:
            raise ValueError("SolverConfig.penalty_growth must exceed 1")
        if not self.backtrack < 1:
            raise ValueError("SolverConfig.backtrack must be below 1")


@dataclass
class SolverResult:
    x: np.ndarray
    objective: float
    status: str
    max_violation: float
    iterations: int
    n_evals: int
    pg_norm: float = float("nan")
    multipliers: np.ndarray | None = None

    @property
    def success(self):
        return self.status == OPTIMAL


def finite_difference_gradient(fun, x, step=1e-6):
    """Central-difference gradient; ``fun`` may return a scalar or ``(value, grad)``."""
    x = np.asarray(x, dtype=float)

    def value(z):
        v = fun(z)
        return float(v[0] if isinstance(v, tuple) else v)

    g = np.zeros_like(x)
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (value(xp) - value(xm)) / (2 * h)
    return g


def _constraint_values(cons, x):
    if not cons:
        return np.zeros(0)
    return np.concatenate([np.atleast_1d(np.asarray(c.fun(x), dtype=float)) for c in cons])


def _constraint_jacobian(cons, x, dim):
    if not cons:
        return np.zeros((0, dim))
    return np.vstack([np.atleast_2d(np.asarray(c.jac(x), dtype=float)).reshape(-1, dim) for c in cons])


def check_feasible(problem, x, tol=None):
    """Re-evaluate bounds and every constraint at ``x``.

    Returns ``(feasible, max_violation)`` with non-positive violations
    reported as 0.
    """
    tol = SolverConfig().ctol if tol is None else tol
    x = np.asarray(x, dtype=float)
    viol = [0.0]
    viol.append(float(np.max(problem.lower - x, initial=-np.inf)))
    viol.append(float(np.max(x - problem.upper, initial=-np.inf)))
    for c in problem.inequalities():
        v = np.atleast_1d(np.asarray(c.fun(x), dtype=float))
        if v.size:
            viol.append(float(np.max(v)))
    worst = max(viol)
    if not np.isfinite(worst):
        return False, float("inf")
    return worst <= tol, worst


class _Scaled:
    """Problem in unit-box coordinates with a gradient-normalized objective."""

    def __init__(self, problem):
        self.p = problem
        lo, hi = problem.lower, problem.upper
        finite = np.isfinite(lo) & np.isfinite(hi) & (hi > lo)
        self.shift = np.where(np.isfinite(lo), lo, 0.0)
        self.width = np.where(finite, hi - lo, 1.0)
        self.lo = np.where(np.isfinite(lo), 0.0, -np.inf)
        self.hi = np.where(np.isfinite(hi), (hi - self.shift) / self.width, np.inf)
        self.cons = problem.inequalities()
        self.fscale = 1.0
        self.n_evals = 0

    def to_x(self, z):
        return self.shift + self.width * z

    def to_z(self, x):
        return (x - self.shift) / self.width

    def objective(self, z):
        x = self.to_x(z)
        self.n_evals += 1
        try:
            f, g = self.p.objective(x)
        except (FloatingPointError, ArithmeticError, ValueError) as exc:
            raise EvaluationFailure(f"objective evaluation failed: {exc}", x) from exc
        return self.fscale * float(f), self.fscale * np.asarray(g, dtype=float) * self.width

    def constraints(self, z):
        x = self.to_x(z)
        return _constraint_values(self.cons, x)

    def constraint_jac(self, z):
        x = self.to_x(z)
        return _constraint_jacobian(self.cons, x, self.p.dim) * self.width


def _projected_gradient(z, g, lo, hi):
    return z - np.clip(z - g, lo, hi)


def _inner_solve(fun, z, lo, hi, cfg, gtol, max_iter):
    """Projected BFGS on ``fun`` over the box ``[lo, hi]``.

    Returns ``(z, f, g, iterations)``; ``f`` never increases between accepted
    iterates.
    """
    n = z.size
    f, g = fun(z)
    if not np.isfinite(f):
        raise EvaluationFailure("objective is not finite at the starting point", z)
    B = np.eye(n)
    fresh = True
    it = 0
    for it in range(1, max_iter + 1):
        pg = _projected_gradient(z, g, lo, hi)
        pg_norm = np.max(np.abs(pg), initial=0.0)
        if pg_norm <= gtol:
            it -= 1
            break
        eps = min(pg_norm, 1e-3)
        active = ((z <= lo + eps) & (g > 0)) | ((z >= hi - eps) & (g < 0))
        free = ~active
        d = -g.copy()
        if np.any(free):
            Bff = B[np.ix_(free, free)]
            try:
                d[free] = -np.linalg.solve(Bff, g[free])
            except np.linalg.LinAlgError:
                d[free] = -g[free]
            if g[free] @ d[free] >= 0:
                B = np.eye(n)
                fresh = True
                d = -g.copy()
        accepted = False
        alpha = 1.0
        for _ in range(60):
            zt = np.clip(z + alpha * d, lo, hi)
            ft, gt = fun(zt)
            if np.isfinite(ft) and ft <= f + cfg.armijo * (g @ (zt - z)):
                accepted = True
                break
            alpha *= cfg.backtrack
        if not accepted:
            if fresh:
                break
            B = np.eye(n)
            fresh = True
            continue
        s = zt - z
        y = gt - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if fresh:
                B = np.eye(n) * (y @ y) / sy
                fresh = False
            Bs = B @ s
            B = B - np.outer(Bs, Bs) / (s @ Bs) + np.outer(y, y) / sy
        stalled = abs(f - ft) <= 1e-15 * max(1.0, abs(f)) and np.max(np.abs(s)) <= 1e-15
        z, f, g = zt, ft, gt
        if stalled:
            break
    return z, f, g, it


def minimize(problem, x0, config=None):
    """Minimize a :class:`SmoothProblem` from ``x0``.

    The objective is rescaled so its largest gradient entry at the start is
    1 (in unit-box coordinates), which makes the iterates invariant to a
    positive scaling of the objective; stopping tests apply to the scaled
    problem and the returned multipliers are in original units.

    Status is ``optimal`` when the constraint violation is within ``ctol``
    and the projected Lagrangian gradient within ``gtol``, ``infeasible``
    when no point within ``ctol`` was reached, and ``max-iter`` otherwise
    (including when ``max_total_inner`` iterations are used up).
    """
    cfg = config or SolverConfig()
    best = _minimize_once(problem, np.asarray(x0, dtype=float), cfg)
    if cfg.restarts:
        rng = np.random.default_rng(cfg.seed)
        for _ in range(cfg.restarts):
            lo = np.where(np.isfinite(problem.lower), problem.lower, best.x - 1.0)
            hi = np.where(np.isfinite(problem.upper), problem.upper, best.x + 1.0)
            trial = _minimize_once(problem, rng.uniform(lo, hi), cfg)
            if _better(trial, best):
                best = trial
    return best


def _better(a, b):
    rank = {OPTIMAL: 0, MAX_ITER: 1, INFEASIBLE: 2}
    if rank[a.status] != rank[b.status]:
        return rank[a.status] < rank[b.status]
    if a.status == INFEASIBLE:
        return a.max_violation < b.max_violation
    return a.objective < b.objective


def _minimize_once(problem, x0, cfg):
    sp = _Scaled(problem)
    z = np.clip(sp.to_z(x0), sp.lo, sp.hi)
    f0, g0 = sp.objective(z)
    gmax = np.max(np.abs(g0), initial=0.0)
    if not np.isfinite(f0) or not np.isfinite(gmax):
        raise EvaluationFailure("objective is not finite at the starting point", sp.to_x(z))
    sp.fscale = 1.0 / gmax if gmax > 0 else 1.0

    n_con = sum(
        np.atleast_1d(np.asarray(c.fun(sp.to_x(z)))).size for c in sp.cons
    )
    lam = np.zeros(n_con)
    rho = cfg.penalty0
    total_it = 0

    def augmented(zz):
        f, g = sp.objective(zz)
        if n_con == 0 or not np.isfinite(f):
            return f, g
        c = sp.constraints(zz)
        t = np.maximum(0.0, lam + rho * c)
        val = f + (t @ t - lam @ lam) / (2 * rho)
        if np.any(t > 0):
            g = g + sp.constraint_jac(zz)[t > 0].T @ t[t > 0]
        return val, g

    prev_viol = np.inf
    status = MAX_ITER
    pg_norm = np.inf
    viol = np.inf
    for outer in range(cfg.max_outer):
        budget = min(cfg.max_inner, cfg.max_total_inner - total_it)
        z, _, g, it = _inner_solve(augmented, z, sp.lo, sp.hi, cfg, cfg.gtol, budget)
        total_it += it
        pg_norm = float(np.max(np.abs(_projected_gradient(z, g, sp.lo, sp.hi)), initial=0.0))
        c = sp.constraints(z) if n_con else np.zeros(0)
        viol = float(max(0.0, np.max(c, initial=0.0)))
        logger.debug("outer %d: inner %d, violation %.3e, pg %.3e, rho %.1e", outer, it, viol,
                     pg_norm, rho)
        if n_con:
            lam = np.maximum(0.0, lam + rho * c)
        if viol <= cfg.ctol and pg_norm <= cfg.gtol:
            status = OPTIMAL
            break
        if n_con == 0 or total_it >= cfg.max_total_inner:
            break
        if viol > 0.25 * prev_viol and viol > cfg.ctol:
            rho *= cfg.penalty_growth
        prev_viol = viol
    x = sp.to_x(z)
    _, box_viol = check_feasible(SmoothProblem(problem.dim, problem.objective,
                                               problem.lower, problem.upper), x, np.inf)
    viol = max(viol, box_viol)
    if status != OPTIMAL:
        status = INFEASIBLE if viol > cfg.ctol else MAX_ITER
    f_final = float(problem.objective(x)[0])
    with np.errstate(over="ignore"):
        mult = lam / sp.fscale
    return SolverResult(x, f_final, status, viol, total_it, sp.n_evals, pg_norm, mult)
