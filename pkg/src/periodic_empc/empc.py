"""Economic MPC with a horizon that always ends at the next midnight.

Each solve minimizes pumping cost plus exponential level barriers over the
remaining hours of the day, with hard input and level boxes and a terminal
ball around the end point of an optimal periodic (one-day) trajectory. When a
solve is infeasible the controller falls back to the second input of the
previous solution.

Arrays are time-major: state trajectories are ``(N + 1, n)`` and input
sequences ``(N, m)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import nlpsolve
from .nlpsolve import Constraint, Coupling, SmoothProblem, SolverConfig

logger = logging.getLogger(__name__)

EXP_CAP = 700.0
PERIODIC_TOL = 1e-6
DYNAMICS_TOL = 1e-9
# The terminal-ball re-check allows at most this fraction of r as slack, so a
# ball smaller than the solver can resolve is reported infeasible.
BALL_REL_SLACK = 1e-3

OPTIMAL = nlpsolve.OPTIMAL
INFEASIBLE = nlpsolve.INFEASIBLE
MAX_ITER = nlpsolve.MAX_ITER


class PeriodicInfeasible(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class MpcConfig:
    """Bounds, barrier parameters and horizon constants.

    ``a`` and ``b`` hold one value per level inequality, ordered
    ``[lower_1, upper_1, lower_2, upper_2, ...]``; scalars broadcast.
    """

    lower: np.ndarray
    upper: np.ndarray
    umax: np.ndarray
    a: np.ndarray = 80.0
    b: np.ndarray = 0.3
    r: float = 0.05
    dt: float = 1.0
    T_day: float = 24.0
    use_barrier: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        n = lower.size
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "umax", np.atleast_1d(np.asarray(self.umax, dtype=float)))
        object.__setattr__(self, "a", np.broadcast_to(np.asarray(self.a, dtype=float), (2 * n,)).copy())
        object.__setattr__(self, "b", np.broadcast_to(np.asarray(self.b, dtype=float), (2 * n,)).copy())
        if upper.shape != (n,):
            raise ValueError("lower and upper must have the same length")
        if np.any(lower >= upper):
            raise ValueError("each lower bound must be below its upper bound")
        if np.any(self.umax <= 0):
            raise ValueError("pump limits must be positive")
        if np.any(self.a <= 0) or np.any(self.b <= 0) or not self.r > 0:
            raise ValueError("barrier parameters and terminal radius must be positive")
        width = np.repeat(upper - lower, 2)
        if np.any(self.b >= width / 2):
            raise ValueError("barrier widths b must be below half the level band")
        steps = self.T_day / self.dt
        if not (self.dt > 0 and abs(steps - round(steps)) < 1e-9):
            raise ValueError("T_day must be an integer multiple of dt")

    @property
    def n(self):
        return self.lower.size

    @property
    def m(self):
        return self.umax.size

    @property
    def steps_per_day(self):
        return int(round(self.T_day / self.dt))

    def to_dict(self):
        return {
            "lower": self.lower.tolist(), "upper": self.upper.tolist(),
            "umax": self.umax.tolist(), "a": self.a.tolist(), "b": self.b.tolist(),
            "r": self.r, "dt": self.dt, "T_day": self.T_day,
        }


def horizon_length(t, T_day=24.0, dt=1.0):
    """Number of steps from ``t`` to the next midnight."""
    k = t / dt
    if t < 0 or abs(k - round(k)) > 1e-9:
        raise ValueError(f"time {t} is not on the {dt} h grid")
    per_day = int(round(T_day / dt))
    return per_day - int(round(k)) % per_day


def _barrier_exponents(h, config):
    h = np.asarray(h, dtype=float)
    C = np.empty(2 * h.size)
    C[0::2] = config.lower - h
    C[1::2] = h - config.upper
    return config.a * (C + config.b)


def _capped_exp(x):
    """``exp`` continued linearly above ``EXP_CAP`` (value and slope)."""
    over = x > EXP_CAP
    e = np.exp(np.minimum(x, EXP_CAP))
    val = np.where(over, e * (1.0 + x - EXP_CAP), e)
    return val, e, bool(np.any(over))


def barrier_cost(h, config, return_flag=False):
    """Sum of ``exp(a_i (C_i(h) + b_i))`` over the 2n level inequalities.

    Exponents above 700 are continued linearly so the result stays finite;
    ``return_flag=True`` also reports whether that happened.
    """
    if not config.use_barrier:
        return (0.0, False) if return_flag else 0.0
    val, _, capped = _capped_exp(_barrier_exponents(h, config))
    total = float(val.sum())
    return (total, capped) if return_flag else total


def barrier_gradient(h, config):
    if not config.use_barrier:
        return np.zeros(len(h))
    _, slope, _ = _capped_exp(_barrier_exponents(h, config))
    ds = config.a * slope
    return ds[1::2] - ds[0::2]


def stage_cost(h, u, price, pressure, config):
    """Electricity cost ``c u^T (p_out - p_in)`` plus the level barriers."""
    h = np.asarray(h, dtype=float)
    u = np.asarray(u, dtype=float)
    lift = pressure.A_p @ h + pressure.B_p @ u - pressure.p_in
    return float(price * (u @ lift)) + barrier_cost(h, config)


def rollout(model, h0, u_seq, d_seq):
    """Propagate the linear model; returns ``(N + 1, n)`` levels."""
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    d_seq = np.asarray(d_seq, dtype=float).ravel()
    if u_seq.shape[1] != model.m:
        u_seq = u_seq.reshape(-1, model.m)
    N = u_seq.shape[0]
    if d_seq.size != N:
        raise ValueError(f"{N} inputs but {d_seq.size} demands")
    h0 = np.asarray(h0, dtype=float)
    if h0.shape != (model.n,):
        raise ValueError("initial state has the wrong dimension")
    out = np.empty((N + 1, model.n))
    out[0] = h0
    b2 = model.B_d2[:, 0]
    for j in range(N):
        out[j + 1] = model.A_d @ out[j] + model.B_d1 @ u_seq[j] + b2 * d_seq[j]
    return out


def prediction_matrices(model, N):
    """``Phi, Gamma, Psi`` with ``h[j] = Phi[j] h0 + Gamma[j] u + Psi[j] d``.

    Shapes ``(N+1, n, n)``, ``(N+1, n, N*m)``, ``(N+1, n, N)``.
    """
    n, m = model.n, model.m
    Phi = np.zeros((N + 1, n, n))
    Gam = np.zeros((N + 1, n, N * m))
    Psi = np.zeros((N + 1, n, N))
    Phi[0] = np.eye(n)
    for j in range(N):
        Phi[j + 1] = model.A_d @ Phi[j]
        Gam[j + 1] = model.A_d @ Gam[j]
        Gam[j + 1][:, j * m:(j + 1) * m] += model.B_d1
        Psi[j + 1] = model.A_d @ Psi[j]
        Psi[j + 1][:, j] += model.B_d2[:, 0]
    return Phi, Gam, Psi


def objective_and_gradient(model, pressure, h0, u_flat, d_seq, c_seq, config, wrt_h0=False):
    """Total stage cost over the horizon and its gradient.

    The gradient is accumulated backwards through the rollout with the
    adjoint recursion ``lam_j = dJ_j/dh_j + A_d^T lam_{j+1}``. With
    ``wrt_h0`` the gradient is ``[d/dh0, d/du]``.
    """
    m = model.m
    u = np.asarray(u_flat, dtype=float).reshape(-1, m)
    c = np.asarray(c_seq, dtype=float).ravel()
    N = u.shape[0]
    h = rollout(model, h0, u, d_seq)
    Ap, Bp = pressure.A_p, pressure.B_p
    lift = h[:N] @ Ap.T + u @ Bp.T - pressure.p_in
    value = float(np.sum(c * np.einsum("ij,ij->i", u, lift)))
    grad_u = c[:, None] * (lift + u @ Bp)
    dJdh = c[:, None] * (u @ Ap)
    if config.use_barrier:
        for j in range(N):
            value += barrier_cost(h[j], config)
            dJdh[j] += barrier_gradient(h[j], config)
    lam = np.zeros(model.n)
    for j in range(N - 1, -1, -1):
        grad_u[j] += model.B_d1.T @ lam
        lam = dJdh[j] + model.A_d.T @ lam
    if wrt_h0:
        return value, np.concatenate([lam, grad_u.ravel()])
    return value, grad_u.ravel()


@dataclass
class PeriodicTrajectory:
    h_star: np.ndarray  # (T+1, n)
    u_star: np.ndarray  # (T, m)
    d_star: np.ndarray
    c_star: np.ndarray
    cost: float
    status: str = OPTIMAL

    @property
    def terminal(self):
        return self.h_star[-1]

    @property
    def periodicity_residual(self):
        return float(np.max(np.abs(self.h_star[0] - self.h_star[-1])))

    def to_dict(self):
        return {
            "h_star": self.h_star.tolist(), "u_star": self.u_star.tolist(),
            "d_star": np.asarray(self.d_star).tolist(), "c_star": np.asarray(self.c_star).tolist(),
            "cost": self.cost, "status": self.status,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(np.array(doc["h_star"], float), np.array(doc["u_star"], float),
                   np.array(doc["d_star"], float), np.array(doc["c_star"], float),
                   float(doc["cost"]), doc.get("status", OPTIMAL))


def _state_box_constraint(Phi, Gam, Psi, d, lower, upper, steps, with_h0):
    """Affine level-box rows for the states at ``steps``."""
    rows_h0 = np.concatenate([Phi[j] for j in steps])
    rows_u = np.concatenate([Gam[j] for j in steps])
    const = np.concatenate([Psi[j] @ d for j in steps])
    lo = np.tile(lower, len(steps))
    hi = np.tile(upper, len(steps))
    A = np.hstack([rows_h0, rows_u]) if with_h0 else rows_u
    A2 = np.vstack([A, -A])
    return A2, const, lo, hi


def compute_periodic_trajectory(model, pressure, d_star, c_star, config, x0=None):
    """Minimum-cost one-day orbit with ``h_T = h_0`` (within 1e-6).

    Decision variables are the initial levels and the input sequence; the
    states follow from the rollout.
    """
    T = config.steps_per_day
    d_star = np.asarray(d_star, dtype=float).ravel()
    c_star = np.asarray(c_star, dtype=float).ravel()
    if d_star.size != T or c_star.size != T:
        raise ValueError(f"profiles must have {T} entries")
    n, m = model.n, model.m
    Phi, Gam, Psi = prediction_matrices(model, T)

    def objective(z):
        return objective_and_gradient(model, pressure, z[:n], z[n:], d_star, c_star,
                                      config, wrt_h0=True)

    A_box, const, lo, hi = _state_box_constraint(Phi, Gam, Psi, d_star, config.lower,
                                                 config.upper, range(1, T + 1), True)
    b_box = np.concatenate([hi - const, const - lo])
    G = np.hstack([Phi[T] - np.eye(n), Gam[T]])
    g0 = Psi[T] @ d_star
    band = PERIODIC_TOL / 2
    problem = SmoothProblem(
        n + m * T, objective,
        np.concatenate([config.lower, np.zeros(m * T)]),
        np.concatenate([config.upper, np.tile(config.umax, T)]),
        constraints=[Constraint.linear(A_box, b_box, "levels")],
        couplings=[Coupling(lambda z: G @ z + g0, lambda z: G, band, "periodicity")],
    )
    if x0 is None:
        h_mid = 0.5 * (config.lower + config.upper)
        rhs = -((model.A_d - np.eye(n)) @ h_mid + model.B_d2[:, 0] * d_star.mean())
        u_c, *_ = np.linalg.lstsq(model.B_d1, rhs, rcond=None)
        u_c = np.clip(u_c, 0.0, config.umax)
        x0 = np.concatenate([h_mid, np.tile(u_c, T)])
    cfg = replace(config.solver, ctol=min(config.solver.ctol, band))
    res = nlpsolve.minimize(problem, x0, cfg)
    h0 = res.x[:n]
    u = res.x[n:].reshape(T, m)
    h = rollout(model, h0, u, d_star)
    residual = float(np.max(np.abs(h[0] - h[-1])))
    ok, _ = nlpsolve.check_feasible(problem, res.x, cfg.ctol)
    if res.status == INFEASIBLE or not ok or residual > PERIODIC_TOL:
        raise PeriodicInfeasible(
            f"no feasible periodic orbit found (periodicity residual {residual:.3e}, "
            f"violation {res.max_violation:.3e})", residual)
    if res.status != OPTIMAL:
        logger.warning("periodic trajectory stopped at %s", res.status)
    return PeriodicTrajectory(h, u, d_star, c_star, res.objective, res.status)


@dataclass
class MpcSolution:
    u_seq: np.ndarray  # (N, m)
    h_seq: np.ndarray  # (N+1, n)
    objective: float
    status: str
    iterations: int
    t: float = 0.0
    max_violation: float = 0.0

    @property
    def horizon(self):
        return self.u_seq.shape[0]

    def summary(self):
        return {
            "t": self.t, "status": self.status, "objective": self.objective,
            "iterations": self.iterations, "u0": self.u_seq[0].tolist() if self.horizon else [],
            "max_violation": self.max_violation,
        }


def mpc_problem(h_t, d_forecast, c_forecast, periodic, model, pressure, config, radius=None):
    """Build the horizon problem over the flattened input sequence."""
    N = len(d_forecast)
    m = model.m
    h_t = np.asarray(h_t, dtype=float)
    d = np.asarray(d_forecast, dtype=float).ravel()
    c = np.asarray(c_forecast, dtype=float).ravel()
    r = config.r if radius is None else radius
    Phi, Gam, Psi = prediction_matrices(model, N)
    A_box, const, lo, hi = _state_box_constraint(Phi, Gam, Psi, d, config.lower, config.upper,
                                                 range(1, N + 1), False)
    free = np.concatenate([Phi[j] @ h_t + Psi[j] @ d for j in range(1, N + 1)])
    b_box = np.concatenate([hi - free, free - lo])
    target = periodic.terminal
    GN = Gam[N]
    off = Phi[N] @ h_t + Psi[N] @ d - target

    def ball(u):
        e = GN @ u + off
        return np.array([(e @ e - r * r) / (2 * r)])

    def ball_jac(u):
        e = GN @ u + off
        return (GN.T @ e / r)[None, :]

    def objective(u):
        return objective_and_gradient(model, pressure, h_t, u, d, c, config)

    return SmoothProblem(
        N * m, objective, np.zeros(N * m), np.tile(config.umax, N),
        constraints=[Constraint.linear(A_box, b_box, "levels"),
                     Constraint(ball, ball_jac, "terminal")],
    )


def verify_solution(sol, h_t, d_forecast, periodic, model, config, radius=None, tol=None):
    """Independent re-check of boxes, terminal ball and dynamics."""
    tol = config.solver.ctol if tol is None else tol
    r = config.r if radius is None else radius
    h = rollout(model, h_t, sol.u_seq, d_forecast)
    dyn = float(np.max(np.abs(h - sol.h_seq)))
    u_ok = np.all(sol.u_seq >= -tol) and np.all(sol.u_seq <= config.umax + tol)
    h_ok = np.all(h[1:] >= config.lower - tol) and np.all(h[1:] <= config.upper + tol)
    ball_ok = np.linalg.norm(h[-1] - periodic.terminal) <= r + min(tol, BALL_REL_SLACK * r)
    return bool(u_ok and h_ok and ball_ok and dyn <= DYNAMICS_TOL)


def solve_mpc(h_t, t, d_forecast, c_forecast, periodic, model, pressure, config,
              warm_start=None, radius=None):
    """Solve the horizon problem at time ``t``; never raises on infeasibility."""
    N = horizon_length(t, config.T_day, config.dt)
    d = np.asarray(d_forecast, dtype=float).ravel()[:N]
    c = np.asarray(c_forecast, dtype=float).ravel()[:N]
    if d.size != N or c.size != N:
        raise ValueError(f"forecasts must cover the {N} remaining steps")
    problem = mpc_problem(h_t, d, c, periodic, model, pressure, config, radius)
    if warm_start is None:
        k = int(round((t % config.T_day) / config.dt))
        warm_start = periodic.u_star[k:k + N]
    x0 = np.clip(np.asarray(warm_start, dtype=float).reshape(N, model.m), 0, config.umax)
    res = nlpsolve.minimize(problem, x0.ravel(), config.solver)
    u = res.x.reshape(N, model.m)
    h = rollout(model, h_t, u, d)
    sol = MpcSolution(u, h, res.objective, res.status, res.iterations, t, res.max_violation)
    if sol.status != INFEASIBLE and not verify_solution(sol, h_t, d, periodic, model, config, radius):
        sol.status = INFEASIBLE
    return sol


@dataclass
class ControlDecision:
    u: np.ndarray
    status: str
    fallback: bool = False
    degraded: bool = False
    solution: MpcSolution | None = None


class PeriodicHorizonController:
    """Receding-horizon controller with the previous-solution fallback.

    A feasible solve applies its first input and is cached. On an
    infeasible solve the second input of the cached solution from the
    previous step is applied, and the cache is shifted by one step so a
    further infeasible step keeps walking along it. Without a usable cache
    the periodic input for the current hour is applied and the decision is
    flagged as degraded.
    """

    def __init__(self, model, pressure, periodic, config):
        self.model = model
        self.pressure = pressure
        self.periodic = periodic
        self.config = config
        self.previous: MpcSolution | None = None
        self.fallback_count = 0
        self.degraded_count = 0

    def _warm_start(self, t, N):
        prev = self.previous
        if prev is not None and abs(prev.t + self.config.dt - t) < 1e-9 and prev.horizon == N + 1:
            return prev.u_seq[1:]
        return None

    def step(self, h_measured, t, d_forecast, c_forecast, radius=None):
        cfg = self.config
        N = horizon_length(t, cfg.T_day, cfg.dt)
        sol = solve_mpc(h_measured, t, d_forecast, c_forecast, self.periodic, self.model,
                        self.pressure, cfg, warm_start=self._warm_start(t, N), radius=radius)
        if sol.status != INFEASIBLE:
            self.previous = sol
            return ControlDecision(np.clip(sol.u_seq[0], 0, cfg.umax), sol.status, solution=sol)
        prev = self.previous
        if prev is not None and abs(prev.t + cfg.dt - t) < 1e-9 and prev.horizon >= 2:
            u = np.clip(prev.u_seq[1], 0, cfg.umax)
            self.previous = MpcSolution(prev.u_seq[1:], prev.h_seq[1:], prev.objective,
                                        prev.status, 0, t, prev.max_violation)
            self.fallback_count += 1
            return ControlDecision(u, INFEASIBLE, fallback=True, solution=sol)
        k = int(round((t % cfg.T_day) / cfg.dt))
        self.previous = None
        self.fallback_count += 1
        self.degraded_count += 1
        u = np.clip(self.periodic.u_star[k], 0, cfg.umax)
        return ControlDecision(u, INFEASIBLE, fallback=True, degraded=True, solution=sol)
