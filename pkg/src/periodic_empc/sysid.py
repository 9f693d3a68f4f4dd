"""Least-squares identification of the reduced tank and pump-pressure models.

The tank model is fitted directly in discrete time,

    h[k+1] = A_d h[k] + B_d1 u[k] + B_d2 d_a[k],

and the pump outlet heads as ``p_out = A_p h + B_p u``. Tanks joined by an
inter-tank pipe are merged into one model state first.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hydronet

logger = logging.getLogger(__name__)

AGGREGATION_TOL = 0.1
SPECTRAL_TOL = 1e-6


class IdentificationError(RuntimeError):
    pass


class RankDeficient(IdentificationError):
    pass


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class TankAggregation:
    """Map between physical tank levels and the aggregated model state.

    ``groups[i]`` lists the physical tank indices merged into model state
    ``i``; the state is the area-weighted mean level of its group.
    """

    groups: tuple
    areas: np.ndarray
    tank_ids: tuple

    @property
    def n_states(self):
        return len(self.groups)

    @property
    def group_areas(self):
        return np.array([self.areas[list(g)].sum() for g in self.groups])

    def to_model(self, levels, check=True):
        levels = np.asarray(levels, dtype=float)
        out = np.empty(self.n_states)
        for i, g in enumerate(self.groups):
            g = list(g)
            if check and len(g) > 1:
                spread = levels[g].max() - levels[g].min()
                if spread > AGGREGATION_TOL:
                    names = [self.tank_ids[k] for k in g]
                    raise AggregationError(
                        f"tanks {names} differ by {spread:.3f} m; cannot aggregate"
                    )
            out[i] = np.dot(self.areas[g], levels[g]) / self.areas[g].sum()
        return out

    def to_physical(self, states):
        states = np.asarray(states, dtype=float)
        levels = np.empty(len(self.tank_ids))
        for i, g in enumerate(self.groups):
            levels[list(g)] = states[i]
        return levels

    def group_bounds(self, topology):
        """Tightest (min_level, max_level) over the tanks of each group."""
        lo = np.array([t.min_level for t in topology.tanks])
        hi = np.array([t.max_level for t in topology.tanks])
        return (
            np.array([lo[list(g)].max() for g in self.groups]),
            np.array([hi[list(g)].min() for g in self.groups]),
        )


def aggregate_tanks(topology):
    """Merge tanks joined by inter-tank pipes into single model states."""
    ids = topology.tank_ids
    parent = list(range(len(ids)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    pos = {tid: k for k, tid in enumerate(ids)}
    for p in topology.pipes:
        if p.inter_tank:
            a, b = find(pos[p.from_node]), find(pos[p.to_node])
            if a != b:
                parent[max(a, b)] = min(a, b)
    groups = {}
    for k in range(len(ids)):
        groups.setdefault(find(k), []).append(k)
    ordered = tuple(tuple(g) for _, g in sorted(groups.items()))
    return TankAggregation(ordered, topology.tank_areas, tuple(ids))


@dataclass
class LinearDiscreteModel:
    A_d: np.ndarray
    B_d1: np.ndarray
    B_d2: np.ndarray
    dt: float = 1.0
    residual_rms: np.ndarray | None = None

    def __post_init__(self):
        self.A_d = np.atleast_2d(np.asarray(self.A_d, dtype=float))
        self.B_d1 = np.atleast_2d(np.asarray(self.B_d1, dtype=float))
        self.B_d2 = np.asarray(self.B_d2, dtype=float).reshape(-1, 1)
        n = self.A_d.shape[0]
        if self.A_d.shape != (n, n) or self.B_d1.shape[0] != n or self.B_d2.shape[0] != n:
            raise ValueError("inconsistent model dimensions")
        for M in (self.A_d, self.B_d1, self.B_d2):
            if not np.all(np.isfinite(M)):
                raise ValueError("model matrices must be finite")

    @property
    def n(self):
        return self.A_d.shape[0]

    @property
    def m(self):
        return self.B_d1.shape[1]

    @property
    def spectral_radius(self):
        return float(np.max(np.abs(np.linalg.eigvals(self.A_d))))

    def predict(self, h, u, d):
        return self.A_d @ h + self.B_d1 @ u + self.B_d2[:, 0] * d

    def to_dict(self):
        return {
            "n": self.n,
            "m": self.m,
            "dt": self.dt,
            "A_d": self.A_d.tolist(),
            "B_d1": self.B_d1.tolist(),
            "B_d2": self.B_d2.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["A_d"], doc["B_d1"], doc["B_d2"], float(doc.get("dt", 1.0)))


@dataclass
class PressureModel:
    A_p: np.ndarray
    B_p: np.ndarray
    p_in: np.ndarray
    residual_rms: np.ndarray | None = None

    def __post_init__(self):
        self.A_p = np.atleast_2d(np.asarray(self.A_p, dtype=float))
        self.B_p = np.atleast_2d(np.asarray(self.B_p, dtype=float))
        self.p_in = np.atleast_1d(np.asarray(self.p_in, dtype=float))
        m = self.B_p.shape[0]
        if self.B_p.shape != (m, m) or self.A_p.shape[0] != m or self.p_in.shape != (m,):
            raise ValueError("inconsistent pressure model dimensions")

    def outlet(self, h, u):
        return self.A_p @ h + self.B_p @ u

    def to_dict(self):
        return {"A_p": self.A_p.tolist(), "B_p": self.B_p.tolist(), "p_in": self.p_in.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["A_p"], doc["B_p"], doc["p_in"])


def save_models(path, model, pressure, extra=None):
    doc = {"state_model": model.to_dict(), "pressure_model": pressure.to_dict()}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))


def load_models(path):
    doc = json.loads(Path(path).read_text())
    return (
        LinearDiscreteModel.from_dict(doc["state_model"]),
        PressureModel.from_dict(doc["pressure_model"]),
    )


@dataclass
class Dataset:
    h: np.ndarray
    u: np.ndarray
    d: np.ndarray
    h_next: np.ndarray
    p_out: np.ndarray
    dt: float = 1.0
    episode: np.ndarray | None = None
    dropped: int = 0

    def __post_init__(self):
        self.h = np.atleast_2d(np.asarray(self.h, dtype=float))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.d = np.asarray(self.d, dtype=float).ravel()
        self.h_next = np.atleast_2d(np.asarray(self.h_next, dtype=float))
        self.p_out = np.atleast_2d(np.asarray(self.p_out, dtype=float))
        k = len(self.d)
        for name in ("h", "u", "h_next", "p_out"):
            if getattr(self, name).shape[0] != k:
                raise ValueError(f"dataset field {name!r} has {getattr(self, name).shape[0]} rows, expected {k}")
        if self.episode is None:
            self.episode = np.zeros(k, dtype=int)

    def __len__(self):
        return len(self.d)

    @property
    def n(self):
        return self.h.shape[1]

    @property
    def m(self):
        return self.u.shape[1]

    def subset(self, mask):
        mask = np.asarray(mask)
        return Dataset(self.h[mask], self.u[mask], self.d[mask], self.h_next[mask],
                       self.p_out[mask], self.dt, self.episode[mask])

    def split(self, holdout=0.2):
        """Reserve the last ``holdout`` fraction of episodes for validation."""
        eps = np.unique(self.episode)
        n_val = max(1, int(round(holdout * len(eps))))
        val_eps = eps[-n_val:]
        is_val = np.isin(self.episode, val_eps)
        return self.subset(~is_val), self.subset(is_val)

    def to_csv(self, path):
        n, m = self.n, self.m
        header = ([f"h_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)]
                  + ["d_a"] + [f"hnext_{i + 1}" for i in range(n)]
                  + [f"pout_{i + 1}" for i in range(m)])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in np.column_stack([self.h, self.u, self.d, self.h_next, self.p_out]):
                w.writerow([repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path, dt=1.0):
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            data = np.array([[float(x) for x in row] for row in r])
        n = sum(1 for c in header if c.startswith("h_"))
        m = sum(1 for c in header if c.startswith("u_"))
        h = data[:, :n]
        u = data[:, n:n + m]
        d = data[:, n + m]
        h_next = data[:, n + m + 1:2 * n + m + 1]
        p_out = data[:, 2 * n + m + 1:]
        return cls(h, u, d, h_next, p_out, dt)


@dataclass(frozen=True)
class Excitation:
    initial_levels: np.ndarray
    pump_flows: np.ndarray  # steps x m
    demand_scale: float


def generate_excitation(topology, seed, n_episodes, episode_length, hold=(1, 4),
                        level_margin=0.1, demand_range=(0.7, 1.3)):
    """Random staircase pump sequences, initial levels and demand scales.

    Pump levels are drawn uniformly on ``[0, max_flow]`` and held for a
    random number of steps in ``hold``. Tanks that share a model state start
    at the same level.
    """
    rng = np.random.default_rng(seed)
    agg = aggregate_tanks(topology)
    lo, hi = agg.group_bounds(topology)
    umax = topology.max_flows
    out = []
    for _ in range(n_episodes):
        states = rng.uniform(lo + level_margin, hi - level_margin)
        flows = np.empty((episode_length, len(umax)))
        for j, cap in enumerate(umax):
            k = 0
            while k < episode_length:
                width = int(rng.integers(hold[0], hold[1] + 1))
                flows[k:k + width, j] = rng.uniform(0.0, cap)
                k += width
        flows = np.clip(flows, 0.0, umax)
        scale = float(rng.uniform(*demand_range))
        out.append(Excitation(agg.to_physical(states), flows, scale))
    return out


def collect_dataset(topology, excitations, demand_profile, dt=1.0, max_drop=0.1):
    """Simulate each excitation episode on the hydraulic plant.

    ``demand_profile`` is the aggregate demand per step (wrapping if the
    episode is longer). An episode stops early once a tank leaves its
    ``[min_level, max_level]`` band so clamped data never enter the fit;
    episodes that fail to converge are dropped.
    """
    agg = aggregate_tanks(topology)
    lo = np.array([t.min_level for t in topology.tanks])
    hi = np.array([t.max_level for t in topology.tanks])
    profile = np.asarray(demand_profile, dtype=float)
    rows = {k: [] for k in ("h", "u", "d", "h_next", "p_out", "episode")}
    dropped = 0
    for e, exc in enumerate(excitations):
        try:
            episode = _simulate_episode(topology, agg, exc, profile, dt, lo, hi)
        except hydronet.NonConvergence as err:
            logger.warning("episode %d dropped: %s", e, err)
            dropped += 1
            continue
        for rec in episode:
            for key, val in zip(("h", "u", "d", "h_next", "p_out"), rec):
                rows[key].append(val)
            rows["episode"].append(e)
    if excitations and dropped > max_drop * len(excitations):
        raise IdentificationError(
            f"{dropped} of {len(excitations)} episodes failed to converge"
        )
    n, m = agg.n_states, len(topology.pumps)
    return Dataset(
        np.array(rows["h"]).reshape(-1, n),
        np.array(rows["u"]).reshape(-1, m),
        np.array(rows["d"]),
        np.array(rows["h_next"]).reshape(-1, n),
        np.array(rows["p_out"]).reshape(-1, m),
        dt,
        np.array(rows["episode"], dtype=int),
        dropped,
    )


def _simulate_episode(topology, agg, exc, profile, dt, lo, hi):
    state = hydronet.initial_state(topology, exc.initial_levels)
    records = []
    for k, u in enumerate(exc.pump_flows):
        total = exc.demand_scale * profile[k % len(profile)]
        demands = topology.junction_demands(total)
        heads, flows = hydronet.solve_steady_state(
            topology, state.tank_levels, u, demands,
            guess=(state.node_heads, state.link_flows),
        )
        p_out = hydronet.pump_outlet_pressures(topology, heads)
        nxt = hydronet.step(topology, state, u, demands, dt)
        if nxt.flags or np.any(nxt.tank_levels < lo) or np.any(nxt.tank_levels > hi):
            break
        records.append((
            agg.to_model(state.tank_levels, check=False),
            np.array(u, dtype=float),
            topology.zone_demand(demands),
            agg.to_model(nxt.tank_levels, check=False),
            p_out,
        ))
        state = nxt
    return records


def _lstsq(X, Y, ridge=0.0):
    """Least squares with a rank check; returns coefficients (p x k)."""
    p = X.shape[1]
    rank = np.linalg.matrix_rank(X)
    if rank < p:
        raise RankDeficient(f"regressor matrix has rank {rank} < {p}; excitation insufficient")
    if ridge > 0:
        Xa = np.vstack([X, np.sqrt(ridge) * np.eye(p)])
        Ya = np.vstack([Y, np.zeros((p, Y.shape[1]))])
        coef, *_ = np.linalg.lstsq(Xa, Ya, rcond=None)
    else:
        coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return coef


def fit_state_model(dataset, ridge=0.0):
    """Fit ``(A_d, B_d1, B_d2)`` by linear least squares on one-step data."""
    n, m = dataset.n, dataset.m
    if len(dataset) < 10 * (n + m + 1):
        raise IdentificationError(
            f"dataset has {len(dataset)} records, need at least {10 * (n + m + 1)}"
        )
    X = np.column_stack([dataset.h, dataset.u, dataset.d])
    coef = _lstsq(X, dataset.h_next, ridge)
    theta = coef.T
    resid = dataset.h_next - X @ coef
    model = LinearDiscreteModel(
        theta[:, :n], theta[:, n:n + m], theta[:, n + m:], dataset.dt,
        residual_rms=np.sqrt(np.mean(resid ** 2, axis=0)),
    )
    rho = model.spectral_radius
    if rho > 1.0 + SPECTRAL_TOL:
        logger.warning("fitted A_d has spectral radius %.8f > 1", rho)
    return model


def fit_pressure_model(dataset, topology=None, ridge=0.0, p_in=None):
    """Fit ``p_out = A_p h + B_p u``; inlet heads come from the reservoirs."""
    n, m = dataset.n, dataset.m
    X = np.column_stack([dataset.h, dataset.u])
    coef = _lstsq(X, dataset.p_out, ridge)
    theta = coef.T
    resid = dataset.p_out - X @ coef
    if p_in is None:
        p_in = topology.inlet_heads if topology is not None else np.zeros(m)
    return PressureModel(theta[:, :n], theta[:, n:], p_in,
                         residual_rms=np.sqrt(np.mean(resid ** 2, axis=0)))


def one_step_rms(model, dataset):
    pred = dataset.h @ model.A_d.T + dataset.u @ model.B_d1.T + np.outer(dataset.d, model.B_d2[:, 0])
    return np.sqrt(np.mean((pred - dataset.h_next) ** 2, axis=0))


def pressure_rms(pressure, dataset):
    pred = dataset.h @ pressure.A_p.T + dataset.u @ pressure.B_p.T
    return np.sqrt(np.mean((pred - dataset.p_out) ** 2, axis=0))


@dataclass
class IdentificationResult:
    model: LinearDiscreteModel
    pressure: PressureModel
    aggregation: TankAggregation
    train: Dataset
    validation: Dataset
    validation_rms: np.ndarray = field(default=None)
    validation_pressure_rms: np.ndarray = field(default=None)


def identify(topology, demand_profile, seed=0, n_episodes=40, episode_length=24, dt=1.0,
             holdout=0.2, ridge=0.0):
    """Excite the plant, collect data and fit both models with a hold-out split."""
    exc = generate_excitation(topology, seed, n_episodes, episode_length)
    data = collect_dataset(topology, exc, demand_profile, dt)
    train, val = data.split(holdout)
    model = fit_state_model(train, ridge)
    pressure = fit_pressure_model(train, topology, ridge)
    return IdentificationResult(
        model, pressure, aggregate_tanks(topology), train, val,
        one_step_rms(model, val), pressure_rms(pressure, val),
    )
