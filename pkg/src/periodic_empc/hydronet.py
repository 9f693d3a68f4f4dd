"""Steady-state hydraulics and tank integration for small water networks.

Tanks and reservoirs are fixed-head boundaries during each hydraulic
solve; pumps are ideal flow sources from a reservoir into a node. Flows are
in m^3/h, heads and levels in m, areas in m^2.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

HW_EXPONENT = 1.852
Q_EPS = 1e-4

MAX_NEWTON_ITER = 100
RESIDUAL_TOL = 1e-8
MAX_LEVEL_CHANGE = 0.05
MAX_SUBSTEP = 0.05


class HydraulicError(RuntimeError):
    pass


class NonConvergence(HydraulicError):
    def __init__(self, iterations, residual):
        super().__init__(
            f"Newton solve did not converge after {iterations} iterations "
            f"(residual {residual:.3e})"
        )
        self.iterations = iterations
        self.residual = residual


class DisconnectedDemand(HydraulicError):
    pass


class TopologyError(ValueError):
    pass


def headloss(K, q):
    """Hazen-Williams head loss ``K * q * |q|**0.852`` (sign follows ``q``)."""
    K = np.asarray(K, dtype=float)
    q = np.asarray(q, dtype=float)
    if not (np.all(np.isfinite(K)) and np.all(np.isfinite(q))):
        raise ValueError("headloss requires finite K and q")
    out = K * q * np.abs(q) ** (HW_EXPONENT - 1.0)
    return float(out) if out.ndim == 0 else out


def headloss_derivative(K, q, q_eps=Q_EPS):
    """Slope of the head loss curve, held constant below ``q_eps``.

    The exact slope vanishes at zero flow, which would make the Newton
    Jacobian singular for idle pipes.
    """
    K = np.asarray(K, dtype=float)
    q = np.asarray(q, dtype=float)
    if not (np.all(np.isfinite(K)) and np.all(np.isfinite(q))):
        raise ValueError("headloss_derivative requires finite K and q")
    aq = np.maximum(np.abs(q), q_eps)
    out = HW_EXPONENT * K * aq ** (HW_EXPONENT - 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Junction:
    id: str
    elevation: float = 0.0
    zone: bool = False
    demand_share: float = 0.0


@dataclass(frozen=True)
class Tank:
    id: str
    area: float
    min_level: float
    max_level: float
    init_level: float
    elevation: float = 0.0


@dataclass(frozen=True)
class Reservoir:
    id: str
    head: float


@dataclass(frozen=True)
class Pipe:
    from_node: str
    to_node: str
    K: float
    inter_tank: bool = False


@dataclass(frozen=True)
class Pump:
    id: str
    from_node: str
    to_node: str
    max_flow: float


@dataclass(frozen=True)
class NetworkTopology:
    """Junctions, tanks, reservoirs, pipes and pumps of a network.

    Links are ordered pipes first, then pumps; ``PlantState.link_flows``
    follows the same order.
    """

    junctions: tuple
    tanks: tuple
    reservoirs: tuple
    pipes: tuple
    pumps: tuple
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("junctions", "tanks", "reservoirs", "pipes", "pumps"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        ids = [n.id for n in self.junctions + self.tanks + self.reservoirs]
        if len(set(ids)) != len(ids):
            raise TopologyError("node ids must be unique")
        index = {nid: i for i, nid in enumerate(ids)}
        object.__setattr__(self, "_index", index)
        self._validate()

    def _validate(self):
        if not self.tanks:
            raise TopologyError("network needs at least one tank")
        if not self.pumps:
            raise TopologyError("network needs at least one pump")
        for t in self.tanks:
            if t.area <= 0:
                raise TopologyError(f"tank {t.id}: area must be positive")
            if not t.min_level < t.max_level:
                raise TopologyError(f"tank {t.id}: min_level must be below max_level")
        for p in self.pipes:
            if p.K <= 0:
                raise TopologyError(f"pipe {p.from_node}-{p.to_node}: K must be positive")
            for nid in (p.from_node, p.to_node):
                if nid not in self._index:
                    raise TopologyError(f"pipe references unknown node {nid!r}")
            if p.inter_tank and not (
                p.from_node in self.tank_ids and p.to_node in self.tank_ids
            ):
                raise TopologyError(
                    f"inter-tank pipe {p.from_node}-{p.to_node} must join two tanks"
                )
        reservoir_ids = {r.id for r in self.reservoirs}
        for pu in self.pumps:
            if pu.from_node not in reservoir_ids:
                raise TopologyError(f"pump {pu.id}: 'from' must be a reservoir")
            if pu.to_node not in self._index:
                raise TopologyError(f"pump {pu.id}: unknown outlet node {pu.to_node!r}")
            if pu.max_flow <= 0:
                raise TopologyError(f"pump {pu.id}: max_flow must be positive")
        # Connectivity over pipes and pumps together.
        adj = {nid: set() for nid in self._index}
        for p in self.pipes:
            adj[p.from_node].add(p.to_node)
            adj[p.to_node].add(p.from_node)
        for pu in self.pumps:
            adj[pu.from_node].add(pu.to_node)
            adj[pu.to_node].add(pu.from_node)
        if _reachable(adj, [next(iter(self._index))]) != set(self._index):
            raise TopologyError("network graph is not connected")

    @property
    def node_ids(self):
        return [n.id for n in self.junctions + self.tanks + self.reservoirs]

    @property
    def tank_ids(self):
        return [t.id for t in self.tanks]

    @property
    def junction_ids(self):
        return [j.id for j in self.junctions]

    @property
    def n_links(self):
        return len(self.pipes) + len(self.pumps)

    @property
    def max_flows(self):
        return np.array([p.max_flow for p in self.pumps], dtype=float)

    @property
    def inlet_heads(self):
        heads = {r.id: r.head for r in self.reservoirs}
        return np.array([heads[p.from_node] for p in self.pumps], dtype=float)

    @property
    def tank_areas(self):
        return np.array([t.area for t in self.tanks], dtype=float)

    def node_index(self, node_id):
        return self._index[node_id]

    def junction_demands(self, total):
        """Split an aggregate demand over junctions by ``demand_share``."""
        shares = np.array([j.demand_share for j in self.junctions], dtype=float)
        s = shares.sum()
        if s <= 0:
            return np.zeros(len(self.junctions))
        return float(total) * shares / s

    def zone_demand(self, demands):
        """Aggregated demand of the controlled zone."""
        mask = np.array([j.zone for j in self.junctions], dtype=bool)
        return float(np.sum(np.asarray(demands, dtype=float)[mask]))

    @classmethod
    def from_dict(cls, doc):
        try:
            junctions = [
                Junction(
                    str(j["id"]),
                    float(j.get("elevation", 0.0)),
                    bool(j.get("zone", False)),
                    float(j.get("demand_share", 0.0)),
                )
                for j in doc.get("junctions", [])
            ]
            tanks = [
                Tank(
                    str(t["id"]),
                    float(t["area"]),
                    float(t["min_level"]),
                    float(t["max_level"]),
                    float(t["init_level"]),
                    float(t.get("elevation", 0.0)),
                )
                for t in doc["tanks"]
            ]
            reservoirs = [Reservoir(str(r["id"]), float(r["head"])) for r in doc["reservoirs"]]
            pipes = [
                Pipe(str(p["from"]), str(p["to"]), float(p["K"]), bool(p.get("inter_tank", False)))
                for p in doc.get("pipes", [])
            ]
            pumps = [
                Pump(str(p["id"]), str(p["from"]), str(p["to"]), float(p["max_flow"]))
                for p in doc["pumps"]
            ]
        except KeyError as exc:
            raise TopologyError(f"topology document is missing field {exc}") from None
        return cls(junctions, tanks, reservoirs, pipes, pumps)

    def to_dict(self):
        return {
            "junctions": [
                {"id": j.id, "elevation": j.elevation, "zone": j.zone,
                 "demand_share": j.demand_share}
                for j in self.junctions
            ],
            "tanks": [
                {"id": t.id, "area": t.area, "min_level": t.min_level,
                 "max_level": t.max_level, "init_level": t.init_level,
                 "elevation": t.elevation}
                for t in self.tanks
            ],
            "reservoirs": [{"id": r.id, "head": r.head} for r in self.reservoirs],
            "pipes": [
                {"from": p.from_node, "to": p.to_node, "K": p.K, "inter_tank": p.inter_tank}
                for p in self.pipes
            ],
            "pumps": [
                {"id": p.id, "from": p.from_node, "to": p.to_node, "max_flow": p.max_flow}
                for p in self.pumps
            ],
        }


def load_topology(path):
    path = Path(path)
    with path.open() as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise TopologyError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return NetworkTopology.from_dict(doc)


def _reachable(adj, sources):
    seen = set(sources)
    queue = deque(sources)
    while queue:
        u = queue.popleft()
        for v in sorted(adj[u]):
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


@dataclass(frozen=True)
class PlantState:
    """Tank levels plus the hydraulic solution consistent with them.

    ``pump_work`` holds, per pump, the integral of ``q * (p_out - p_in)``
    over the last step (m^3/h * m * h); ``flags`` records clamping events.
    """

    tank_levels: np.ndarray
    node_heads: np.ndarray
    link_flows: np.ndarray
    sim_time: float = 0.0
    pump_work: np.ndarray | None = None
    flags: tuple = ()


class _System:
    """Index bookkeeping for the Newton solve, cached per topology."""

    def __init__(self, topo: NetworkTopology):
        self.topo = topo
        nj = len(topo.junctions)
        self.nj = nj
        self.np_ = len(topo.pipes)
        jidx = {j.id: i for i, j in enumerate(topo.junctions)}
        fixed_ids = [t.id for t in topo.tanks] + [r.id for r in topo.reservoirs]
        fidx = {nid: i for i, nid in enumerate(fixed_ids)}
        self.M_j = np.zeros((self.np_, nj))
        self.M_f = np.zeros((self.np_, len(fixed_ids)))
        for k, p in enumerate(topo.pipes):
            for nid, sgn in ((p.from_node, 1.0), (p.to_node, -1.0)):
                if nid in jidx:
                    self.M_j[k, jidx[nid]] = sgn
                else:
                    self.M_f[k, fidx[nid]] = sgn
        self.K = np.array([p.K for p in topo.pipes], dtype=float)
        # pump injections into junctions and tanks
        self.P_j = np.zeros((nj, len(topo.pumps)))
        self.P_t = np.zeros((len(topo.tanks), len(topo.pumps)))
        tidx = {t.id: i for i, t in enumerate(topo.tanks)}
        for k, pu in enumerate(topo.pumps):
            if pu.to_node in jidx:
                self.P_j[jidx[pu.to_node], k] = 1.0
            elif pu.to_node in tidx:
                self.P_t[tidx[pu.to_node], k] = 1.0
        self.pump_out = [topo.node_index(pu.to_node) for pu in topo.pumps]
        self.res_heads = np.array([r.head for r in topo.reservoirs], dtype=float)
        self.tank_elev = np.array([t.elevation for t in topo.tanks], dtype=float)
        self.n_tanks = len(topo.tanks)
        # tank inflow = -(M_t^T q) over pipes, + pump injections
        self.M_t = self.M_f[:, : self.n_tanks]
        self._check_connectivity(jidx, fixed_ids)

    def _check_connectivity(self, jidx, fixed_ids):
        adj = {nid: set() for nid in self.topo.node_ids}
        for p in self.topo.pipes:
            adj[p.from_node].add(p.to_node)
            adj[p.to_node].add(p.from_node)
        reach = _reachable(adj, fixed_ids)
        self.unreachable = [j for j in jidx if j not in reach]

    def fixed_heads(self, tank_levels):
        return np.concatenate([self.tank_elev + np.asarray(tank_levels, float), self.res_heads])


_SYSTEM_CACHE: dict = {}


def _system(topo):
    key = id(topo)
    cached = _SYSTEM_CACHE.get(key)
    if cached is None or cached[0] is not topo:
        cached = (topo, _System(topo))
        _SYSTEM_CACHE[key] = cached
    return cached[1]


def _residuals(sys_, q, hj, hf, inject, demand):
    energy = headloss(sys_.K, q) - sys_.M_j @ hj - sys_.M_f @ hf
    mass = -(sys_.M_j.T @ q) + inject - demand
    return energy, mass


def solve_steady_state(topology, tank_levels, pump_flows, demands, guess=None,
                       tol=RESIDUAL_TOL, max_iter=MAX_NEWTON_ITER):
    """Solve nodal heads and link flows for fixed tank levels and pump flows.

    Parameters
    ----------
    topology : NetworkTopology
    tank_levels : array_like, one level per tank (m above tank elevation)
    pump_flows : array_like, commanded flow per pump (m^3/h)
    demands : array_like, demand per junction (m^3/h)
    guess : (node_heads, link_flows), optional
        Warm start, typically the previous solution.

    Returns
    -------
    node_heads : ndarray ordered as ``topology.node_ids``
    link_flows : ndarray, pipes then pumps
    """
    sys_ = _system(topology)
    u = np.asarray(pump_flows, dtype=float)
    d = np.asarray(demands, dtype=float)
    levels = np.asarray(tank_levels, dtype=float)
    if u.shape != (len(topology.pumps),):
        raise ValueError("pump_flows has the wrong length")
    if d.shape != (sys_.nj,):
        raise ValueError("demands has the wrong length")
    if levels.shape != (sys_.n_tanks,):
        raise ValueError("tank_levels has the wrong length")
    if np.any(d < 0):
        raise ValueError("demands must be non-negative")
    if sys_.unreachable:
        raise DisconnectedDemand(
            f"junctions {sys_.unreachable} are not connected to any tank or reservoir"
        )

    hf = sys_.fixed_heads(levels)
    inject = sys_.P_j @ u
    nj, np_ = sys_.nj, sys_.np_
    if guess is not None:
        hj = np.array(guess[0][:nj], dtype=float)
        q = np.array(guess[1][:np_], dtype=float)
    else:
        hj = np.full(nj, hf.mean() if hf.size else 0.0)
        q = np.zeros(np_)

    energy, mass = _residuals(sys_, q, hj, hf, inject, d)
    res = max(np.max(np.abs(energy), initial=0.0), np.max(np.abs(mass), initial=0.0))
    it = 0
    while res > tol:
        if it >= max_iter:
            raise NonConvergence(it, res)
        it += 1
        D = np.diag(headloss_derivative(sys_.K, q))
        J = np.block([[D, -sys_.M_j], [-sys_.M_j.T, np.zeros((nj, nj))]])
        step = np.linalg.solve(J, -np.concatenate([energy, mass]))
        dq, dh = step[:np_], step[np_:]
        alpha = 1.0
        norm0 = np.linalg.norm(np.concatenate([energy, mass]))
        for _ in range(30):
            q_try = q + alpha * dq
            h_try = hj + alpha * dh
            e_try, m_try = _residuals(sys_, q_try, h_try, hf, inject, d)
            if np.linalg.norm(np.concatenate([e_try, m_try])) <= norm0 or alpha < 1e-6:
                break
            alpha *= 0.5
        q, hj, energy, mass = q_try, h_try, e_try, m_try
        res = max(np.max(np.abs(energy), initial=0.0), np.max(np.abs(mass), initial=0.0))

    heads = np.concatenate([hj, hf])
    flows = np.concatenate([q, u])
    return heads, flows


def tank_inflows(topology, link_flows):
    """Net inflow into each tank (m^3/h) for a hydraulic solution."""
    sys_ = _system(topology)
    q = np.asarray(link_flows, dtype=float)[: sys_.np_]
    u = np.asarray(link_flows, dtype=float)[sys_.np_:]
    return -(sys_.M_t.T @ q) + sys_.P_t @ u


def pump_outlet_pressures(topology, node_heads):
    """Head at each pump's outlet node, in pump order."""
    sys_ = _system(topology)
    return np.asarray(node_heads, dtype=float)[sys_.pump_out]


def initial_state(topology, tank_levels=None, demands=None, pump_flows=None):
    """Plant state at t=0 with a hydraulic solution for the given levels."""
    levels = (
        np.array([t.init_level for t in topology.tanks], dtype=float)
        if tank_levels is None
        else np.array(tank_levels, dtype=float)
    )
    demands = np.zeros(len(topology.junctions)) if demands is None else demands
    pump_flows = np.zeros(len(topology.pumps)) if pump_flows is None else pump_flows
    heads, flows = solve_steady_state(topology, levels, pump_flows, demands)
    return PlantState(levels, heads, flows, 0.0)


def step(topology, state, pump_flows, demands, dt, max_level_change=MAX_LEVEL_CHANGE,
         max_substep=MAX_SUBSTEP):
    """Advance tank levels by ``dt`` hours with held pump flows and demands.

    Explicit Euler; each sub-step re-solves the hydraulics and is sized so no
    level moves more than ``max_level_change`` and no sub-step exceeds
    ``max_substep`` hours. Levels are clamped to ``[0, max_level]``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    u = np.asarray(pump_flows, dtype=float)
    if np.any(u < 0) or np.any(u > topology.max_flows * (1 + 1e-12)):
        raise ValueError("pump flows outside [0, max_flow]")
    inlet = topology.inlet_heads
    areas = topology.tank_areas
    tops = np.array([t.max_level for t in topology.tanks], dtype=float)
    levels = np.array(state.tank_levels, dtype=float)
    guess = (state.node_heads, state.link_flows)
    work = np.zeros(len(topology.pumps))
    flags = []
    remaining = float(dt)
    while remaining > 1e-12:
        heads, flows = solve_steady_state(topology, levels, u, demands, guess=guess)
        guess = (heads, flows)
        rates = tank_inflows(topology, flows) / areas
        h = min(remaining, max_substep)
        fastest = np.max(np.abs(rates))
        if fastest * h > max_level_change:
            h = max_level_change / fastest
        work += h * u * (pump_outlet_pressures(topology, heads) - inlet)
        levels = levels + h * rates
        remaining -= h
        low = levels < 0
        high = levels > tops
        if np.any(low):
            for i in np.flatnonzero(low):
                flags.append(("depleted", topology.tanks[i].id))
            levels[low] = 0.0
        if np.any(high):
            for i in np.flatnonzero(high):
                flags.append(("overflow", topology.tanks[i].id))
            levels[high] = tops[high]
    heads, flows = solve_steady_state(topology, levels, u, demands, guess=guess)
    return replace(
        state,
        tank_levels=levels,
        node_heads=heads,
        link_flows=flows,
        sim_time=state.sim_time + dt,
        pump_work=work,
        flags=tuple(flags),
    )
