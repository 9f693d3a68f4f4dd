"""Closed-loop runs of the controller and the demand-follower benchmark."""

from __future__ import annotations

import copy
import csv
import functools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .. import empc, hydronet, sysid
from .scenario import synth_demand

logger = logging.getLogger(__name__)


class ClosedLoopError(RuntimeError):
    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


class BenchmarkInfeasible(RuntimeError):
    pass


@dataclass
class StepRecord:
    t: float
    levels: np.ndarray
    state: np.ndarray
    u: np.ndarray
    d_real: float
    d_forecast: float
    price: float
    cost: float
    feasible: bool
    fallback: bool
    degraded: bool = False
    status: str = ""


@dataclass
class RunLog:
    label: str
    kind: str
    tank_ids: tuple
    lower: np.ndarray
    upper: np.ndarray
    records: list = field(default_factory=list)
    final_levels: np.ndarray | None = None
    final_state: np.ndarray | None = None
    terminal: np.ndarray | None = None
    steps_per_day: int = 24
    solutions: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def t(self):
        return np.array([r.t for r in self.records])

    @property
    def levels(self):
        return np.array([r.levels for r in self.records])

    @property
    def states(self):
        return np.array([r.state for r in self.records])

    @property
    def u(self):
        return np.array([r.u for r in self.records])

    @property
    def u_total(self):
        return np.array([float(np.sum(r.u)) for r in self.records])

    @property
    def price(self):
        return np.array([r.price for r in self.records])

    @property
    def d_real(self):
        return np.array([r.d_real for r in self.records])

    @property
    def d_forecast(self):
        return np.array([r.d_forecast for r in self.records])

    @property
    def costs(self):
        return np.array([r.cost for r in self.records])

    @property
    def total_cost(self):
        return float(np.sum(self.costs))

    @property
    def fallback_count(self):
        return sum(1 for r in self.records if r.fallback)

    @property
    def degraded_count(self):
        return sum(1 for r in self.records if r.degraded)

    @property
    def infeasible_count(self):
        return sum(1 for r in self.records if not r.feasible)

    def level_samples(self):
        """Logged physical levels, including the level after the last step."""
        rows = [r.levels for r in self.records]
        if self.final_levels is not None:
            rows.append(self.final_levels)
        return np.array(rows)

    @property
    def violation_count(self):
        lv = self.level_samples()
        if lv.size == 0:
            return 0
        bad = (lv < self.lower - 1e-9) | (lv > self.upper + 1e-9)
        return int(np.sum(np.any(bad, axis=1)))

    def price_flow_correlation(self):
        p, q = self.price, self.u_total
        if p.std() == 0 or q.std() == 0:
            return 0.0
        return float(np.corrcoef(p, q)[0, 1])

    def midnight_states(self):
        """Model state at the end of each simulated day."""
        per = self.steps_per_day
        out = []
        for day in range(1, len(self.records) // per + 1):
            k = day * per
            out.append(self.records[k].state if k < len(self.records) else self.final_state)
        return np.array(out)

    def terminal_distances(self):
        if self.terminal is None:
            return np.zeros(0)
        return np.linalg.norm(self.midnight_states() - self.terminal, axis=1)

    def header(self):
        return (["t"] + [f"h{i + 1}" for i in range(len(self.tank_ids))]
                + ["u_total", "price", "d_real", "d_forecast", "cost_cum", "feasible", "fallback"])

    def to_csv(self, path):
        cum = 0.0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for r in self.records:
                cum += r.cost
                w.writerow([_fmt(r.t)] + [_fmt(x) for x in r.levels]
                           + [_fmt(np.sum(r.u)), _fmt(r.price), _fmt(r.d_real),
                              _fmt(r.d_forecast), _fmt(cum), int(r.feasible), int(r.fallback)])

    @classmethod
    def from_csv(cls, path, label=None, kind="proposed", lower=None, upper=None):
        """Rebuild a log from its CSV (per-pump inputs are not recoverable)."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        n_tanks = sum(1 for c in header if c.startswith("h"))
        log = cls(label or Path(path).stem, kind, tuple(header[1:1 + n_tanks]),
                  np.full(n_tanks, -np.inf) if lower is None else lower,
                  np.full(n_tanks, np.inf) if upper is None else upper)
        prev = 0.0
        for row in body:
            vals = [float(x) for x in row]
            t = vals[0]
            lv = np.array(vals[1:1 + n_tanks])
            u_total, price, d_real, d_fc, cum, feas, fb = vals[1 + n_tanks:]
            log.records.append(StepRecord(t, lv, lv, np.array([u_total]), d_real, d_fc,
                                          price, cum - prev, bool(feas), bool(fb)))
            prev = cum
        return log


def _fmt(x):
    return format(float(x), ".10g")


@dataclass
class Setup:
    """Everything derived from a scenario before the loop starts."""

    scenario: object
    topology: hydronet.NetworkTopology
    aggregation: sysid.TankAggregation
    model: sysid.LinearDiscreteModel
    pressure: sysid.PressureModel
    config: empc.MpcConfig
    periodic: empc.PeriodicTrajectory
    realized: np.ndarray
    forecast: np.ndarray
    price: np.ndarray


@functools.lru_cache(maxsize=8)
def _identify_cached(topology_path, demand, seed, episodes, episode_length, dt):
    topo = hydronet.load_topology(topology_path)
    return sysid.identify(topo, np.array(demand), seed=seed, n_episodes=episodes,
                          episode_length=episode_length, dt=dt)


def identify_for(scenario):
    ident = scenario.identification
    return _identify_cached(
        str(scenario.topology_path), tuple(scenario.demand.tolist()),
        int(ident.get("seed", 0)), int(ident.get("episodes", 40)),
        int(ident.get("episode_length", scenario.steps_per_day)), scenario.dt,
    )


def build_mpc_config(scenario, topology, aggregation):
    lo, hi = aggregation.group_bounds(topology)
    over = scenario.mpc
    return empc.MpcConfig(
        lower=over.get("lower", lo),
        upper=over.get("upper", hi),
        umax=topology.max_flows,
        a=over.get("a", 80.0),
        b=over.get("b", 0.3),
        r=over.get("r", 0.05),
        dt=scenario.dt,
        T_day=scenario.T_day,
    )


def prepare(scenario, models=None, periodic=None):
    """Load the network, identify (unless ``models`` given) and build the orbit."""
    topo = hydronet.load_topology(scenario.topology_path)
    agg = sysid.aggregate_tanks(topo)
    if models is None:
        res = identify_for(scenario)
        model, pressure = res.model, res.pressure
    else:
        model, pressure = models
    config = build_mpc_config(scenario, topo, agg)
    if periodic is None:
        periodic = _periodic_cached(model, pressure, scenario, config)
    realized, forecast = synth_demand(scenario.demand, scenario.seed, scenario.amplitude,
                                      scenario.days)
    price = np.tile(scenario.price, scenario.days)
    return Setup(scenario, topo, agg, model, pressure, config, periodic, realized, forecast, price)


_PERIODIC_CACHE: dict = {}


def _periodic_cached(model, pressure, scenario, config):
    key = (id(model), id(pressure), scenario.demand.tobytes(), scenario.price.tobytes(),
           repr(config.to_dict()))
    hit = _PERIODIC_CACHE.get(key)
    if hit is None or hit[0] is not model:
        traj = empc.compute_periodic_trajectory(model, pressure, scenario.demand,
                                                scenario.price, config)
        hit = (model, traj)
        _PERIODIC_CACHE[key] = hit
    return hit[1]


class HydraulicPlant:
    def __init__(self, topology, aggregation, levels, dt=1.0):
        self.topology = topology
        self.aggregation = aggregation
        self.dt = dt
        self.state = hydronet.initial_state(topology, levels)

    @property
    def levels(self):
        return np.array(self.state.tank_levels)

    def model_state(self):
        return self.aggregation.to_model(self.state.tank_levels, check=False)

    def apply(self, u, d_total, dt):
        demands = self.topology.junction_demands(d_total)
        self.state = hydronet.step(self.topology, self.state, u, demands, dt)
        if self.state.flags:
            logger.debug("plant clamped levels: %s", self.state.flags)
        return np.array(self.state.pump_work)


class LinearPlant:
    """The identified model used as the plant (no model-plant mismatch)."""

    def __init__(self, model, pressure, aggregation, levels):
        self.model = model
        self.pressure = pressure
        self.aggregation = aggregation
        self.h = aggregation.to_model(levels, check=False)

    @property
    def levels(self):
        return self.aggregation.to_physical(self.h)

    def model_state(self):
        return np.array(self.h)

    def apply(self, u, d_total, dt):
        lift = self.pressure.outlet(self.h, u) - self.pressure.p_in
        self.h = self.model.predict(self.h, u, d_total)
        return dt * u * lift


def make_plant(setup, levels=None):
    sc = setup.scenario
    if levels is None:
        if sc.initial_levels is not None:
            levels = sc.initial_levels
        else:
            levels = setup.aggregation.to_physical(setup.periodic.h_star[0])
    if sc.plant == "linear":
        return LinearPlant(setup.model, setup.pressure, setup.aggregation, levels)
    return HydraulicPlant(setup.topology, setup.aggregation, levels, sc.dt)


def _new_log(setup, label, kind):
    topo = setup.topology
    return RunLog(
        label, kind, tuple(topo.tank_ids),
        np.array([t.min_level for t in topo.tanks]),
        np.array([t.max_level for t in topo.tanks]),
        terminal=np.array(setup.periodic.terminal),
        steps_per_day=setup.scenario.steps_per_day,
    )


def run_closed_loop(scenario, setup=None, label=None):
    """Run the periodic-horizon controller against the plant."""
    setup = setup or prepare(scenario)
    sc = scenario
    cfg = setup.config
    plant = make_plant(setup)
    ctrl = empc.PeriodicHorizonController(setup.model, setup.pressure, setup.periodic, cfg)
    log = _new_log(setup, label or f"proposed_seed{sc.seed}", "proposed")
    faults = {float(t) for t in sc.fault_times}
    total = sc.days * sc.steps_per_day
    for k in range(total):
        t = k * sc.dt
        levels = plant.levels
        h = plant.model_state()
        N = empc.horizon_length(t, sc.T_day, sc.dt)
        radius = sc.fault_radius if t in faults else None
        dec = ctrl.step(h, t, setup.forecast[k:k + N], setup.price[k:k + N], radius=radius)
        u = np.clip(dec.u, 0.0, cfg.umax)
        try:
            work = plant.apply(u, setup.realized[k], sc.dt)
        except hydronet.HydraulicError as exc:
            log.final_levels = levels
            log.final_state = h
            raise ClosedLoopError(f"plant failed at t={t}: {exc}", log) from exc
        log.records.append(StepRecord(
            t, levels, h, u, float(setup.realized[k]), float(setup.forecast[k]),
            float(setup.price[k]), float(setup.price[k] * np.sum(work)),
            dec.status != empc.INFEASIBLE, dec.fallback, dec.degraded, dec.status,
        ))
        if dec.solution is not None:
            log.solutions.append(dec.solution)
    log.final_levels = plant.levels
    log.final_state = plant.model_state()
    return log


def follower_flows(d_total, umax, offset):
    """Proportional split of ``d_total`` plus per-pump offsets, clamped."""
    umax = np.asarray(umax, dtype=float)
    return np.clip(d_total * umax / umax.sum() + offset, 0.0, umax)


def _simulate_day(plant, demands, umax, offset, dt):
    p = copy.deepcopy(plant)
    works = []
    for d in demands:
        u = follower_flows(d, umax, offset)
        works.append((u, p.apply(u, d, dt)))
    return p, works


def _find_offsets(plant, demands, umax, target, areas, radius, dt, rounds=4):
    """Offsets that bring the end-of-day state into the terminal ball.

    Alternates a root search on a uniform offset (total stored volume) with
    one on a pump-to-pump shift (distribution between model states).
    """
    m = len(umax)
    n = len(target)
    shift_dir = np.zeros(m)
    if m > 1:
        shift_dir[0] = 1.0
        shift_dir[1:] = -1.0 / (m - 1)
    delta, sigma = 0.0, 0.0

    def end_error(dl, sg):
        p, _ = _simulate_day(plant, demands, umax, dl + sg * shift_dir, dt)
        return p.model_state() - target

    def volume(dl):
        return float(areas @ end_error(dl, sigma))

    def spread(sg):
        e = end_error(delta, sg)
        return float(e[0] - np.mean(e[1:]))

    span = float(np.max(umax))
    err = end_error(delta, sigma)
    for _ in range(rounds):
        if np.linalg.norm(err) <= 0.5 * radius:
            break
        try:
            delta = brentq(volume, -span, span, xtol=1e-6)
        except ValueError:
            raise BenchmarkInfeasible("no uniform offset balances the daily volume") from None
        if m > 1 and n > 1:
            try:
                sigma = brentq(spread, -span / 2, span / 2, xtol=1e-6)
            except ValueError:
                raise BenchmarkInfeasible("no pump shift balances the tank levels") from None
        err = end_error(delta, sigma)
    if np.linalg.norm(err) > radius:
        raise BenchmarkInfeasible(
            f"follower ends {np.linalg.norm(err):.4f} m from the terminal point (r={radius})"
        )
    return delta + sigma * shift_dir


def demand_follower(scenario, setup=None, label=None):
    """Pump exactly the realized demand, trimmed to land in the terminal ball."""
    setup = setup or prepare(scenario)
    sc = scenario
    cfg = setup.config
    plant = make_plant(setup)
    areas = setup.aggregation.group_areas
    log = _new_log(setup, label or "follower", "follower")
    per = sc.steps_per_day
    for day in range(sc.days):
        demands = setup.realized[day * per:(day + 1) * per]
        offset = _find_offsets(plant, demands, cfg.umax, setup.periodic.terminal, areas,
                               cfg.r, sc.dt)
        for j, d in enumerate(demands):
            k = day * per + j
            levels = plant.levels
            h = plant.model_state()
            u = follower_flows(d, cfg.umax, offset)
            work = plant.apply(u, d, sc.dt)
            log.records.append(StepRecord(
                k * sc.dt, levels, h, u, float(d), float(setup.forecast[k]),
                float(setup.price[k]), float(setup.price[k] * np.sum(work)), True, False,
                status="follower",
            ))
    log.final_levels = plant.levels
    log.final_state = plant.model_state()
    return log
