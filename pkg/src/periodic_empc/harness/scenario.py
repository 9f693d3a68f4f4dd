"""Scenario files, daily profiles and forecast perturbation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np


class ScenarioError(ValueError):
    pass


def data_path(name):
    """Path of a file bundled in ``periodic_empc/data``."""
    return Path(str(resources.files("periodic_empc") / "data" / name))


def reference_scenario_path():
    return data_path("reference_scenario.json")


def load_profile_csv(path):
    """One value per line; blank lines and ``#`` comments ignored."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"profile file not found: {path}")
    values = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            try:
                values.append(float(text.split(",")[0]))
            except ValueError:
                raise ScenarioError(f"{path}:{lineno}: not a number: {text!r}") from None
    return np.array(values)


@dataclass
class ScenarioConfig:
    """Everything needed for a closed-loop experiment.

    ``demand`` is the aggregate base demand of the controlled zone per
    step; the topology's ``demand_share`` fields spread it over junctions.
    ``mpc`` holds overrides for the controller (``a``, ``b``, ``r``,
    ``lower``, ``upper``). ``fault_times`` lists hours at which the terminal
    radius is forced to ``fault_radius``.
    """

    topology_path: Path
    price: np.ndarray
    demand: np.ndarray
    seed: int = 0
    amplitude: float = 0.05
    days: int = 1
    dt: float = 1.0
    T_day: float = 24.0
    initial_levels: np.ndarray | None = None
    mpc: dict = field(default_factory=dict)
    plant: str = "hydraulic"
    identification: dict = field(default_factory=dict)
    output_dir: Path = Path("out")
    fault_times: tuple = ()
    fault_radius: float = 1e-9
    source: Path | None = None

    def __post_init__(self):
        self.topology_path = Path(self.topology_path)
        self.output_dir = Path(self.output_dir)
        self.price = np.asarray(self.price, dtype=float).ravel()
        self.demand = np.asarray(self.demand, dtype=float).ravel()
        steps = int(round(self.T_day / self.dt))
        if self.price.size != steps or self.demand.size != steps:
            raise ScenarioError(
                f"price and demand profiles need {steps} values, got "
                f"{self.price.size} and {self.demand.size}"
            )
        if np.any(self.demand < 0):
            raise ScenarioError("demand profile must be non-negative")
        if not 0.0 <= self.amplitude <= 0.5:
            raise ScenarioError("perturbation amplitude must lie in [0, 0.5]")
        if self.days < 1:
            raise ScenarioError("days must be at least 1")
        if self.plant not in ("hydraulic", "linear"):
            raise ScenarioError(f"unknown plant kind {self.plant!r}")
        if self.initial_levels is not None:
            self.initial_levels = np.asarray(self.initial_levels, dtype=float)

    @property
    def steps_per_day(self):
        return int(round(self.T_day / self.dt))


def _resolve(base, value):
    p = Path(value)
    return p if p.is_absolute() else (base / p)


def _profile(base, value, name):
    if isinstance(value, str):
        return load_profile_csv(_resolve(base, value))
    if isinstance(value, list):
        return np.array(value, dtype=float)
    raise ScenarioError(f"'{name}' must be a list of numbers or a CSV path")


def load_scenario(path, **overrides):
    """Read a scenario JSON; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scenario file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    base = path.parent
    try:
        topo = _resolve(base, doc["topology"])
        price = _profile(base, doc["price"], "price")
        demand = _profile(base, doc["demand"], "demand")
    except KeyError as exc:
        raise ScenarioError(f"{path}: missing field {exc}") from None
    if not topo.exists():
        raise FileNotFoundError(f"topology file not found: {topo}")
    kwargs = dict(
        topology_path=topo,
        price=price,
        demand=demand,
        seed=int(doc.get("seed", 0)),
        amplitude=float(doc.get("amplitude", 0.05)),
        days=int(doc.get("days", 1)),
        dt=float(doc.get("dt", 1.0)),
        T_day=float(doc.get("T_day", 24.0)),
        initial_levels=doc.get("initial_levels"),
        mpc=dict(doc.get("mpc", {})),
        plant=doc.get("plant", "hydraulic"),
        identification=dict(doc.get("identification", {})),
        output_dir=_resolve(base, doc.get("output_dir", "out")),
        fault_times=tuple(doc.get("fault_times", ())),
        source=path,
    )
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioConfig(**kwargs)


def smooth_deviation(rng, steps, harmonics=3):
    """Random low-order Fourier signal over one day with peak magnitude 1."""
    t = np.arange(steps) / steps
    sig = np.zeros(steps)
    for k in range(1, harmonics + 1):
        a, b = rng.normal(size=2) / k
        sig += a * np.cos(2 * np.pi * k * t) + b * np.sin(2 * np.pi * k * t)
    peak = np.max(np.abs(sig))
    return sig / peak if peak > 0 else sig


def synth_demand(base, seed, amplitude, days=1):
    """Realized demand (the base profile) and a perturbed forecast.

    Each day's forecast is ``base * (1 + amplitude * s)`` with ``s`` a
    seeded smooth signal bounded by 1 in magnitude.
    """
    if not 0.0 <= amplitude <= 0.5:
        raise ValueError("amplitude must lie in [0, 0.5]")
    base = np.asarray(base, dtype=float).ravel()
    realized = np.tile(base, days)
    if amplitude == 0:
        return realized, realized.copy()
    rng = np.random.default_rng(seed)
    dev = np.concatenate([smooth_deviation(rng, base.size) for _ in range(days)])
    forecast = np.maximum(realized * (1.0 + amplitude * dev), 0.0)
    return realized, forecast
