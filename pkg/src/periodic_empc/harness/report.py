"""Relative-cost tables, time series and run summaries."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .closedloop import RunLog, _fmt


def relative_cost_row(proposed_cost, follower_cost):
    """Costs normalized to the follower, e.g. ``(0.5967, 1.0)``."""
    if follower_cost <= 0:
        raise ValueError("follower cost must be positive")
    return proposed_cost / follower_cost, 1.0


def run_summary(log):
    out = {
        "label": log.label,
        "kind": log.kind,
        "steps": len(log),
        "total_cost": log.total_cost,
        "violations": log.violation_count,
        "fallbacks": log.fallback_count,
        "degraded": log.degraded_count,
        "infeasible_steps": log.infeasible_count,
        "price_flow_correlation": log.price_flow_correlation(),
    }
    dist = log.terminal_distances()
    if dist.size:
        out["terminal_distances"] = dist.tolist()
    return out


def pair_runs(runs):
    """Pair each proposed run with a follower run.

    A single follower serves every proposed run; otherwise they pair in
    order.
    """
    proposed = [r for r in runs if r.kind == "proposed"]
    followers = [r for r in runs if r.kind == "follower"]
    if not proposed or not followers:
        raise ValueError("report needs at least one proposed run and one follower run")
    if len(followers) == 1:
        pairs = [(p, followers[0]) for p in proposed]
    elif len(followers) == len(proposed):
        pairs = list(zip(proposed, followers))
    else:
        raise ValueError(f"cannot pair {len(proposed)} proposed runs with {len(followers)} followers")
    for p, f in pairs:
        if len(p) != len(f):
            raise ValueError(f"run lengths differ: {p.label} has {len(p)} steps, {f.label} has {len(f)}")
    return pairs


@dataclass
class ReportBundle:
    rows: list
    summary: dict
    runs: list = field(default_factory=list)

    @property
    def ratios(self):
        return [r["ratio"] for r in self.rows]

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "relative_costs.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["proposed", "follower"])
            for r in self.rows:
                w.writerow([_fmt(r["ratio"]), _fmt(1.0)])
        for log in self.runs:
            log.to_csv(out / f"series_{log.label}.csv")
        (out / "summary.json").write_text(json.dumps(self.summary, indent=2))
        return out


def report(runs):
    pairs = pair_runs(runs)
    rows = []
    for p, f in pairs:
        ratio, _ = relative_cost_row(p.total_cost, f.total_cost)
        rows.append({"proposed": p.label, "follower": f.label, "proposed_cost": p.total_cost,
                     "follower_cost": f.total_cost, "ratio": ratio})
    seen = []
    for log in runs:
        if log not in seen:
            seen.append(log)
    summary = {
        "relative_costs": rows,
        "runs": [run_summary(r) for r in seen],
        "violations_total": int(sum(r.violation_count for r in seen if r.kind == "proposed")),
        "fallbacks_total": int(sum(r.fallback_count for r in seen if r.kind == "proposed")),
        "mean_ratio": float(np.mean([r["ratio"] for r in rows])),
    }
    return ReportBundle(rows, summary, seen)


def write_run(log, out_dir, name=None):
    """RunLog CSV plus a JSON sidecar with bounds and solver summaries."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = name or log.label
    log.to_csv(out / f"{name}.csv")
    side = {
        "label": log.label, "kind": log.kind, "tank_ids": list(log.tank_ids),
        "lower": np.asarray(log.lower).tolist(), "upper": np.asarray(log.upper).tolist(),
        "terminal": None if log.terminal is None else np.asarray(log.terminal).tolist(),
        "steps_per_day": log.steps_per_day,
        "final_levels": None if log.final_levels is None else np.asarray(log.final_levels).tolist(),
        "final_state": None if log.final_state is None else np.asarray(log.final_state).tolist(),
        "summary": run_summary(log),
        "solutions": [s.summary() for s in log.solutions],
    }
    (out / f"{name}.json").write_text(json.dumps(side, indent=2))
    return out / f"{name}.csv"


def read_run(csv_path):
    csv_path = Path(csv_path)
    side_path = csv_path.with_suffix(".json")
    side = json.loads(side_path.read_text()) if side_path.exists() else {}
    kind = side.get("kind") or ("follower" if csv_path.stem.startswith("benchmark") else "proposed")
    lower = np.array(side["lower"]) if "lower" in side else None
    upper = np.array(side["upper"]) if "upper" in side else None
    log = RunLog.from_csv(csv_path, side.get("label", csv_path.stem), kind, lower, upper)
    if side.get("final_levels") is not None:
        log.final_levels = np.array(side["final_levels"])
    if side.get("final_state") is not None:
        log.final_state = np.array(side["final_state"])
    if side.get("terminal") is not None:
        log.terminal = np.array(side["terminal"])
    log.steps_per_day = int(side.get("steps_per_day", 24))
    return log


def report_dir(directory, out_dir=None):
    """Report over every ``run*.csv`` / ``benchmark*.csv`` in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"report directory not found: {directory}")
    files = sorted(directory.glob("run*.csv")) + sorted(directory.glob("benchmark*.csv"))
    runs = [read_run(f) for f in files]
    bundle = report(runs)
    bundle.runs = []
    bundle.write(out_dir or directory)
    return bundle
