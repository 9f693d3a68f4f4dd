"""Command-line entry point.

Each subcommand reads a scenario JSON and writes into ``--out`` (default:
the scenario's ``output_dir``). Later stages reuse ``models.json`` and
``periodic.json`` found there, so ``identify``, ``periodic``, ``run``,
``benchmark`` and ``report`` can be chained.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import empc, hydronet, nlpsolve, sysid
from . import closedloop
from . import report as reporting
from .scenario import ScenarioError, load_scenario

log = logging.getLogger("periodic_empc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser():
    p = _Parser(prog="periodic-empc", description="Periodic economic MPC for water networks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in [
        ("identify", "identify the linear models, write models.json"),
        ("periodic", "compute the periodic orbit, write periodic.json"),
        ("run", "closed-loop run, write run_seed<S>.csv"),
        ("benchmark", "demand follower, write benchmark_seed<S>.csv"),
    ]:
        s = sub.add_parser(name, help=helptext)
        s.add_argument("scenario", type=Path)
        s.add_argument("--seed", type=int)
        s.add_argument("--days", type=int)
        s.add_argument("--out", type=Path)
    r = sub.add_parser("report", help="relative-cost table and summary for a run directory")
    r.add_argument("directory", type=Path)
    r.add_argument("--out", type=Path)
    return p


def _scenario(args):
    sc = load_scenario(args.scenario, seed=args.seed, days=args.days)
    out = Path(args.out) if args.out is not None else sc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return sc, out


def _models(sc, out):
    path = out / "models.json"
    if path.exists():
        return sysid.load_models(path)
    res = closedloop.identify_for(sc)
    return res.model, res.pressure


def _setup(sc, out):
    models = _models(sc, out)
    periodic = None
    ppath = out / "periodic.json"
    if ppath.exists() and (out / "models.json").exists():
        periodic = empc.PeriodicTrajectory.from_dict(json.loads(ppath.read_text()))
    return closedloop.prepare(sc, models=models, periodic=periodic)


def cmd_identify(args):
    sc, out = _scenario(args)
    ident = dict(sc.identification)
    if args.seed is not None:
        ident["seed"] = args.seed
    sc.identification = ident
    res = closedloop.identify_for(sc)
    extra = {
        "validation_rms": res.validation_rms.tolist(),
        "validation_pressure_rms": res.validation_pressure_rms.tolist(),
        "tank_groups": [list(g) for g in res.aggregation.groups],
    }
    sysid.save_models(out / "models.json", res.model, res.pressure, extra)
    res.train.to_csv(out / "dataset.csv")
    print(f"spectral radius {res.model.spectral_radius:.6g}; hold-out RMS "
          + ", ".join(f"{x:.6g}" for x in res.validation_rms) + " m")
    print(f"wrote {out / 'models.json'}")


def cmd_periodic(args):
    sc, out = _scenario(args)
    setup = closedloop.prepare(sc, models=_models(sc, out))
    traj = setup.periodic
    (out / "periodic.json").write_text(json.dumps(traj.to_dict(), indent=2))
    print(f"periodic cost {traj.cost:.6g}; residual {traj.periodicity_residual:.3g}")
    print(f"wrote {out / 'periodic.json'}")


def cmd_run(args):
    sc, out = _scenario(args)
    setup = _setup(sc, out)
    runlog = closedloop.run_closed_loop(sc, setup, label=f"run_seed{sc.seed}")
    path = reporting.write_run(runlog, out)
    print(f"cost {runlog.total_cost:.6g}; violations {runlog.violation_count}; "
          f"fallbacks {runlog.fallback_count}")
    print(f"wrote {path}")


def cmd_benchmark(args):
    sc, out = _scenario(args)
    setup = _setup(sc, out)
    runlog = closedloop.demand_follower(sc, setup, label=f"benchmark_seed{sc.seed}")
    path = reporting.write_run(runlog, out)
    print(f"cost {runlog.total_cost:.6g}; violations {runlog.violation_count}")
    print(f"wrote {path}")


def cmd_report(args):
    bundle = reporting.report_dir(args.directory, args.out)
    print("proposed,follower")
    for row in bundle.rows:
        print(f"{row['ratio']:.4f},1  ({row['proposed']} vs {row['follower']})")


COMMANDS = {
    "identify": cmd_identify,
    "periodic": cmd_periodic,
    "run": cmd_run,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
}

RUNTIME_ERRORS = (
    OSError, ScenarioError, hydronet.HydraulicError, hydronet.TopologyError,
    sysid.IdentificationError, empc.PeriodicInfeasible, nlpsolve.EvaluationFailure,
    closedloop.ClosedLoopError, closedloop.BenchmarkInfeasible, ValueError, KeyError,
)


def cli(argv=None):
    """Run the CLI; returns the exit code instead of exiting."""
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
