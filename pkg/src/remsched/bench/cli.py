"""``remsched`` command line: run experiments, solve and check MDPs, tabulate results.

Exit codes: 0 success (and, for ``check``, all structural properties hold),
1 invalid input or a violated property, 2 value iteration did not converge or
a stored solution fails the Bellman-residual check.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..errors import CapacityError, ConvergenceError, ValidationError
from . import experiment as ex
from .config import load_config

EXIT_OK, EXIT_INVALID, EXIT_CONVERGENCE = 0, 1, 2


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = ex.run_experiment(cfg, args.out)
    runs = ex.load_runs(out)
    for r in runs:
        extra = f"  ({r['error']})" if r["error"] else ""
        print(f"{r['label']:>12} seed {r['seed']}: {r['status']:<8} avg sum MSE {r['avg_mse']:.6g}{extra}")
    print(f"results written to {out}")
    return EXIT_OK


def _cmd_solve(args) -> int:
    cfg = load_config(args.config)
    processes, channel = cfg.build_system()
    mdp, value, _, policy = ex.solve_system(processes, channel, cfg.tau_max, cfg.reward,
                                            cfg.gamma, cfg.tol)
    out = Path(args.out or Path(cfg.output_dir) / "solved")
    summary = ex.write_solved_artifact(out, cfg, processes, channel, mdp, value, policy)
    print(f"value iteration: {value.iterations} sweeps, residual {value.residual:.3g} "
          f"({mdp.space.size} states, {mdp.n_actions} actions)")
    for kind, rep in summary.items():
        print(f"  {rep['summary']}")
    print(f"solution written to {out}")
    return EXIT_OK


def _cmd_check(args) -> int:
    residual, threshold, reports = ex.check_artifact(args.artifact)
    if residual > threshold:
        print(f"Bellman residual {residual:.3g} exceeds {threshold:.3g}", file=sys.stderr)
        return EXIT_CONVERGENCE
    print(f"Bellman residual {residual:.3g} (threshold {threshold:.3g})")
    for rep in reports:
        print(rep.summary())
    return EXIT_OK if all(r.holds for r in reports) else EXIT_INVALID


def _cmd_table(args) -> int:
    runs = [r for d in args.results for r in ex.load_runs(d)]
    header, rows = ex.compare_table(runs)
    if args.out:
        ex.write_table_csv(args.out, header, rows)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    for row in [header, *rows]:
        print("  ".join(str(x).rjust(w) for x, w in zip(row, widths)))
    return EXIT_OK


def _cmd_curves(args) -> int:
    metrics = ex.read_metrics_csv(args.metrics)
    out = args.out or str(Path(args.metrics).with_suffix("")) + "_curves.csv"
    ex.write_curves_csv(out, metrics, args.window)
    print(f"curves written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="remsched", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="train and evaluate every agent of a config")
    r.add_argument("config")
    r.add_argument("--out", help="results directory (default: output.dir of the config)")
    r.set_defaults(func=_cmd_run)
    s = sub.add_parser("solve", help="solve the truncated MDP by value iteration")
    s.add_argument("config")
    s.add_argument("--out", help="artifact directory (default: <output.dir>/solved)")
    s.set_defaults(func=_cmd_solve)
    c = sub.add_parser("check", help="re-verify a solved artifact")
    c.add_argument("artifact")
    c.set_defaults(func=_cmd_check)
    t = sub.add_parser("table", help="comparison table from result directories")
    t.add_argument("results", nargs="+")
    t.add_argument("--out", help="also write the table as CSV")
    t.set_defaults(func=_cmd_table)
    k = sub.add_parser("curves", help="smoothed training curves from a metrics CSV")
    k.add_argument("metrics")
    k.add_argument("--window", type=int, default=10)
    k.add_argument("--out")
    k.set_defaults(func=_cmd_curves)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ValidationError, CapacityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
