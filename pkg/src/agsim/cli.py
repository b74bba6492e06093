"""Headless runner and batch harness.

Three subcommands: `run` (one mission, optionally serving a live
console), `batch` (seed sweeps with per-condition aggregates), and
`replay` (re-run a recorded event log, optionally piping the snapshots
to a console).  Exit codes: 0 mission success, 2 mission failure,
1 anything that kept a verdict from being produced.
"""

from __future__ import annotations

import argparse
import json
import shlex
import sys

from . import engine as eng
from .reasoner import build_reasoner
from .server import ConsoleServer


class _Parser(argparse.ArgumentParser):
    # usage problems are errors, not mission failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _seed_range(text: str) -> range:
    try:
        a, b = text.split("..")
        lo, hi = int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError("expected A..B, e.g. 0..19")
    if hi < lo:
        raise argparse.ArgumentTypeError("seed range is empty")
    return range(lo, hi + 1)


def _distances(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers")


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--scenario", required=True, help="bundled name or JSON path")
    p.add_argument("--mission", required=True, help="bundled name or JSON path")
    p.add_argument("--reasoner", choices=("rules", "adapter"), default=None,
                   help="override the mission's planner backend")
    p.add_argument("--adapter-cmd", default=None,
                   help="external planner command line (with --reasoner adapter)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--no-prior", action="store_true",
                       help="ground robot only, no aerial mapper, no prior map")
    group.add_argument("--gt-prior", action="store_true",
                       help="ground robot with the scenario's prior map, no aerial mapper")
    p.add_argument("--goal-distance", type=float, default=None, metavar="M",
                   help="slide the goal group M meters along the scenario's goal axis")
    p.add_argument("--export", default=None, metavar="DIR", help="write artifacts here")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agsim")
    sub = parser.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run one mission")
    _add_run_flags(run)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--serve", type=int, default=None, metavar="PORT",
                     help="serve console clients on this port (0 picks one)")
    run.add_argument("--rtf", type=float, default=None,
                     help="real-time factor; defaults to 1.0 when serving")

    batch = sub.add_parser("batch", help="seed sweep with aggregates")
    _add_run_flags(batch)
    batch.add_argument("--seeds", type=_seed_range, required=True, metavar="A..B")
    batch.add_argument("--goal-distances", type=_distances, default=None,
                       metavar="D1,D2,...", help="sweep the goal over these distances")

    rep = sub.add_parser("replay", help="re-run a recorded event log")
    rep.add_argument("log", help="events.jsonl from a previous run")
    rep.add_argument("--serve", type=int, default=None, metavar="PORT")
    rep.add_argument("--rtf", type=float, default=None)
    rep.add_argument("--export", default=None, metavar="DIR")
    return parser


def _baseline(args) -> dict:
    if args.no_prior:
        return {"use_uav": False, "use_prior": False}
    if args.gt_prior:
        return {"use_uav": False, "use_prior": True}
    return {"use_uav": True}


def _backend(args):
    if args.reasoner is None:
        return None
    if args.reasoner == "adapter":
        if not args.adapter_cmd:
            raise eng.ConfigError("--reasoner adapter needs --adapter-cmd")
        return build_reasoner("adapter", argv=shlex.split(args.adapter_cmd))
    return build_reasoner("rules")


def _summary_line(metrics) -> str:
    bits = [
        f"success={str(metrics.success).lower()}",
        f"time_s={metrics.time_s:.1f}",
        f"distance_m={sum(metrics.distance.values()):.1f}",
        f"autonomy={metrics.autonomy:.3f}",
        f"user_interactions={metrics.user_interactions}",
    ]
    if metrics.failure_mode:
        bits.append(f"failure_mode={metrics.failure_mode}")
    if metrics.answer:
        bits.append(f"answer={metrics.answer!r}")
    return "  ".join(bits)


def cmd_run(args) -> int:
    console = None
    rtf = args.rtf
    if args.serve is not None:
        console = ConsoleServer(port=args.serve)
        if rtf is None:
            rtf = 1.0
        print(f"console listening on port {console.port}", flush=True)
    try:
        sim = eng.Engine(args.scenario, args.mission, seed=args.seed,
                         backend=_backend(args), console=console, rtf=rtf,
                         goal_distance=args.goal_distance, **_baseline(args))
        metrics, log = sim.run()
    finally:
        if console is not None:
            console.close()
    print(_summary_line(metrics))
    if args.export:
        for path in eng.export_run(metrics, log, args.export):
            print(f"wrote {path}")
    return 0 if metrics.success else 2


def cmd_batch(args) -> int:
    mode = "ugv" if args.no_prior else ("gt" if args.gt_prior else "uav+ugv")
    sweep = args.goal_distances or [args.goal_distance]
    rows = []
    for dist in sweep:
        cond = mode if dist is None else f"{mode}-{dist:g}m"
        for seed in args.seeds:
            sim = eng.Engine(args.scenario, args.mission, seed=seed,
                             backend=_backend(args), goal_distance=dist,
                             **_baseline(args))
            metrics, _ = sim.run()
            rows.append({
                "condition": cond, "seed": seed, "success": metrics.success,
                "failure_mode": metrics.failure_mode or "",
                "time_s": round(metrics.time_s, 1),
                "distance_m": round(sum(metrics.distance.values()), 1),
                "autonomy": round(metrics.autonomy, 4),
                "api_calls": metrics.api_calls,
                "removed_edges": metrics.removed_edges,
            })
    agg = eng.aggregate_batch(rows)
    for row in agg:
        print(f"{row['condition']:>16s}  runs={row['runs']:<3d} "
              f"success_rate={row['success_rate']:.2f} "
              f"mean_distance_m={row['mean_distance_m']:.1f} "
              f"mean_autonomy={row['mean_autonomy']:.3f}")
    if args.export:
        for path in eng.export_batch(rows, args.export):
            print(f"wrote {path}")
    return 0 if all(r["success"] for r in rows) else 2


def cmd_replay(args) -> int:
    console = None
    rtf = args.rtf
    if args.serve is not None:
        console = ConsoleServer(port=args.serve)
        if rtf is None:
            rtf = 1.0
        print(f"console listening on port {console.port}", flush=True)
    try:
        metrics, log = eng.replay(args.log, console=console, rtf=rtf)
    finally:
        if console is not None:
            console.close()
    print(_summary_line(metrics))
    print(f"log_hash={log.hash()}")
    if args.export:
        for path in eng.export_run(metrics, log, args.export):
            print(f"wrote {path}")
    return 0 if metrics.success else 2


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse handles usage errors and --help
        return int(exc.code or 0)
    try:
        if args.cmd == "run":
            return cmd_run(args)
        if args.cmd == "batch":
            return cmd_batch(args)
        return cmd_replay(args)
    except (eng.ConfigError, eng.EngineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
