"""Command line entry point: ``ckptf run`` and ``ckptf filltime``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import filltime
from .errors import CkptfError


def _run(args) -> int:
    from .ckpt.drain import DrainPolicy
    from .harness.driver import RunConfig, launch
    from .harness.rank import Pause
    from .harness.workloads import WorkloadSpec

    spec = WorkloadSpec(args.workload, ranks=args.ranks, nodes=args.nodes, iterations=args.iters,
                        payload_bytes=args.payload_bytes, seed=args.seed)
    config = RunConfig(topology="tree" if args.tree else "flat", clock=args.clock,
                       resolve=args.resolve, ckpt_dir=args.ckpt_dir,
                       drain=DrainPolicy(window=args.drain_window) if args.drain_window else None)
    handle = launch(spec, config)
    try:
        if args.ckpt_at is not None:
            if not handle.inject_checkpoint_at(args.ckpt_at, mid=args.mid):
                print("checkpoint aborted", file=sys.stderr)
            if args.kill_and_restart:
                kill_at = args.kill_at if args.kill_at is not None else min(
                    spec.iterations, args.ckpt_at + max(1, (spec.iterations - args.ckpt_at) // 2))
                handle.run_until(Pause(kill_at))
                handle.kill_all()
                handle.restart_all(lazy=args.lazy_restart, identity=args.identity)
        elif args.kill_and_restart:
            raise CkptfError("--kill-and-restart needs --ckpt-at")
        report = handle.run_workload()
    finally:
        if handle.plane is not None:
            handle.plane.close()
    line = report.to_json()
    if args.report:
        with open(args.report, "a") as f:
            f.write(line + "\n")
    if args.json:
        print(line)
    else:
        print(report.summary())
    return 0 if report.ok and report.completed else 1


def _filltime(args) -> int:
    if args.spec:
        specs = filltime.parse_spec_file(Path(args.spec).read_text())
    else:
        specs = list(filltime.TABLE1)
    text, rows = filltime.render_table(specs, real_world_factor=args.real_world_factor)
    if args.json:
        for row in rows:
            print(json.dumps(row, sort_keys=True))
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ckptf", description="Coordinated checkpoint-restart engine")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a workload, optionally checkpointing and restarting it")
    r.add_argument("--workload", choices=["ring", "stencil", "allreduce"], required=True)
    r.add_argument("--ranks", type=int, required=True)
    r.add_argument("--nodes", type=int, default=1)
    r.add_argument("--iters", type=int, default=10)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--payload-bytes", type=int, default=64)
    r.add_argument("--tree", action="store_true", help="use per-node sub-coordinators")
    r.add_argument("--ckpt-at", type=int, help="checkpoint when every rank reaches this iteration")
    r.add_argument("--mid", action="store_true", help="checkpoint after the sends of the iteration")
    r.add_argument("--kill-and-restart", action="store_true")
    r.add_argument("--kill-at", type=int, help="iteration at which every rank is killed")
    r.add_argument("--lazy-restart", action="store_true")
    r.add_argument("--identity", action="store_true",
                   help="keep LID and QPN values unchanged across the restart")
    r.add_argument("--clock", choices=["virtual", "wall"], default="virtual")
    r.add_argument("--resolve", choices=["per_send", "generation_cached"], default="per_send")
    r.add_argument("--drain-window", type=float)
    r.add_argument("--ckpt-dir")
    r.add_argument("--report", help="append the JSON report line to this file")
    r.add_argument("--json", action="store_true", help="print the JSON report instead of a summary")
    r.set_defaults(func=_run)

    f = sub.add_parser("filltime", help="predict checkpoint times with the fill-time law")
    g = f.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="key=value system description file")
    g.add_argument("--table1", action="store_true", help="use the built-in dataset")
    f.add_argument("--real-world-factor", type=float, default=filltime.DEFAULT_REAL_WORLD_FACTOR)
    f.add_argument("--json", action="store_true")
    f.set_defaults(func=_filltime)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CkptfError, ValueError, OSError) as exc:
        print(f"ckptf: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
