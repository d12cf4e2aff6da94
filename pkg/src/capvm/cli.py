"""capvm command line: run deployments, demos, benchmarks and the escape suite."""

from __future__ import annotations

import argparse
import logging
import sys

from capvm.abi import HostcallGroup
from capvm.config import ConfigError, load_config, parse_size
from capvm.errors import CapvmError


def _sizes(text: str) -> list[int]:
    try:
        return [parse_size(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def cmd_run(args) -> int:
    from capvm.bench import run_cvms

    configs = load_config(args.config)
    multi = len(configs) > 1

    def console(name: str, text: str) -> None:
        if multi:
            text = "".join(f"[{name}] {line}\n" for line in text.splitlines())
        sys.stdout.write(text)
        sys.stdout.flush()

    run = run_cvms(configs, args.timeout, console=console)
    status = 0
    for name, code in run.exit_codes.items():
        for fault in run.faults[name]:
            print(f"capvm: {name}: {fault}", file=sys.stderr)
        if code:
            status = 1
    print(f"capvm: {len(configs)} cVM(s) in {run.wall_ns / 1e6:.1f} ms, "
          f"{run.cinvokes} cinvokes, {run.bytes_copied} bytes copied", file=sys.stderr)
    return status


def cmd_bench(args) -> int:
    from capvm.bench import bench, to_csv

    results = bench(args.mech, args.sizes, args.iters)
    text = to_csv(results)
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(text)
    sys.stdout.write(text)
    return 0


def cmd_demo(args) -> int:
    from capvm.bench import demo_kv

    stats = demo_kv(args.ops, args.transport, args.seed)
    print(stats.report())
    return 0 if not stats.mismatches else 1


def cmd_attack(args) -> int:
    from capvm.attacks import attacker_suite

    report = attacker_suite(args.only or None)
    for r in report.results:
        print(("ok   " if r.ok else "FAIL ") + str(r))
    print(f"victim memory {'intact' if report.victim_intact else 'MODIFIED'}, "
          f"{report.escapes} escape(s)")
    return 0 if report.passed else 1


def cmd_hostcalls(args) -> int:
    from capvm.intravisor import Intravisor

    iv = Intravisor(1 << 20)
    for group in HostcallGroup:
        calls = iv.hostcalls_in(group)
        print(f"{group.value} ({len(calls)}): " + ", ".join(h.name for h in calls))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capvm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="boot the cVMs of a deployment config")
    r.add_argument("config")
    r.add_argument("--timeout", type=float, default=120.0)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="compare data-sharing mechanisms, CSV out")
    b.add_argument("--mech", nargs="+", default=["file", "stream", "pipe", "memcpy"],
                   type=str.lower, choices=["file", "stream", "pipe", "memcpy"])
    b.add_argument("--sizes", type=_sizes, default=_sizes("4K,64K,1M,4M"))
    b.add_argument("--iters", type=int, default=30)
    b.add_argument("--csv", metavar="PATH")
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("demo", help="run a demo deployment")
    d.add_argument("which", choices=["kv"])
    d.add_argument("--ops", type=int, default=1000)
    d.add_argument("--transport", choices=["stream", "pipe"], default="stream")
    d.add_argument("--seed", type=int, default=1)
    d.set_defaults(func=cmd_demo)

    a = sub.add_parser("attack", help="run the escape suite against a victim cVM")
    a.add_argument("only", nargs="*", help="attack names (default: all)")
    a.set_defaults(func=cmd_attack)

    h = sub.add_parser("hostcalls", help="list the hostcall table by group")
    h.set_defaults(func=cmd_hostcalls)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"capvm: {e}", file=sys.stderr)
        return 2
    except CapvmError as e:
        print(f"capvm: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
