"""rot-cfi-sim command line.

Exit codes: 0 success, 2 usage or input error, 3 the run ended with a CFI
violation (``attack`` returns 1 if the injected corruption went unnoticed).
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from pathlib import Path

from . import synth
from .profiles import BUILTIN_PROFILES, ProfileError, get_profile
from .sim import SimConfig, compare_profiles, emit_report, format_comparison, run
from .trace import DecodeError, TraceFormatError, make_commit_log, parse_trace, serialize_trace

EXIT_OK = 0
EXIT_UNDETECTED = 1
EXIT_USAGE = 2
EXIT_VIOLATION = 3

_SIM_DEFAULTS = {
    "profile": "optimized",
    "queue_depth": 1,
    "bus_width": 64,
    "transfer_cost": 0,
    "averaged": False,
    "halt_on_violation": False,
    "format": "text",
    "stack_capacity": 1024,
    "xlen": 64,
}


class InputError(Exception):
    pass


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _add_trace(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trace", required=True, metavar="PATH", help="trace file, or - for stdin")


def _add_sim_options(p: argparse.ArgumentParser, multi_profile: bool = False) -> None:
    # defaults stay None so values from --config can fill in; flags win
    if multi_profile:
        p.add_argument("--profiles", default=None,
                       help="comma-separated profile names or JSON files")
        p.add_argument("--queue-depth", type=_positive, nargs="+", default=None, metavar="N")
    else:
        p.add_argument("--profile", default=None,
                       help="irq, polling, optimized, or a JSON profile table")
        p.add_argument("--queue-depth", type=_positive, default=None, metavar="N")
    p.add_argument("--bus-width", type=int, choices=(32, 64, 128), default=None)
    p.add_argument("--transfer-cost", type=_non_negative, default=None, metavar="N",
                   help="cycles per bus beat added to every check")
    p.add_argument("--averaged", action="store_true", default=None,
                   help="charge every event the mean of call and return latency")
    p.add_argument("--halt-on-violation", action="store_true", default=None)
    p.add_argument("--stack-capacity", type=_positive, default=None, metavar="N")
    p.add_argument("--xlen", type=int, choices=(32, 64), default=None)
    p.add_argument("--format", choices=("text", "json"), default=None)
    p.add_argument("--config", metavar="FILE", help="JSON file of option defaults")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rot-cfi-sim",
        description="Replay RISC-V retire traces through a RoT-enforced CFI pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("classify", help="list the control-flow events in a trace")
    _add_trace(p)
    p.add_argument("--xlen", type=int, choices=(32, 64), default=64)
    p.add_argument("--format", choices=("text", "json"), default="text")

    p = sub.add_parser("simulate", help="run one configuration")
    _add_trace(p)
    _add_sim_options(p)

    p = sub.add_parser("compare", help="sweep profiles and queue depths")
    _add_trace(p)
    _add_sim_options(p, multi_profile=True)
    p.add_argument("--jobs", type=_positive, default=1, help="parallel worker processes")

    p = sub.add_parser("attack", help="corrupt one return target and check it is caught")
    _add_trace(p)
    p.add_argument("--corrupt-return-at", type=_non_negative, required=True, metavar="K",
                   help="trace index of the return to corrupt")
    p.add_argument("--seed", type=int, default=0)
    _add_sim_options(p)

    p = sub.add_parser("profiles", help="print the built-in firmware cost tables")
    p.add_argument("--format", choices=("text", "json"), default="text")

    p = sub.add_parser("gen", help="emit a synthetic trace")
    gen = p.add_subparsers(dest="pattern", required=True)
    g = gen.add_parser("balanced", help="well-nested call tree")
    g.add_argument("--depth", type=_non_negative, required=True)
    g.add_argument("--width", type=_non_negative, required=True)
    g.add_argument("--gap", type=_positive, default=1)
    g.add_argument("--filler", type=_non_negative, default=0)
    g.add_argument("--seed", type=int, default=None, help="randomize encodings and filler")
    g = gen.add_parser("burst", help="back-to-back returns")
    g.add_argument("--n", type=_non_negative, required=True)
    g = gen.add_parser("gap", help="call/return pairs at a fixed spacing")
    g.add_argument("--n", type=_non_negative, required=True)
    g.add_argument("--gap", type=_positive, required=True)
    g = gen.add_parser("random", help="unstructured trace at a given CF density")
    g.add_argument("--n", type=_non_negative, required=True)
    g.add_argument("--density", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)
    g = gen.add_parser("random-balanced", help="random well-nested program")
    g.add_argument("--max-calls", type=_non_negative, default=200)
    g.add_argument("--seed", type=int, default=0)
    for g in gen.choices.values():
        g.add_argument("-o", "--output", metavar="PATH", help="write here instead of stdout")
    return parser


def _read_trace(path: str):
    try:
        if path == "-":
            return parse_trace(sys.stdin)
        with open(path, encoding="utf-8") as fh:
            return parse_trace(fh)
    except OSError as exc:
        raise InputError(f"cannot read trace {path}: {exc.strerror}") from exc
    except TraceFormatError as exc:
        raise InputError(f"{path}: {exc}") from exc


def _options(args: argparse.Namespace, **overrides) -> dict:
    file_opts = {}
    if getattr(args, "config", None):
        try:
            file_opts = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise InputError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.config}: invalid JSON: {exc}") from exc
        if not isinstance(file_opts, dict):
            raise InputError(f"{args.config}: expected a JSON object")
        unknown = set(file_opts) - set(_SIM_DEFAULTS) - {"profiles"}
        if unknown:
            raise InputError(f"{args.config}: unknown keys {sorted(unknown)}")
    opts = {}
    for key, default in {**_SIM_DEFAULTS, **overrides}.items():
        flag = getattr(args, key, None)
        opts[key] = flag if flag is not None else file_opts.get(key, default)
    opts["profiles"] = getattr(args, "profiles", None) or file_opts.get("profiles")
    return opts


def _config(opts: dict, profile) -> SimConfig:
    try:
        return SimConfig(
            profile=profile,
            queue_depth=int(opts["queue_depth"]),
            bus_width_bits=int(opts["bus_width"]),
            transfer_cost_per_beat=int(opts["transfer_cost"]),
            halt_on_violation=bool(opts["halt_on_violation"]),
            averaged=bool(opts["averaged"]),
            stack_capacity=int(opts["stack_capacity"]),
            xlen=int(opts["xlen"]),
        )
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid configuration: {exc}") from exc


def _profile(name: str):
    try:
        return get_profile(name)
    except ProfileError as exc:
        raise InputError(str(exc)) from exc


def cmd_classify(args) -> int:
    records = _read_trace(args.trace)
    events = []
    for i, rec in enumerate(records):
        log = make_commit_log(rec, args.xlen)
        if log is not None:
            events.append((i, rec, log))
    if args.format == "json":
        print(json.dumps([
            {"trace_index": i, "cycle": rec.cycle, "pc": log.pc, "kind": log.kind.value,
             "encoding": log.encoding, "next_addr": log.next_addr, "target_addr": log.target_addr}
            for i, rec, log in events
        ], indent=2))
    else:
        print(f"{'index':>8} {'cycle':>10} {'pc':>18} {'kind':<14} {'encoding':>10} {'target':>18}")
        for i, rec, log in events:
            print(f"{i:>8} {rec.cycle:>10} {log.pc:>#18x} {log.kind.value:<14} "
                  f"{log.encoding:>#10x} {log.target_addr:>#18x}")
        print(f"{len(events)} control-flow events in {len(records)} records")
    return EXIT_OK


def cmd_simulate(args) -> int:
    opts = _options(args)
    config = _config(opts, _profile(opts["profile"]))
    records = _read_trace(args.trace)
    report = run(records, config, label=Path(args.trace).stem)
    sys.stdout.write(emit_report(report, opts["format"]))
    return EXIT_VIOLATION if report.violations else EXIT_OK


def cmd_compare(args) -> int:
    opts = _options(args, queue_depth=[1, 8])
    names = opts["profiles"] or "optimized,polling,irq"
    if isinstance(names, str):
        names = [n for n in names.split(",") if n]
    depths = opts["queue_depth"]
    depths = depths if isinstance(depths, list) else [depths]
    configs = [
        _config({**opts, "queue_depth": d}, _profile(name)) for name in names for d in depths
    ]
    records = _read_trace(args.trace)
    reports = compare_profiles(records, configs, label=Path(args.trace).stem, jobs=args.jobs)
    if opts["format"] == "json":
        print(json.dumps([r.to_dict() for r in reports], indent=2))
    else:
        sys.stdout.write(format_comparison(reports))
    return EXIT_VIOLATION if any(r.violations for r in reports) else EXIT_OK


def cmd_attack(args) -> int:
    opts = _options(args)
    config = _config(opts, _profile(opts["profile"]))
    records = _read_trace(args.trace)
    k = args.corrupt_return_at
    try:
        attacked = synth.corrupt_return(records, k, seed=args.seed)
    except (IndexError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    report = run(attacked, config, label=f"{Path(args.trace).stem}@{k}")
    sys.stdout.write(emit_report(report, opts["format"]))
    if any(v.trace_index == k for v in report.violations):
        print(f"corruption at trace index {k} detected", file=sys.stderr)
        return EXIT_VIOLATION
    print(f"corruption at trace index {k} NOT detected", file=sys.stderr)
    return EXIT_UNDETECTED


def cmd_profiles(args) -> int:
    if args.format == "json":
        print(json.dumps([p.to_dict() for p in BUILTIN_PROFILES.values()], indent=2))
        return EXIT_OK
    print(f"{'profile':<10} {'call':>6} {'return':>7} {'average':>8}  "
          f"{'IRQ call/ret':>13}  {'CFI call/ret':>13}")
    for p in BUILTIN_PROFILES.values():
        has_irq = "irq" in p.breakdown.get("call", {})
        irq = (
            f"{p.breakdown_total('call', 'irq')}/{p.breakdown_total('return', 'irq')}"
            if has_irq
            else "–"
        )
        cfi = f"{p.breakdown_total('call', 'cfi')}/{p.breakdown_total('return', 'cfi')}"
        print(f"{p.variant:<10} {p.call_cycles:>6} {p.return_cycles:>7} "
              f"{p.average_latency:>8}  {irq:>13}  {cfi:>13}")
    return EXIT_OK


def gen_synthetic(pattern: str, **params) -> str:
    """Trace text for one of the named synthetic patterns."""
    if pattern == "balanced":
        records = synth.balanced_tree(
            params["depth"], params["width"], gap=params.get("gap", 1),
            filler=params.get("filler", 0), seed=params.get("seed"),
        )
    elif pattern == "burst":
        records = synth.burst(params["n"])
    elif pattern == "gap":
        records = synth.fixed_gap(params["n"], params["gap"])
    elif pattern == "random":
        density = params.get("density", 0.2)
        if not 0.0 <= density <= 1.0:
            raise ValueError("density must be within [0, 1]")
        records, _ = synth.random_trace(random.Random(params.get("seed", 0)), params["n"], density)
    elif pattern == "random-balanced":
        records, _ = synth.random_balanced(
            random.Random(params.get("seed", 0)), params.get("max_calls", 200)
        )
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    return serialize_trace(records)


def cmd_gen(args) -> int:
    params = {k: v for k, v in vars(args).items() if k not in ("command", "pattern", "output")}
    try:
        text = gen_synthetic(args.pattern, **params)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "classify": cmd_classify,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "attack": cmd_attack,
    "profiles": cmd_profiles,
    "gen": cmd_gen,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (InputError, DecodeError) as exc:
        print(f"rot-cfi-sim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
