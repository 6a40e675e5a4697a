"""Batch front end: layout inspection, single runs, scripted attacks,
Monte Carlo campaigns, and differential reports.

Exit codes: 0 for completed commands (a detected attack is a successful
measurement, not a tool error), 1 for configuration or parse errors, 2 for
internal invariant violations. All configuration is explicit via flags and
files; environment variables are deliberately unused.
"""

from __future__ import annotations

import argparse
import json
import secrets
import sys
from pathlib import Path

from . import attack as attack_mod
from . import vm as vm_mod
from .attack import ScriptError, brute_force_campaign, differential_matrix, \
    execute_script, parse_script
from .instrument import LayoutError, ProtectionMode, build_plan, layout_frame
from .pa import PacConfigError
from .program import Program, ProgramError, parse_program
from .vm import VmConfig, run


class _CliParser(argparse.ArgumentParser):
    def error(self, message: str):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", default="pcan_standalone",
                        choices=[m.value for m in ProtectionMode])
    parser.add_argument("--pac-width", type=int, default=16)
    parser.add_argument("--threshold", type=int, default=8)
    parser.add_argument("--no-rearrange", action="store_true",
                        help="keep pure declaration order for locals")
    parser.add_argument("--format", default="table",
                        choices=["json", "table"])


def build_parser() -> argparse.ArgumentParser:
    parser = _CliParser(prog="canarylab")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("layout", help="per-function frame layout")
    _add_common(p)
    p.add_argument("program", type=Path)

    p = sub.add_parser("run", help="execute a program under a mode")
    _add_common(p)
    p.add_argument("program", type=Path)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("attack", help="run a scripted attack")
    _add_common(p)
    p.add_argument("program", type=Path)
    p.add_argument("script", type=Path)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("campaign", help="Monte Carlo brute-force campaign")
    _add_common(p)
    p.add_argument("program", type=Path)
    p.add_argument("--restart", default="rekey", choices=["fork", "rekey"])
    p.add_argument("--strategy", default="random",
                   choices=["random", "byte_by_byte"])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--budget", type=int, default=4096)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--function")
    p.add_argument("--buffer")

    p = sub.add_parser("matrix", help="scenario x mode differential matrix")
    _add_common(p)
    p.add_argument("program", type=Path)
    p.add_argument("scripts", type=Path, nargs="+")
    p.add_argument("--modes", default=",".join(m.value for m in ProtectionMode))
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    return parser


def _read(path: Path, what: str) -> str:
    try:
        return path.read_text()
    except OSError as exc:
        raise ProgramError(f"cannot read {what} {path}: {exc.strerror}") from exc


def _config(args) -> VmConfig:
    return VmConfig(pac_width=args.pac_width, threshold=args.threshold,
                    rearrange=not args.no_rearrange)


def _seed(args) -> int:
    if args.seed is None:
        seed = secrets.randbits(32)
        print(f"seed: {seed} (generated)")
        return seed
    print(f"seed: {args.seed}")
    return args.seed


def _layout_dict(program: Program, mode: ProtectionMode,
                 config: VmConfig) -> dict:
    out = {"mode": mode.value, "functions": []}
    for name, fn in program.functions.items():
        layout = layout_frame(fn, mode, config.threshold, config.rearrange,
                              config.max_frame_size)
        plan = build_plan(fn, layout, mode, config.threshold)
        out["functions"].append({
            "name": name,
            "frame_size": layout.frame_size,
            "canary_count": plan.canary_count,
            "c0_kind": plan.c0_kind,
            "slots": [
                {"offset": s.offset, "size": s.size, "role": s.role,
                 **({"index": s.index} if s.role == "canary" else {}),
                 **({"name": s.name} if s.name else {})}
                for s in layout.slots
            ],
        })
    return out


def _print_layout_table(data: dict) -> None:
    for fn in data["functions"]:
        print(f"{fn['name']}  frame={fn['frame_size']}  "
              f"canaries={fn['canary_count']}  c0={fn['c0_kind']}")
        for s in fn["slots"]:
            label = s.get("name") or (f"C{s['index']}" if "index" in s else "")
            print(f"  {s['offset']:>5}  {s['size']:>4}  {s['role']:<13} {label}")


def _emit(data: dict, fmt: str, table_fn=None) -> None:
    if fmt == "json":
        print(json.dumps(data, indent=2, sort_keys=True))
    elif table_fn is not None:
        table_fn(data)
    else:
        print(json.dumps(data, indent=2, sort_keys=True))


def _print_report_table(data: dict) -> None:
    print(f"status: {data['status']}")
    if "fault" in data:
        print(f"fault: {json.dumps(data['fault'], sort_keys=True)}")
    print(f"counts: {json.dumps(data['counts'], sort_keys=True)}")
    for event in data["events"]:
        print(f"  [{event['step']:>5}] "
              + " ".join(f"{k}={v}" for k, v in event.items() if k != "step"))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _dispatch(args)
    except (ProgramError, ScriptError, LayoutError, PacConfigError,
            vm_mod.VmConfigError, ValueError) as exc:
        print(f"canarylab: error: {exc}", file=sys.stderr)
        return 1
    except AssertionError as exc:
        print(f"canarylab: internal invariant violation: {exc}",
              file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    mode = ProtectionMode(args.mode)
    config = _config(args)

    if args.subcommand == "layout":
        program = parse_program(_read(args.program, "program file"))
        data = _layout_dict(program, mode, config)
        _emit(data, args.format, _print_layout_table)
        return 0

    if args.subcommand == "run":
        program = parse_program(_read(args.program, "program file"))
        seed = _seed(args)
        report = run(program, mode, seed, config)
        _emit(report.to_dict(), args.format, _print_report_table)
        return 0

    if args.subcommand == "attack":
        program = parse_program(_read(args.program, "program file"))
        script = parse_script(_read(args.script, "script file"))
        seed = _seed(args)
        result = execute_script(program, mode, script, seed, config)
        data = result.report.to_dict()
        data["outcome"] = result.outcome
        data["transcript"] = result.transcript
        _emit(data, args.format, _print_report_table)
        return 0

    if args.subcommand == "campaign":
        program = parse_program(_read(args.program, "program file"))
        seed = _seed(args)
        result = brute_force_campaign(
            program, mode, args.restart, args.strategy, args.trials,
            args.budget, args.pac_width, seed, workers=args.workers,
            function=args.function, buffer=args.buffer, config=config)
        data = result.to_dict()
        total = sum(result.attempts)
        rate = result.bypassed / max(result.trials, 1)
        # Normal-approximation 95% confidence interval on the bypass rate.
        sigma = (rate * (1 - rate) / max(result.trials, 1)) ** 0.5
        data["bypass_rate"] = rate
        data["bypass_rate_ci95"] = [max(0.0, rate - 1.96 * sigma),
                                    min(1.0, rate + 1.96 * sigma)]
        if args.format == "table":
            print(f"trials={result.trials} attempts={total} "
                  f"bypassed={result.bypassed} detected={result.detected}")
            print(f"bypass rate {rate:.6f} "
                  f"ci95 [{data['bypass_rate_ci95'][0]:.6f}, "
                  f"{data['bypass_rate_ci95'][1]:.6f}]")
            if result.median_attempts_to_bypass is not None:
                print(f"median attempts to bypass "
                      f"{result.median_attempts_to_bypass}")
        else:
            print(json.dumps(data, indent=2, sort_keys=True))
        return 0

    if args.subcommand == "matrix":
        program = parse_program(_read(args.program, "program file"))
        scenarios = {
            path.stem: parse_script(_read(path, "script file"))
            for path in args.scripts
        }
        modes = [ProtectionMode(m.strip()) for m in args.modes.split(",")]
        seed = _seed(args)
        matrix = differential_matrix(program, scenarios, modes, seed, config)
        if args.format == "json":
            print(json.dumps(matrix, indent=2, sort_keys=True))
        else:
            for scenario in matrix:
                print(scenario)
                for mode_name, outcome in matrix[scenario].items():
                    print(f"  {mode_name:<18} {outcome}")
        return 0

    raise AssertionError(f"unhandled subcommand {args.subcommand}")


if __name__ == "__main__":
    sys.exit(main())
