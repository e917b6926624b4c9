"""Command-line front end: scenario validation, preset runs, artifact emission.

Exit codes: 0 success, 1 validation failure, 2 runtime/I-O failure,
3 non-convergence under --require-convergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

from . import simkit

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_NO_CONVERGENCE = 3


@dataclass
class RunRequest:
    """One batch request: exactly one of preset/scenario_path."""

    preset: str | None = None
    scenario_path: str | None = None
    seed: int | None = None
    cycles: int | None = None
    out_dir: str = "out"
    emit: tuple[str, ...] = ("summary",)
    noiseless: bool = False
    fine_correction: bool = False
    require_convergence: bool = False

    def __post_init__(self) -> None:
        if (self.preset is None) == (self.scenario_path is None):
            raise ValueError("exactly one of preset / scenario path is required")


def validate_scenario(path: str) -> tuple[simkit.ScenarioConfig | None, list[str]]:
    """Load and fully validate a scenario file; returns (config, errors)."""
    try:
        cfg = simkit.load_scenario(path)
    except FileNotFoundError:
        return None, [f"scenario file not found: {path}"]
    except (ValueError, KeyError, TypeError) as exc:
        return None, [f"cannot parse scenario: {exc}"]
    errors = simkit.validate_scenario(cfg)
    return (cfg if not errors else None), errors


def _resolve_config(req: RunRequest) -> tuple[simkit.ScenarioConfig | None, list[str]]:
    if req.preset is not None:
        try:
            cfg = simkit.preset_scenario(req.preset)
        except KeyError as exc:
            return None, [str(exc.args[0])]
    else:
        cfg, errors = validate_scenario(req.scenario_path)
        if cfg is None:
            return None, errors
    if req.seed is not None:
        cfg.seed = req.seed
    if req.cycles is not None:
        cfg.measurement_cycles = req.cycles
    if req.noiseless:
        cfg.noiseless = True
    if req.fine_correction:
        cfg.fine_correction = True
    errors = simkit.validate_scenario(cfg)
    return (cfg if not errors else None), errors


def format_summary_table(result: simkit.ScenarioResult) -> str:
    cfg = result.config
    lines = [
        f"scenario: {cfg.name}   seed: {cfg.seed}   "
        f"cycles: {cfg.warmup_cycles}+{cfg.measurement_cycles}",
        f"reference node: {next(iter(result.stats.values())).reference}",
        f"convergence: "
        + (f"{result.convergence_us:.3f} us" if result.convergence_us is not None
           else "not converged"),
        "",
        f"{'node':>6} {'mean (ns)':>12} {'std (ns)':>12} {'samples':>8}",
    ]
    for nid in sorted(result.stats):
        s = result.stats[nid]
        lines.append(
            f"{nid:>6} {s.mean_ps / 1000:>12.3f} {s.std_ps / 1000:>12.3f} {s.count:>8}"
        )
    return "\n".join(lines) + "\n"


def summary_dict(result: simkit.ScenarioResult) -> dict:
    return {
        "scenario": result.config.name,
        "seed": result.config.seed,
        "measurement_cycles": result.config.measurement_cycles,
        "warmup_cycles": result.config.warmup_cycles,
        "reference": next(iter(result.stats.values())).reference,
        "convergence_us": result.convergence_us,
        "stats": {
            nid: {"mean_ps": s.mean_ps, "std_ps": s.std_ps, "count": s.count}
            for nid, s in sorted(result.stats.items())
        },
    }


def write_artifacts(result: simkit.ScenarioResult, out_dir: str, emit: tuple[str, ...]) -> list[str]:
    written = []
    if "summary" in emit:
        path = os.path.join(out_dir, "summary.json")
        with open(path, "w") as fh:
            json.dump(summary_dict(result), fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(path)
        path = os.path.join(out_dir, "summary.txt")
        with open(path, "w") as fh:
            fh.write(format_summary_table(result))
        written.append(path)
    if "csv" in emit:
        path = os.path.join(out_dir, "offsets.csv")
        with open(path, "w") as fh:
            fh.write("cycle,node,offset_ps\n")
            nodes = sorted(result.offsets_ps)
            for i in range(result.config.measurement_cycles):
                cycle = result.config.warmup_cycles + i
                for nid in nodes:
                    fh.write(f"{cycle},{nid},{result.offsets_ps[nid][i]:.6f}\n")
        written.append(path)
    if "trace" in emit:
        path = os.path.join(out_dir, "trace.jsonl")
        with open(path, "w") as fh:
            for event in result.trace:
                fh.write(json.dumps(event, sort_keys=True))
                fh.write("\n")
        written.append(path)
    return written


def run(req: RunRequest) -> int:
    """Execute one request; writes artifacts and returns the exit code."""
    cfg, errors = _resolve_config(req)
    if cfg is None:
        for err in errors:
            print(f"validation error: {err}", file=sys.stderr)
        return EXIT_VALIDATION

    # fail before running anything if we cannot write the artifacts
    try:
        os.makedirs(req.out_dir, exist_ok=True)
        probe = os.path.join(req.out_dir, ".write_probe")
        with open(probe, "w") as fh:
            fh.write("")
        os.remove(probe)
    except OSError as exc:
        print(f"output directory not writable: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    try:
        result = simkit.run_scenario(cfg)
    except simkit.ScenarioValidationError as exc:
        for err in exc.errors:
            print(f"validation error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    try:
        write_artifacts(result, req.out_dir, req.emit)
    except OSError as exc:
        print(f"failed writing artifacts: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    print(format_summary_table(result), end="")
    if req.require_convergence and result.convergence_us is None:
        print("did not converge within the configured tolerance", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blinksim",
        description="Simulate consensus-based UWB network timing synchronization.",
    )
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument(
        "--preset", choices=sorted(simkit.PRESET_DISTANCES), help="built-in scenario"
    )
    source.add_argument("--scenario", metavar="PATH", help="scenario JSON file")
    parser.add_argument("--seed", type=int, help="override the scenario seed")
    parser.add_argument("--cycles", type=int, help="override measurement cycle count")
    parser.add_argument("--out", default="out", help="output directory (default: out)")
    parser.add_argument(
        "--emit",
        action="append",
        choices=("summary", "csv", "trace"),
        help="artifact kinds to write (repeatable; default: summary)",
    )
    parser.add_argument("--noiseless", action="store_true", help="disable channel noise")
    parser.add_argument(
        "--fine-correction", action="store_true", help="enable 0.2 ns transmit shifts"
    )
    parser.add_argument(
        "--require-convergence",
        action="store_true",
        help="exit 3 if the run never reaches the offset tolerance",
    )
    parser.add_argument(
        "--validate-only",
        action="store_true",
        help="validate the scenario and exit without running",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.validate_only:
        if args.scenario is None:
            print("--validate-only requires --scenario", file=sys.stderr)
            return EXIT_VALIDATION
        cfg, errors = validate_scenario(args.scenario)
        if errors:
            for err in errors:
                print(f"validation error: {err}", file=sys.stderr)
            return EXIT_VALIDATION
        print(f"scenario {cfg.name!r} is valid")
        return EXIT_OK

    try:
        req = RunRequest(
            preset=args.preset,
            scenario_path=args.scenario,
            seed=args.seed,
            cycles=args.cycles,
            out_dir=args.out,
            emit=tuple(args.emit) if args.emit else ("summary",),
            noiseless=args.noiseless,
            fine_correction=args.fine_correction,
            require_convergence=args.require_convergence,
        )
    except ValueError as exc:
        print(f"invalid request: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return run(req)


if __name__ == "__main__":
    sys.exit(main())
