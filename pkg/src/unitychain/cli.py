"""Command-line entry point.

Exit codes: 0 success, 1 invalid input, 2 invariant violation (or a replay
that does not reproduce its log).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .metrics import TruncatedLogError, build_report
from .report import emit_report, summary
from .scenario import ScenarioError, parse_scenario, scenario_from_record
from .simnet import audit_log, dumps_log, load_log, run_simulation

EXIT_OK, EXIT_INVALID, EXIT_VIOLATION = 0, 1, 2


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed {value} is not an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unitychain", description="Simulate and measure a two-strand Unitychain.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and write the event log and report")
    run.add_argument("--scenario", required=True, type=Path)
    run.add_argument("--seed", type=_u64, help="overrides the scenario's seed")
    run.add_argument("--out", required=True, type=Path)
    run.add_argument("--coalition", help="comma-separated node names for the coalition metrics")

    replay = sub.add_parser("replay", help="re-run the scenario embedded in a log")
    replay.add_argument("--log", required=True, type=Path)
    replay.add_argument("--verify", action="store_true", help="fail unless the rerun is byte-identical")

    metrics = sub.add_parser("metrics", help="compute metrics from an existing log")
    metrics.add_argument("--log", required=True, type=Path)
    metrics.add_argument("--coalition", help="comma-separated node names")
    metrics.add_argument("--out", type=Path, help="also write metrics.csv and summary.json here")

    sweep = sub.add_parser("sweep", help="Monte-Carlo over consecutive seeds")
    sweep.add_argument("--scenario", required=True, type=Path)
    sweep.add_argument("--seeds", required=True, type=_positive)
    sweep.add_argument("--out", type=Path, help="write sweep.csv here")
    return parser


def _coalition(text: str | None, scenario_default: list[str] | tuple[str, ...] = ()) -> list[str] | None:
    if text is None:
        return list(scenario_default) or None
    names = [n.strip() for n in text.split(",") if n.strip()]
    if not names:
        raise ValueError("coalition must name at least one node")
    return names


def _load_scenario(path: Path):
    return parse_scenario(path.read_text())


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_scenario(args.scenario)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    result = run_simulation(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "events.jsonl").write_text(result.log_text())
    report = build_report(result.log, _coalition(args.coalition, cfg.coalition))
    emit_report(report, args.out)
    s = summary(report)
    print(f"horizon={s['horizon']} throughput={s['throughput']} downtime={s['downtime_cycles']} epochs={s['epochs']}")
    for v in result.violations:
        print(f"violation: {v}", file=sys.stderr)
    return EXIT_VIOLATION if result.violations else EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    text = args.log.read_text()
    log = load_log(text)
    if not log or log[0].get("type") != "run":
        raise TruncatedLogError("log has no run header")
    problems = audit_log(log)
    for p in problems:
        print(f"audit: {p}", file=sys.stderr)
    cfg = scenario_from_record(log[0]["scenario"])
    rerun = dumps_log(run_simulation(cfg).log)
    identical = rerun == text
    print(f"replay {'identical' if identical else 'DIFFERS'}; audit {'clean' if not problems else 'FAILED'}")
    if problems or (args.verify and not identical):
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace) -> int:
    log = load_log(args.log.read_text())
    report = build_report(log, _coalition(args.coalition))
    if args.out is not None:
        emit_report(report, args.out)
    print(json.dumps(summary(report), indent=2, sort_keys=True))
    return EXIT_VIOLATION if report.violations else EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load_scenario(args.scenario)
    lines = ["seed,throughput,downtime_cycles,epochs,shuffle_distance_mean,violations"]
    worst = EXIT_OK
    for i in range(args.seeds):
        seed = (cfg.seed + i) % 2**64
        result = run_simulation(cfg.with_seed(seed))
        s = summary(build_report(result.log))
        mean = "" if s["shuffle_distance_mean"] is None else f"{s['shuffle_distance_mean']:.6f}"
        line = f"{seed},{s['throughput']},{s['downtime_cycles']},{s['epochs']},{mean},{len(result.violations)}"
        lines.append(line)
        print(line)
        if result.violations:
            worst = EXIT_VIOLATION
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "sweep.csv").write_text("\n".join(lines) + "\n")
    return worst


COMMANDS = {"run": cmd_run, "replay": cmd_replay, "metrics": cmd_metrics, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ScenarioError as exc:
        for problem in exc.problems:
            print(f"scenario error: {problem}", file=sys.stderr)
        return EXIT_INVALID
    except (TruncatedLogError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
