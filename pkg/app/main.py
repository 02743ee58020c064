# evortho - Command-line entry point

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

from .common import ConfigError, PipelineError
from .config import PipelineConfig, get_settings, load_pipeline_config
from .models.schemas import REPORT_HEADER
from .services.eval_service import evaluate_orthomap
from .services.pipeline_service import STAGES, PipelineService
from .services.recording_service import describe_recording, read_recording, validate_recording
from .services.simulation_service import simulate, write_simulation

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

SUBCOMMANDS = ("simulate", *STAGES, "run", "info")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns the exit code."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = _Parser(
        prog="evortho",
        description="Offline event-camera + RGB aerial mapping pipeline.",
        epilog="Any config key can be overridden with --section.key VALUE (e.g. --gate.omega_max 0.5).",
    )
    parser.add_argument("--version", action="version", version=f"{settings.app_name} {settings.app_version}")
    parser.add_argument("--config", type=Path, help="key = value run configuration file")
    parser.add_argument("--threads", type=int, help="worker cap for every parallel stage")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    simulate_cmd = sub.add_parser("simulate", help="write a synthetic recording with ground truth")
    simulate_cmd.add_argument("out", nargs="?", type=Path, help="recording directory (default: config 'recording')")

    for stage in STAGES:
        sub.add_parser(stage, help=f"run the {stage} stage on the configured output directory")
    sub.add_parser("run", help="run every enabled stage in order")

    evaluate_cmd = sub.choices["evaluate"]
    evaluate_cmd.add_argument("--test", type=Path, help="test orthomosaic (standalone mode)")
    evaluate_cmd.add_argument("--ref", type=Path, help="reference orthomosaic")
    evaluate_cmd.add_argument("--points", type=Path, help="x_test,y_test,x_ref,y_ref correspondences")
    evaluate_cmd.add_argument("--sequence", default="", help="sequence column of the report row")
    evaluate_cmd.add_argument("--type", dest="row_type", default="", help="type column of the report row")
    evaluate_cmd.add_argument("--masked", action="store_true", help="score only test pixels that are non-zero")

    info_cmd = sub.add_parser("info", help="summarize a recording directory")
    info_cmd.add_argument("recording", type=Path)
    return parser


def split_overrides(argv: List[str]) -> Tuple[List[str], dict]:
    """Pull ``--section.key VALUE`` / ``--section.key=VALUE`` pairs out of argv."""
    rest, overrides = [], {}
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg.startswith("--") and "." in arg.split("=", 1)[0]:
            key, sep, value = arg[2:].partition("=")
            if not sep:
                if i + 1 >= len(argv):
                    raise UsageError(f"missing value for --{key}")
                value = argv[i + 1]
                i += 1
            overrides[key] = value
        else:
            rest.append(arg)
        i += 1
    return rest, overrides


def configure_logging() -> None:
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _cmd_simulate(args, config: PipelineConfig) -> int:
    out = args.out or config.recording
    if out is None:
        raise ConfigError("simulate needs an output directory (argument or config 'recording')")
    result = simulate(config.simulate, seed=config.seed, workers=config.worker_count())
    write_simulation(result, out, get_settings().chunk_size)
    print(out)
    return EXIT_OK


def _cmd_evaluate(args, config: PipelineConfig) -> int:
    if args.test is not None or args.ref is not None:
        if args.test is None or args.ref is None:
            raise UsageError("evaluate needs both --test and --ref")
        report = evaluate_orthomap(args.test, args.ref, args.points, args.sequence, args.row_type, args.masked)
    else:
        report = PipelineService(config).run_stage("evaluate")
        if report is None:
            return EXIT_OK
    print(REPORT_HEADER)
    print(report.to_csv_row())
    return EXIT_OK


def _cmd_info(args, config: PipelineConfig) -> int:
    rec = read_recording(args.recording, validate=False)
    for key, value in describe_recording(rec).items():
        print(f"{key} = {value}")
    violations = validate_recording(rec)
    print(f"violations = {len(violations)}")
    for violation in violations:
        print(f"  {violation}")
    return EXIT_OK


def dispatch(args, config: PipelineConfig) -> int:
    if args.command == "simulate":
        return _cmd_simulate(args, config)
    if args.command == "evaluate":
        return _cmd_evaluate(args, config)
    if args.command == "info":
        return _cmd_info(args, config)
    service = PipelineService(config)
    if args.command == "run":
        result = service.run()
        print(result.output)
        return EXIT_OK
    service.run_stage(args.command)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        rest, overrides = split_overrides(argv)
        args = parser.parse_args(rest)
        if args.command is None:
            raise UsageError(f"missing command (one of: {', '.join(SUBCOMMANDS)})")
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            overrides["threads"] = str(args.threads)
        config = load_pipeline_config(args.config, overrides)
        return dispatch(args, config)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"evortho: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"evortho: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as exc:
        print(f"evortho: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"evortho: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
