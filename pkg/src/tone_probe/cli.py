"""Command-line interface for tone-probe."""

import argparse
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from .config import RunConfig, format_validation_error
from .errors import ConfigError, ToneProbeError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILED = 2


def setup_logging(
    verbose: bool = False,
    log_file: Path | None = None,
) -> None:
    """Configure logging."""
    level = logging.DEBUG if verbose else logging.INFO

    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stdout)]

    if log_file:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(
            logging.Formatter("%(asctime)s %(levelname)s %(message)s")
        )
        handlers.append(file_handler)

    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=handlers,
        force=True,
    )


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        "-c",
        type=Path,
        default=Path("config.yaml"),
        help="Path to config file (default: ./config.yaml)",
    )
    parser.add_argument(
        "--workers",
        type=int,
        default=None,
        help="Worker threads (default: config value)",
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Override the config seed",
    )
    parser.add_argument(
        "--subsample",
        type=float,
        default=None,
        help="Override the utterance subsample fraction, in (0, 1]",
    )
    parser.add_argument(
        "--out",
        type=Path,
        default=None,
        help="Override the output directory",
    )
    parser.add_argument(
        "--offline",
        action="store_true",
        help="Never download models",
    )
    parser.add_argument(
        "--log-file",
        "-l",
        type=Path,
        default=None,
        help="Path to log file",
    )
    parser.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        help="Enable verbose logging",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tone-probe",
        description="Tone Probe - layer-wise probing of tone and consonants in speech encoders",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("ingest", "Parse transcripts and alignments into syllable tables"),
        ("extract", "Run encoders over the corpus and fill the activation cache"),
        ("probe", "Train and evaluate probes for every experiment"),
        ("report", "Write report.csv, tables and plots from stored results"),
        ("run", "All stages in order"),
    ):
        sub = subparsers.add_parser(name, help=help_text)
        _add_common(sub)
        if name in ("probe", "run"):
            sub.add_argument(
                "--dry-run",
                action="store_true",
                help="Print probe and extraction counts without touching audio",
            )
            sub.add_argument(
                "--no-resume",
                action="store_true",
                help="Recompute experiments that already have stored results",
            )
        if name in ("report", "run"):
            sub.add_argument(
                "--no-plots",
                action="store_true",
                help="Skip plot rendering",
            )

    demo_parser = subparsers.add_parser(
        "demo-corpus",
        help="Write the synthetic mini corpus and a config for it",
    )
    demo_parser.add_argument(
        "directory",
        type=Path,
        help="Directory to create",
    )
    demo_parser.add_argument(
        "--seed",
        type=int,
        default=13,
        help="Seed written into the generated config",
    )
    demo_parser.add_argument(
        "--log-file",
        "-l",
        type=Path,
        default=None,
        help="Path to log file",
    )
    demo_parser.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        help="Enable verbose logging",
    )
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    """Load the config file and apply command-line overrides."""
    config = RunConfig.load(args.config)

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.subsample is not None:
        overrides["subsample_fraction"] = args.subsample
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.offline:
        overrides["offline"] = True
    if args.out is not None:
        overrides["output_dir"] = args.out.resolve()
    if not overrides:
        return config

    try:
        return RunConfig.model_validate({**config.model_dump(), **overrides})
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from e


def _run_command(args: argparse.Namespace) -> int:
    if args.command == "demo-corpus":
        from .minicorpus import write_demo

        config_path = write_demo(args.directory, seed=args.seed)
        logger.info(f"Wrote demo config: {config_path}")
        return EXIT_OK

    config = load_config(args)
    logger.info(f"Config: {args.config} ({config.config_hash()})")

    from . import pipeline

    if getattr(args, "dry_run", False):
        pipeline.log_plan(pipeline.plan(config))
        return EXIT_OK

    if args.command == "ingest":
        for corpus_id, artifacts in pipeline.ingest(config, args.workers).items():
            logger.info(f"  {corpus_id}: {len(artifacts.syllables)} syllables")
        return EXIT_OK

    if args.command == "extract":
        failed = sum(f for _, f in pipeline.extract(config, workers=args.workers).values())
        if failed:
            logger.error(f"  {failed} utterances failed extraction")
            return EXIT_FAILED
        return EXIT_OK

    if args.command == "report":
        pipeline.report(config, plots=not args.no_plots)
        return EXIT_OK

    resume = not args.no_resume
    if args.command == "probe":
        outcome = pipeline.probe(config, resume=resume)
    else:
        outcome = pipeline.run(config, resume=resume, plots=not args.no_plots)

    if outcome.reused:
        logger.info(f"  Reused: {', '.join(outcome.reused)}")
    if outcome.failed:
        logger.error(f"  Failed experiments: {', '.join(outcome.failed)}")
        return EXIT_FAILED
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    """
    Main entry point that dispatches on the subcommand.

    Returns the exit status: 0 on success, 1 for an invalid config, 2 when a
    stage failed (results finished before the failure stay on disk).
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose, args.log_file)

    try:
        return _run_command(args)
    except ConfigError as e:
        logger.error("Invalid configuration:")
        for error in e.errors:
            logger.error(f"  {error}")
        return EXIT_INVALID
    except ToneProbeError as e:
        logger.error(f"Failed: {e}")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
