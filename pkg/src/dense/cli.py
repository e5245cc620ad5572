"""Command-line entry point: ``dense <stage> --config dense.yaml``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .corpus import write_notes_csv
from .pipeline import (
    STAGE_NAMES,
    ConfigError,
    Pipeline,
    StageError,
    clear_error,
    default_config_dict,
    load_config,
    write_error,
)
from .synthetic import SyntheticCorpusSpec, SyntheticSpecError, generate_synthetic_corpus
from .taxonomy import CanonicalNoteType, RuleSetError, load_fixtures, load_rules, validate_rules

logger = logging.getLogger("dense")

EXIT_OK = 0
EXIT_STAGE_FAILED = 1
EXIT_USAGE = 2


def _coverage_arg(value: str) -> tuple[CanonicalNoteType, float]:
    name, sep, prob = value.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected TYPE=P, got {value!r}")
    try:
        return CanonicalNoteType(name.strip()), float(prob)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dense", description="Longitudinal SOAP note generation pipeline.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=Path("dense.yaml"), help="pipeline config (YAML)")
    common.add_argument("--force", action="store_true", help="re-run even if the manifest says up to date")
    common.add_argument("--jobs", type=int, default=1, help="parallel patients / embedding batches")
    common.add_argument("--offline", action="store_true", help="use the hashing embedder and mock generator")

    for name in STAGE_NAMES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    sub.add_parser("run", parents=[common], help="run every stage in order")

    synth = sub.add_parser("synth", help="write a seeded synthetic notes CSV")
    synth.add_argument("--patients", type=int, default=56)
    synth.add_argument("--min-visits", type=int, default=10)
    synth.add_argument("--max-visits", type=int, default=57)
    synth.add_argument("--seed", type=int, default=1)
    synth.add_argument("--coverage", type=_coverage_arg, action="append", default=[], metavar="TYPE=P",
                       help="override one note type's visit coverage (repeatable)")
    synth.add_argument("--out", type=Path, required=True)

    rules = sub.add_parser("validate-rules", help="check a remap rule file for errors and unreachable rules")
    rules.add_argument("--rules", type=Path, default=None, help="rule TSV (default: shipped rules)")
    rules.add_argument("--fixtures", type=Path, default=None, help="label fixtures TSV (default: shipped)")

    init = sub.add_parser("init-config", help="write a default config file")
    init.add_argument("--out", type=Path, default=Path("dense.yaml"))
    init.add_argument("--input-csv", default="notes.csv")
    init.add_argument("--workdir", default="work")
    return parser


def _cmd_synth(args) -> int:
    try:
        base = SyntheticCorpusSpec(1)
        coverage = dict(base.coverage)
        coverage.update(dict(args.coverage))
        spec = SyntheticCorpusSpec(args.patients, args.min_visits, args.max_visits, coverage, args.seed)
    except SyntheticSpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    records = generate_synthetic_corpus(spec)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_notes_csv(records, args.out)
    print(f"wrote {len(records)} notes for {spec.patient_count} patients to {args.out}")
    return EXIT_OK


def _cmd_validate_rules(args) -> int:
    try:
        rule_set = load_rules(args.rules, validate=False)
        fixtures = load_fixtures(args.fixtures)
    except (RuleSetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = validate_rules(rule_set, fixtures)
    for msg in report.errors:
        print(f"ERROR {msg}")
    for msg in report.warnings:
        print(f"WARN  {msg}")
    print(f"{len(rule_set)} rules, {len(fixtures)} fixtures: {len(report.errors)} errors, {len(report.warnings)} warnings")
    return EXIT_OK if report.ok else EXIT_STAGE_FAILED


def _cmd_init_config(args) -> int:
    if args.out.exists():
        print(f"error: {args.out} already exists", file=sys.stderr)
        return EXIT_USAGE
    args.out.write_text(yaml.safe_dump(default_config_dict(args.input_csv, args.workdir), sort_keys=False), encoding="utf-8")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_stages(args) -> int:
    try:
        config = load_config(args.config, offline=args.offline or None)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    stages = STAGE_NAMES if args.command == "run" else (args.command,)
    pipeline = Pipeline(config, jobs=args.jobs)
    current = None
    try:
        for name in stages:
            current = name
            outcome = pipeline.run_stage(name, force=args.force)
            print(f"{name:<11} {'ran' if outcome.ran else 'skipped'} ({outcome.reason})")
    except Exception as exc:  # noqa: BLE001 - every failure becomes error.json
        stage = exc.stage if isinstance(exc, StageError) else current
        path = write_error(config.workdir, stage, exc)
        logger.debug("stage failure", exc_info=True)
        print(f"stage {stage} failed: {exc} (details in {path})", file=sys.stderr)
        return EXIT_STAGE_FAILED
    clear_error(config.workdir)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "synth":
        return _cmd_synth(args)
    if args.command == "validate-rules":
        return _cmd_validate_rules(args)
    if args.command == "init-config":
        return _cmd_init_config(args)
    return _cmd_stages(args)


if __name__ == "__main__":
    sys.exit(main())
