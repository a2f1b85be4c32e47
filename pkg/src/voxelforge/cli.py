"""Command line driver for the preprocessing pipeline.

Exit codes: 0 success, 1 validation failure, 2 I/O error, 3 internal
invariant breach. The ``VOXELFORGE_LOG`` environment variable sets the
log level (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import formats, netshape, records
from .pipeline import (
    ManifestError,
    PipelineRunner,
    STAGES,
    load_manifest,
    verify_dataset_counts,
)

log = logging.getLogger("voxelforge")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_INTERNAL = 3


def _add_pipeline_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", required=True, type=Path, help="pipeline manifest JSON")
    parser.add_argument("--output", type=Path, default=None,
                        help="override the manifest's output directory")
    parser.add_argument("--jobs", type=int, default=1, metavar="N",
                        help="process up to N subjects in parallel")
    parser.add_argument("--force", action="store_true",
                        help="re-run stages even when outputs are up to date")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelforge",
        description="Volumetric preprocessing pipeline: conversion, rigid "
        "coregistration, cleanup, patch/slice export and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run pipeline stages over a manifest")
    _add_pipeline_args(run)
    run.add_argument("--stage", action="append", choices=STAGES, default=None,
                     help="run only this stage (repeatable, in order)")

    for stage in STAGES:
        stage_parser = sub.add_parser(stage, help=f"run only the {stage} stage")
        _add_pipeline_args(stage_parser)

    shapes = sub.add_parser("verify-shapes",
                            help="verify the bundled network architecture tables")
    shapes.add_argument("--json", type=Path, default=None,
                        help="also write the reports as JSON")

    dataset = sub.add_parser("dataset-verify",
                             help="check a manifest's modality index against the "
                             "published subject counts")
    dataset.add_argument("--manifest", required=True, type=Path)

    return parser


def _cmd_pipeline(args: argparse.Namespace, stages: list[str] | None) -> int:
    manifest = load_manifest(args.manifest)
    runner = PipelineRunner(
        manifest, output_dir=args.output, force=args.force, jobs=args.jobs
    )
    runner.run(stages)
    return EXIT_OK


def _cmd_verify_shapes(args: argparse.Namespace) -> int:
    tables = netshape.load_builtin_tables()
    reports = {name: netshape.verify_table(table) for name, table in tables.items()}
    for report in reports.values():
        print(report.render())
        print()
    if args.json:
        payload = {
            name: {
                "matched": report.matched,
                "final_shape": list(report.final_shape),
                "rows": [
                    {
                        "index": row.index,
                        "kind": row.layer.kind.value,
                        "expected": list(row.expected),
                        "computed": list(row.computed) if row.computed else None,
                        "padding": row.padding.value if row.padding else None,
                        "status": row.status.value,
                    }
                    for row in report.rows
                ],
            }
            for name, report in reports.items()
        }
        args.json.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_dataset_verify(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    if not manifest.rire_index:
        raise ManifestError(f"{args.manifest}: manifest has no rire_index section")
    passed, lines = verify_dataset_counts(manifest.rire_index)
    for line in lines:
        print(line)
    print("dataset-verify:", "PASS" if passed else "FAIL")
    return EXIT_OK if passed else EXIT_VALIDATION


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("VOXELFORGE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_pipeline(args, args.stage)
        if args.command in STAGES:
            return _cmd_pipeline(args, [args.command])
        if args.command == "verify-shapes":
            return _cmd_verify_shapes(args)
        if args.command == "dataset-verify":
            return _cmd_dataset_verify(args)
        raise AssertionError(f"unhandled command {args.command}")
    except ManifestError as exc:
        log.error("validation failure: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, formats.FormatError, records.RecordError) as exc:
        log.error("I/O failure: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
