"""Command-line entry point.

Subcommands map onto pipeline stage slices:

  run          all stages end to end
  ingest       load/filter/impute + healthy moments + training interactions
  network      per-pair Cox field, node weights, adjacency
  communities  largest component, block count, partition
  score        training thresholds and test-set scores/classification
  validate     per-marker validation reports and KM curves
  concordance  methylation/expression concordance over marker edges
  simulate     synthetic cohort CSVs with ground truth

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import (
    AlignmentError,
    ConfigError,
    ConvergenceError,
    ImputationError,
    InsufficientReferenceError,
    MethmarkError,
    ParseError,
    StageError,
    ValidationError,
)
from .pipeline import STAGES, SUBCOMMAND_SLICES, PipelineRunner, RunConfig
from . import synth

_DATA_ERRORS = (ParseError, ValidationError, AlignmentError, ImputationError, InsufficientReferenceError)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError) and exc.__cause__ is not None:
        return _exit_code(exc.__cause__)
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, ConvergenceError):
        return 4
    if isinstance(exc, _DATA_ERRORS):
        return 3
    if isinstance(exc, StageError):
        return 3
    return 4


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="run configuration JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--k-override", type=int, default=None, help="force the community count")
    parser.add_argument("--workers", type=int, default=None, help="worker processes for pair stages")
    parser.add_argument("--chunk-size", type=int, default=None, help="pairs per evaluation chunk")
    parser.add_argument("--output-dir", default=None, help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="methmark", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("run", *SUBCOMMAND_SLICES):
        p = sub.add_parser(name, help=f"run pipeline stages: {name}")
        _add_run_flags(p)

    sim = sub.add_parser("simulate", help="generate a synthetic cohort with ground truth")
    sim.add_argument("--config", required=True, help="synthetic-cohort spec JSON")
    sim.add_argument("--seed", type=int, default=None, help="override the spec seed")
    sim.add_argument("--output-dir", default=None, help="override the spec output directory")
    return parser


def _load_runner(args) -> PipelineRunner:
    config = RunConfig.from_json(
        args.config,
        seed=args.seed,
        k_override=args.k_override,
        workers=args.workers,
        chunk_size=args.chunk_size,
        output_dir=args.output_dir,
    )
    return PipelineRunner(config)


def _run_simulate(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    outdir = args.output_dir or raw.pop("output_dir", None)
    if outdir is None:
        raise ConfigError("simulate config needs an output_dir")
    raw.pop("output_dir", None)
    if args.seed is not None:
        raw["seed"] = args.seed
    community = raw.pop("planted_community", None)
    if "loci_range" in raw:
        raw["loci_range"] = tuple(raw["loci_range"])
    if "planted_edges" in raw:
        raw["planted_edges"] = [tuple(e) for e in raw["planted_edges"]]
    try:
        if community is not None:
            spec = synth.planted_community_spec(
                community_size=community["size"], effect=community["effect"], **raw
            )
        else:
            spec = synth.SynthSpec(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    result = synth.generate(spec)
    paths = synth.write_cohort(result, outdir)
    for key, path in sorted(paths.items()):
        print(f"{key}: {path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return _run_simulate(args)
        runner = _load_runner(args)
        stages = STAGES if args.command == "run" else SUBCOMMAND_SLICES[args.command]
        statuses = runner.run(stages)
        for status in statuses:
            print(f"stage {status.name}: {'cached' if status.cached else 'completed'}")
        return 0
    except MethmarkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
