"""Command line entry point: ``sepsis-lpa <subcommand> [--config ...] [--seed ...] [--out ...]``.

Exit codes: 0 success, 2 invalid configuration or arguments, 1 stage failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ConfigError, PipelineConfig
from .pipeline import STAGES, StageError, run_pipeline, run_stage

logger = logging.getLogger("sepsis_lpa")

EXIT_OK, EXIT_STAGE, EXIT_INVALID = 0, 1, 2


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="YAML configuration (merged over the bundled defaults)")
    p.add_argument("--seed", type=int, default=d, help="global seed (non-negative integer)")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--input", default=d, help="directory holding the five cohort CSVs")
    p.add_argument("--plots", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="also write SVG figures")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sepsis-lpa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "simulate": "write a synthetic cohort (five CSVs plus truth.csv) to --out",
        "screen": "label sepsis cases and onset hours",
        "features": "aggregate post-onset and admission-window feature matrices",
        "lpa": "fit the mixture grid, select by BIC and assign profiles",
        "profile-report": "per-profile summary table and box-plot data",
        "train": "tune and fit pooled and per-profile models for every window",
        "evaluate": "bootstrap metrics and DeLong comparisons",
        "all": "run every stage in order",
    }
    for name in ("simulate",) + STAGES + ("all",):
        sp = sub.add_parser(name, help=helps[name], description=helps[name])
        _global_flags(sp, suppress=True)
        if name == "simulate":
            sp.add_argument("--n-controls", type=int)
            sp.add_argument("--n-cases", type=int)
            sp.add_argument("--subgroups", type=int, help="number of case subgroups (1 to 4)")
            sp.add_argument("--prevalence", type=float,
                            help="size cases from prevalence over n-controls + n-cases")
    return parser


def _load_config(args) -> PipelineConfig:
    overrides = {}
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        overrides["seed"] = args.seed
    if args.input is not None:
        overrides.setdefault("input", {})["dir"] = str(_abspath(args.input))
    if args.out is not None:
        overrides.setdefault("output", {})["dir"] = str(_abspath(args.out))
    if args.plots:
        overrides.setdefault("output", {})["plots"] = True
    return PipelineConfig.load(args.config, overrides)


def _abspath(p) -> Path:
    return Path(p).resolve()


def _simulate(args, cfg: PipelineConfig) -> None:
    from .screen import SofaThresholds
    from .simulate import SimSpec, simulate_cohort
    spec = SimSpec(seed=cfg.seed)
    if args.subgroups is not None:
        spec = spec.with_subgroups(args.subgroups)
    n_controls = args.n_controls if args.n_controls is not None else spec.n_controls
    n_cases = args.n_cases if args.n_cases is not None else spec.n_cases
    if args.prevalence is not None:
        sized = SimSpec.from_prevalence(n_controls + n_cases, args.prevalence)
        n_controls, n_cases = sized.n_controls, sized.n_cases
    spec = replace(spec, n_controls=n_controls, n_cases=n_cases)
    sim = simulate_cohort(spec, SofaThresholds.from_csv(cfg.resolve(cfg["thresholds"])))
    sim.write(cfg.output_dir)
    logger.info("wrote %d encounters (%d cases) to %s", n_controls + n_cases, n_cases, cfg.output_dir)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage, 0 on --help
        return int(exc.code or 0)
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        if args.command == "simulate":
            _simulate(args, cfg)
        elif args.command == "all":
            out = run_pipeline(cfg)
            print(out)
        else:
            if args.command in ("screen", "features"):
                cfg.input_paths()  # fail fast on a missing input directory
            run_stage(cfg, args.command)
    except StageError as exc:
        print(f"error: stage {exc.stage} failed: {exc.cause}", file=sys.stderr)
        return EXIT_STAGE
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
