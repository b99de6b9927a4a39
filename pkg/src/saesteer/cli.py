"""Command-line entry point: ``saesteer <stage> [--config FILE] ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import DESK_CONFIG, ConfigError, validate_config
from .judge import JudgeError
from .pipeline import STAGES, MissingDependencyError, Pipeline

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_JUDGE = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="saesteer",
        description="Train SAEs on a toy LM, score interpretability and steering, "
                    "select features and analyse rank agreement.",
    )
    p.add_argument("stage", nargs="?", choices=STAGES + ("all", "show-config"),
                   help="pipeline stage to run ('all' runs every stage in order)")
    p.add_argument("--stage", dest="stage_opt", choices=STAGES + ("all", "show-config"),
                   help="alternative to the positional stage")
    p.add_argument("--config", help="TOML config file (default: built-in desk config)")
    p.add_argument("--output", help="override the output directory")
    p.add_argument("--force", action="store_true", help="rerun stages even when up to date")
    p.add_argument("--seed-override", type=int, help="set every named seed to this value")
    p.add_argument("--runs-filter", help="glob over run ids, e.g. '*TopK*'")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    stage = args.stage_opt or args.stage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if stage is None:
        print("error: no stage given", file=sys.stderr)
        return EXIT_CONFIG
    if stage == "show-config":
        if args.config:
            with open(args.config) as fh:
                sys.stdout.write(fh.read())
        else:
            sys.stdout.write(DESK_CONFIG)
        return EXIT_OK
    try:
        cfg = validate_config(args.config, args.seed_override)
        if args.output:
            cfg = replace(cfg, output=Path(args.output))
        Pipeline(cfg, force=args.force, runs_filter=args.runs_filter).run_stage(stage)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingDependencyError as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except JudgeError as exc:
        print(f"judge error: {exc}", file=sys.stderr)
        return EXIT_JUDGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
