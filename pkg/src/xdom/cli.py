"""Command line entry: ``xdom <stage> --config run.yaml``.

Exit codes: 0 success, 1 usage or config error, 2 missing or stale
prerequisite, 3 anything that fails while a stage runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import ConfigError, DependencyError, StaleArtifactError

EXIT_OK, EXIT_USAGE, EXIT_DEPENDENCY, EXIT_RUNTIME = 0, 1, 2, 3

COMMANDS = {
    "synth": "synth",
    "train-cls": "train_cls",
    "masks": "masks",
    "train-dense": "train_dense",
    "convert": "convert",
    "score": "score",
    "eval": "eval",
    "plot": "plot",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="xdom", description="Staged OOD detection runs on synthetic data.")
    p.add_argument("command", choices=list(COMMANDS) + ["all"])
    p.add_argument("--config", required=True, help="YAML run config")
    p.add_argument("--force-stage", choices=pipeline.STAGES, default=None,
                   help="recompute this stage even if it is up to date")
    p.add_argument("--seed", type=int, default=None, help="override the config's global seed")
    p.add_argument("--deterministic", action="store_true",
                   help="force deterministic kernels regardless of the config")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.deterministic:
        cfg = dataclasses.replace(cfg, deterministic=True)
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        # relative output dirs are anchored at the config file, not the cwd
        out = Path(args.config).resolve().parent / out
    return cfg.validate(), out


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, out = resolve_config(args)
        run = pipeline.open_run(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "all":
            pipeline.run_all(run, force_stage=args.force_stage)
        else:
            stage = COMMANDS[args.command]
            if args.force_stage not in (None, stage):
                print(f"--force-stage {args.force_stage} does not match command {args.command}",
                      file=sys.stderr)
                return EXIT_USAGE
            ran = pipeline.run_stage(run, stage, force=args.force_stage == stage)
            print(f"{stage}: {'done' if ran else 'up to date'}")
    except (DependencyError, StaleArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any failure inside a stage
        logging.getLogger(__name__).debug("stage failed", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
