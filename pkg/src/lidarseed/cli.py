"""``lidarseed <subcommand> --config PATH [--seed N] [--workers N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .pipeline import PipelineConfig

SUBCOMMANDS = ("synth-gen", "segment", "pretrain", "init", "iterate", "export", "eval", "sweep-eta", "stats", "overlay")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lidarseed", description="Unsupervised LiDAR-seeded object discovery pipeline.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="key = value config file")
    ap.add_argument("--seed", type=int, help="root seed (overrides the config)")
    ap.add_argument("--workers", type=int, help="process pool size for frame-parallel stages")
    ap.add_argument("--out", help="output root (overrides the config)")
    ap.add_argument("--oracle", action="store_true", help="eval: score a labeler trained on ground-truth labels")
    return ap


def load_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if args.out is not None:
        cfg.out = Path(args.out)
    cfg.validate()
    return cfg


def dispatch(sub: str, cfg: PipelineConfig, oracle: bool = False):
    if sub == "eval":
        return pipeline.run_eval(cfg, oracle=oracle)
    fn = {
        "synth-gen": pipeline.run_synth_gen,
        "segment": pipeline.run_segment,
        "pretrain": pipeline.run_pretrain,
        "init": pipeline.run_init,
        "iterate": pipeline.run_iterate,
        "export": pipeline.run_export,
        "sweep-eta": pipeline.run_sweep_eta,
        "stats": pipeline.run_stats,
        "overlay": pipeline.run_overlay,
    }[sub]
    return fn(cfg)


def _one_line(msg: str) -> str:
    return " ".join(str(msg).split())


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("LIDARSEED_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        cfg = load_config(args)
        dispatch(args.subcommand, cfg, args.oracle)
    except Exception as e:  # every failure becomes one parseable stderr line
        if level == "debug":
            logging.exception("stage failed")
        print(f"error={type(e).__name__} stage={args.subcommand} message={_one_line(e)!r}", file=sys.stderr)
        return 2 if isinstance(e, pipeline.ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
