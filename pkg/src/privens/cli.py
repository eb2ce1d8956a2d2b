"""Command-line orchestration of the pipeline.

Each stage command runs the chain up to and including its stage; previously
completed stages are fingerprint-cached and skipped, so single-stage commands
are cheap to re-issue. The run configuration is persisted as
OUT/run_config.json and picked up by later commands on the same directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 privacy budget
exhausted.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path

from .errors import BudgetExhaustedError, ConfigError, DataError
from .pipeline import (
    RunConfig,
    run_all,
    stage_attack,
    stage_dp_sweep,
    stage_evaluate,
    stage_grow,
    stage_preprocess,
    stage_synth,
    stage_train,
)
from .synth import CohortSpec

log = logging.getLogger(__name__)

_STAGES = ("synth", "preprocess", "train", "grow", "evaluate", "dp-sweep", "attack", "run")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privens",
        description="Differentially private weighted-average ensembles over patient time series.",
    )
    parser.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in _STAGES:
        sp = sub.add_parser(name, help=f"run the pipeline through the {name} stage"
                            if name != "run" else "run the full pipeline")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help="RunConfig JSON (default: OUT/run_config.json if present)")
        sp.add_argument("--seed", type=int, help="master seed override")
        sp.add_argument("--workers", type=int, help="parallel workers for training")
        sp.add_argument("--epsilon", type=float,
                        help="restrict the privacy sweep to a single epsilon")
        sp.add_argument("--total-budget", type=float, help="total privacy budget (default: unlimited)")
        sp.add_argument("--bound", type=float, help="output bound B (default 4)")
        if name in ("synth", "run"):
            sp.add_argument("--sepsis", type=int, default=60, help="synthetic sepsis patients")
            sp.add_argument("--nonsepsis", type=int, default=180, help="synthetic non-sepsis patients")
            sp.add_argument("--features", type=int, default=24, help="synthetic feature count")
            sp.add_argument("--heterogeneity", type=float, default=1.0,
                            help="per-patient idiosyncrasy scale")
        if name in ("preprocess", "run"):
            sp.add_argument("--timelines", help="timeline CSV (instead of synthesis)")
            sp.add_argument("--labels", help="label-window CSV")
            sp.add_argument("--catalog", help="feature catalog CSV")
    return parser


def _config_from_args(args) -> RunConfig:
    """Build a fresh RunConfig from command-line flags."""
    if getattr(args, "timelines", None):
        return RunConfig(
            synth=None,
            timelines_csv=args.timelines,
            labels_csv=args.labels,
            catalog_csv=args.catalog,
        )
    if not hasattr(args, "sepsis"):
        raise ConfigError(
            "no configuration found; pass --config or start with `synth`/`run`"
        )
    spec = CohortSpec(
        n_sepsis=args.sepsis,
        n_nonsepsis=args.nonsepsis,
        n_features=args.features,
        heterogeneity=args.heterogeneity,
    )
    return RunConfig(synth=spec)


def _resolve_config(args) -> RunConfig:
    out = Path(args.out)
    if args.config:
        cfg = RunConfig.load(args.config)
    elif (out / "run_config.json").exists():
        cfg = RunConfig.load(out / "run_config.json")
    else:
        cfg = _config_from_args(args)

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.epsilon is not None:
        overrides["epsilon_grid"] = (args.epsilon,)
    if args.total_budget is not None:
        overrides["total_budget"] = args.total_budget if args.total_budget > 0 else math.inf
    if args.bound is not None:
        overrides["bound"] = args.bound
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _run_until(cfg: RunConfig, out_dir: Path, last: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "run_config.json")
    fps = {}
    if cfg.synth is not None:
        fps["synth"] = stage_synth(cfg, out_dir)
    elif last == "synth":
        raise ConfigError("synth stage requires a synth spec (external CSVs were configured)")
    if last == "synth":
        return
    fps["preprocess"] = stage_preprocess(cfg, out_dir, fps.get("synth"))
    if last == "preprocess":
        return
    fps["train"] = stage_train(cfg, out_dir, fps["preprocess"])
    if last == "train":
        return
    fps["grow"] = stage_grow(cfg, out_dir, fps["train"])
    if last == "grow":
        return
    if last == "evaluate":
        stage_evaluate(cfg, out_dir, fps["grow"])
    elif last == "dp-sweep":
        stage_dp_sweep(cfg, out_dir, fps["grow"])
    elif last == "attack":
        stage_attack(cfg, out_dir, fps["grow"])


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        out_dir = Path(args.out)
        if args.command == "run":
            run_all(cfg, out_dir)
        else:
            _run_until(cfg, out_dir, args.command)
    except BudgetExhaustedError as exc:
        log.error("privacy budget exhausted: %s", exc)
        return 4
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except DataError as exc:
        log.error("data error: %s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
