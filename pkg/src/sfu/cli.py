"""Command-line entry point: ``sfu <experiment> [--config PATH] [--output DIR] ...``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import EXPERIMENTS, ExperimentConfig, load_config
from .errors import ConfigError
from .pipeline import EXIT_ERROR, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfu", description="Desk-scale federated unlearning experiments.")
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", metavar="PATH", help="YAML config; omitted keys take their defaults")
        p.add_argument("--seed-override", type=int, metavar="N",
                       help="set the data, partition, init and sampling seeds to N")
        p.add_argument("--output", metavar="DIR", help="artifact directory (overrides output_dir)")
        p.add_argument("--max-rounds", type=int, metavar="N",
                       help="cap on FedAvg rounds for training, retraining and resumption")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig.from_dict({})
    changes = {"experiment": args.experiment}
    if args.output is not None:
        changes["output_dir"] = args.output
    if args.max_rounds is not None:
        n = args.max_rounds
        if n < 0:
            raise ConfigError("must be non-negative", "--max-rounds")
        fl = cfg["fl"]
        changes.update({
            "fl.max_rounds": n,
            "fl.retrain_max_rounds": min(n, fl["retrain_max_rounds"]),
            "fl.resume_rounds": min(n, fl["resume_rounds"]),
        })
    cfg = cfg.replace(**changes)
    if args.seed_override is not None:
        cfg = cfg.with_seed(args.seed_override)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_ERROR
    status = run_experiment(cfg)
    print(f"{cfg.experiment}: {'ok' if status == 0 else 'thresholds not met' if status == 1 else 'error'}"
          f" -> {cfg.output_dir}")
    return status


if __name__ == "__main__":
    sys.exit(main())
