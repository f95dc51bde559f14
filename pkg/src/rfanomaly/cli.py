"""Command-line entry point: ``rfanomaly <stage> --config run.yaml``.

Exit codes: 0 success, 2 configuration error, 3 missing input,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import DETECTORS, load_config
from .errors import CheckpointError, ConfigError, DatasetError, InvalidArgument, NumericalFailure

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("rfanomaly")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfanomaly", description="RF anomaly detection by spectral frame prediction")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run configuration")
    common.add_argument("--seed", type=int, default=None, help="override master_seed")
    common.add_argument("--out", default=None, help="override output_dir")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="synthesize IQ recordings and labels")
    for name, text in (
        ("transform", "convert recordings to frame datasets"),
        ("train", "train the frame predictor on normal data"),
        ("evaluate", "ROC curves and summary table from score traces"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--detector", choices=DETECTORS, default=None, help="default: both detectors")
    p = sub.add_parser("detect", parents=[common], help="score test datasets with a trained model")
    p.add_argument("--detector", choices=DETECTORS, default=None, help="default: both detectors")
    p.add_argument("--checkpoint", default=None, help="model checkpoint (default: the run's own)")
    p = sub.add_parser("all", parents=[common], help="run every stage")
    p.add_argument("--detector", choices=DETECTORS, default=None, help="default: both detectors")
    return parser


def _dispatch(args, cfg) -> None:
    dets = (args.detector,) if getattr(args, "detector", None) else DETECTORS
    if args.command == "simulate":
        pipeline.simulate(cfg)
    elif args.command == "transform":
        for d in dets:
            pipeline.transform(cfg, d)
    elif args.command == "train":
        for d in dets:
            pipeline.train_stage(cfg, d)
    elif args.command == "detect":
        for d in dets:
            pipeline.detect(cfg, d, args.checkpoint)
    elif args.command == "evaluate":
        for d in dets:
            out = pipeline.evaluate(cfg, d)
            print(pipeline.format_summary(out / "summary.csv"))
    elif args.command == "all":
        root = pipeline.run_all(cfg, dets)
        for d in dets:
            print(pipeline.format_summary(root / "eval" / d / "summary.csv"))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, out=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        _dispatch(args, cfg)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, DatasetError, CheckpointError) as exc:
        print(f"missing or unreadable input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except InvalidArgument as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
