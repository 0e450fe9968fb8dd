"""Command-line entry point: ``cfdebias <subcommand> [--config FILE] [--seed N] [--deterministic] [--out DIR]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .pipeline import ConfigError, ExperimentConfig, StageError

logger = logging.getLogger("cfdebias")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="experiment config (JSON); desk defaults when omitted")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--deterministic", action="store_true", help="single thread, deterministic torch kernels")
    p.add_argument("--out", type=Path, help="run directory (overrides the config)")
    p.add_argument("--force", action="store_true", help="rerun the stage even if it is marked complete")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfdebias", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("forge", help="synthesize (or ingest) the dataset and write its manifest"))
    p = sub.add_parser("train-classifier", help="train f_ERM, f_DRO or the artifact detector d")
    p.add_argument("--method", choices=("erm", "dro", "detector"), required=True)
    _common(p)
    p = sub.add_parser("train-cf", help="train a counterfactual bundle supervised by a classifier checkpoint")
    p.add_argument("--classifier", required=True,
                   help="'erm', 'dro', or a path to a classifier checkpoint named erm.pt / dro.pt")
    _common(p)
    _common(sub.add_parser("evaluate", help="compute per-pair metrics and subgroup performance on the test split"))
    _common(sub.add_parser("report", help="emit tables, chart, panels and provenance"))
    _common(sub.add_parser("run-all", help="run every stage in order, resuming completed ones"))
    return parser


def load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.deterministic:
        config.deterministic = True
    if args.out is not None:
        config.out = str(args.out)
    return config


def _cf_method(spec: str):
    """Map --classifier to (method, checkpoint path or None)."""
    if spec in pipeline.METHODS:
        return spec, None
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"classifier checkpoint not found: {spec}")
    if path.stem not in pipeline.METHODS:
        raise ConfigError(f"cannot tell whether {spec} is the ERM or DRO classifier; name it erm.pt or dro.pt")
    return path.stem, path


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = load_config(args)
        if args.command == "run-all":
            if args.force:
                for name in pipeline.STAGES:
                    pipeline.run_stage(config, name, force=True)
                manifest = pipeline.write_run_manifest(pipeline.prepare(config))
            else:
                manifest = pipeline.run_pipeline(config)
            print(f"run complete: {config.out} (config {manifest.config_hash})")
        elif args.command == "forge":
            pipeline.run_stage(config, "forge", args.force)
        elif args.command == "train-classifier":
            pipeline.run_stage(config, args.method, args.force)
        elif args.command == "train-cf":
            method, path = _cf_method(args.classifier)
            fn = pipeline.stage_gan(method, path) if path is not None else None
            pipeline.run_stage(config, f"gan_{method}", args.force, fn=fn)
        elif args.command == "evaluate":
            pipeline.run_stage(config, "evaluate", args.force)
        elif args.command == "report":
            # the report is cheap and must reflect the current evaluation outputs
            pipeline.run_stage(config, "report", force=True)
            print((Path(config.out) / "report" / "scls_gap.txt").read_text().strip())
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
