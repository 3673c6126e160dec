"""Command-line entry point: ``routine-relapse <stage> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .predictor.features import FEATURE_SETS
from .stages import STAGES, StageDependencyError, StageError, run_stage, write_json

OUT_ENV = "ROUTINE_RELAPSE_OUT"
DEFAULT_OUT = "routine-relapse-out"
ERROR_FILE = "error.json"

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DEPENDENCY = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="routine-relapse",
                                     description="Behavioral-routine clustering and relapse prediction pipeline.")
    sub = parser.add_subparsers(dest="stage", required=True, metavar="STAGE")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML pipeline config")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="worker processes (results do not depend on it)")
    common.add_argument("--out", type=Path, help=f"output directory (default: config, then ${OUT_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")
    helps = {"synth": "generate a synthetic cohort archive", "ingest": "read and validate the input cohort",
             "fit-gmm": "PCA embedding and mixture model selection", "fit-pam": "DTW distances and medoid selection",
             "score": "per-day scores of both models", "analyze": "cluster summaries and near-relapse effects",
             "evaluate": "leave-one-patient-out relapse prediction", "report": "aggregate tables and figures"}
    for name in STAGES:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "evaluate":
            p.add_argument("--feature-set", choices=FEATURE_SETS)
            p.add_argument("--no-personalization", action="store_true")
        if name == "report":
            p.add_argument("--format", action="append", dest="formats",
                           help="plot output format, csv or svg (repeatable; default both)")
    return parser


def _out_dir(args, cfg) -> Path:
    if args.out is not None:
        return args.out
    if cfg is not None and cfg.paths.output:
        return Path(cfg.paths.output)
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def _fail(out: Path | None, record: dict, code: int) -> int:
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            write_json(out / ERROR_FILE, record)
        except OSError:
            pass
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        return _fail(None, {"stage": args.stage, "error": "UsageError", "message": "--threads must be >= 1"},
                     EXIT_CONFIG)
    cfg = None
    try:
        overrides = {"seed": args.seed} if args.seed is not None else {}
        cfg = load_config(args.config, overrides)
    except (ConfigError, OSError) as exc:
        key = getattr(exc, "key", None)
        return _fail(_out_dir(args, None), {"stage": args.stage, "error": type(exc).__name__,
                                            "message": str(exc), "key": key}, EXIT_CONFIG)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    kwargs = {}
    if args.stage == "evaluate":
        kwargs = {"feature_set": args.feature_set,
                  "personalization": False if args.no_personalization else None}
    elif args.stage == "report":
        kwargs = {"formats": tuple(args.formats or ("csv", "svg"))}
    try:
        run_stage(args.stage, cfg, out, args.threads, **kwargs)
    except StageDependencyError as exc:
        return _fail(out, exc.record, EXIT_DEPENDENCY)
    except StageError as exc:
        return _fail(out, exc.record, EXIT_FAILED)
    except Exception as exc:  # noqa: BLE001 - every failure gets a machine-readable record
        logging.getLogger(__name__).debug("stage failed", exc_info=True)
        return _fail(out, {"stage": args.stage, "error": type(exc).__name__, "message": str(exc)}, EXIT_FAILED)
    stale = out / ERROR_FILE
    if stale.exists():
        stale.unlink()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
