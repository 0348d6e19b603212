"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from .errors import ConfigError

log = logging.getLogger("fedgeo")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

COMMANDS = ("synth", "ingest", "run", "ablate", "sweep", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgeo", description="Federated next-location prediction experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="experiment config (INI)")
        p.add_argument("--out", type=Path, help="output directory (overrides [experiment] out)")
        p.add_argument("--seeds", help="comma-separated seed list (overrides [experiment] seeds)")
        p.add_argument("--dry-run", action="store_true", help="validate and print the plan; write nothing")
        p.add_argument("--force", action="store_true", help="overwrite existing results")
        p.add_argument("--jobs", type=int, help="worker processes for independent cells")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _resolve(args) -> tuple[ex.ExperimentConfig, Path]:
    if args.config is None:
        raise ConfigError("config: --config is required")
    cfg = ex.load_config(args.config)
    if args.seeds is not None:
        cfg = replace(cfg, seeds=ex.parse_seeds(args.seeds))
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError(f"jobs: must be >= 1, got {args.jobs}")
        cfg = replace(cfg, jobs=args.jobs)
    out = args.out if args.out is not None else Path(cfg.out)
    return cfg, out


def _dispatch(args) -> int:
    if args.command == "report":
        if args.out is None and args.config is None:
            raise ConfigError("out: report needs --out DIR or --config")
        out = args.out if args.out is not None else Path(ex.load_config(args.config).out)
        if args.dry_run:
            print(f"command      report\noutput       {out}")
            return EXIT_OK
        sys.stdout.write(ex.cmd_report(out))
        return EXIT_OK

    cfg, out = _resolve(args)
    if args.command == "ingest" and cfg.dataset.source != "ingest":
        raise ConfigError("source: the ingest command needs source = ingest")
    if args.command == "synth" and cfg.dataset.source != "synthetic":
        raise ConfigError("source: the synth command needs source = synthetic")
    if args.command == "sweep":
        ex.sweep_cells(cfg)
    if args.dry_run:
        sys.stdout.write(ex.describe_plan(cfg, args.command, out))
        return EXIT_OK

    if args.command in ("synth", "ingest"):
        res = ex.cmd_synth(cfg, out, args.force)
        print(f"wrote {res['dir']} (heterogeneity index {res['heterogeneity_index']:.4f})")
    elif args.command == "run":
        res = ex.cmd_run(cfg, out, args.force)
        sys.stdout.write((res["dir"] / "summary.txt").read_text())
    elif args.command == "ablate":
        res = ex.cmd_ablate(cfg, out, args.force)
        sys.stdout.write((res["dir"] / "ablation.txt").read_text())
    elif args.command == "sweep":
        res = ex.cmd_sweep(cfg, out, args.force)
        sys.stdout.write((res["dir"] / "sweep.txt").read_text())
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
