"""Subcommand CLI over the staged benchmark pipeline.

Usage: ``ctbench <stage> [--config cfg.json] [overrides]`` where stage is one
of phantom, project, reconstruct, evaluate, report, pitfall. Flags take
precedence over the config file. Exits 0 on success; on a known error prints
``error:<category>: message`` to stderr and exits 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import bench
from .errors import CTBenchError

log = logging.getLogger(__name__)

STAGES = {
    "phantom": bench.cmd_phantom,
    "project": bench.cmd_project,
    "reconstruct": bench.cmd_reconstruct,
    "evaluate": bench.cmd_evaluate,
    "report": bench.cmd_report,
}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctbench",
                                 description="sparse-view CT benchmark pipeline")
    sub = ap.add_subparsers(dest="stage", required=True)
    for name in list(STAGES) + ["pitfall"]:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--out-dir", default=None)
        p.add_argument("--phantom-spec", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--n-scans", type=int, default=None)
        p.add_argument("--views", type=int, nargs="+", default=None)
        p.add_argument("--methods", nargs="+", default=None)
        p.add_argument("--noise-sigma", type=float, default=None)
        p.add_argument("--apodization", choices=["none", "hann"], default=None)
        p.add_argument("--compare-methods", nargs=2, default=None,
                       help="baseline and variant method for significance columns")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "pitfall":
            p.add_argument("--target", default="smallest-small",
                           help="smallest-small | largest-large | none | label:<id>")
    return ap


def _build_config(args: argparse.Namespace) -> bench.BenchConfig:
    cfg = bench.load_config(args.config) if args.config else bench.BenchConfig()
    overrides = {}
    for flag, field in [("out_dir", "out_dir"), ("phantom_spec", "phantom_spec"),
                        ("seed", "seed"), ("n_scans", "n_scans"),
                        ("noise_sigma", "noise_sigma"), ("apodization", "apodization")]:
        value = getattr(args, flag)
        if value is not None:
            overrides[field] = value
    if args.views is not None:
        overrides["views"] = tuple(args.views)
    if args.methods is not None:
        overrides["methods"] = tuple(args.methods)
    if args.compare_methods is not None:
        overrides["compare_methods"] = tuple(args.compare_methods)
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _build_config(args)
        if args.stage == "pitfall":
            path = bench.cmd_pitfall(cfg, target=args.target)
            print(path)
        else:
            result = STAGES[args.stage](cfg)
            if isinstance(result, (list, tuple)):
                for p in result:
                    print(p)
            else:
                print(result)
    except CTBenchError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error:io: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
