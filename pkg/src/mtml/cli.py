"""Command-line entry point: ``mtml run``, ``mtml report``, ``mtml list``, ``mtml combos``.

Settings come from an optional TOML file with ``[train]``, ``[train.net]``
and ``[data]`` tables; flags override the file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .episodes import InsufficientEpisodesWarning, format_combos, generate_combos
from .harness import DataConfig, default_grid, render_report, run, write_outputs
from .meta import INNER_SCOPES
from .trainers import FINETUNE_MODES, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def _seeds(text: str) -> List[int]:
    out = []
    for part in text.split(","):
        if "-" in part.strip("-"):
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        elif part.strip():
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("no seeds given")
    return out


def load_config(path: Optional[Path]) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    unknown = set(doc) - {"train", "data", "seeds"}
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    return doc


def build_manifest(args: argparse.Namespace):
    doc = load_config(args.config)
    train = dict(doc.get("train", {}))
    data = dict(doc.get("data", {}))
    for flag, key in (("inner_lr", "inner_lr"), ("outer_lr", "outer_lr"), ("inner_scope", "inner_scope"), ("finetune_mode", "finetune_mode")):
        value = getattr(args, flag)
        if value is not None:
            train[key] = value
    if args.world_seed is not None:
        data["world_seed"] = args.world_seed
    seeds = args.seeds if args.seeds is not None else doc.get("seeds", [0, 1, 2])
    if args.grid != "default":
        raise ValueError(f"unknown grid {args.grid!r}")
    return default_grid(args.out, TrainConfig(**train), DataConfig(**data), seeds)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML file with [train], [train.net] and [data] tables")
    p.add_argument("--grid", default="default", help="experiment grid (only 'default' exists)")
    p.add_argument("--filter", help="experiment ids: '4' for a family, '4.3' for one, globs allowed, comma separated")
    p.add_argument("--seeds", type=_seeds, help="e.g. 0,1,2 or 0-4")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--world-seed", type=int)
    p.add_argument("--inner-lr", type=float)
    p.add_argument("--outer-lr", type=float)
    p.add_argument("--inner-scope", choices=INNER_SCOPES)
    p.add_argument("--finetune-mode", choices=FINETUNE_MODES)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtml", description="Multi-task meta learning on a synthetic suite")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the experiment grid (skips finished runs)")
    _common(p)
    p.add_argument("--force", action="store_true", help="re-run even if a current result exists")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("report", help="rebuild CSVs and print the report for an output directory")
    p.add_argument("--out", type=Path, default=Path("runs"))

    p = sub.add_parser("list", help="print the grid without running it")
    _common(p)

    p = sub.add_parser("combos", help="print the episode combinations of a source task set")
    p.add_argument("tasks", nargs="+")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "combos":
            import warnings

            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", InsufficientEpisodesWarning)
                combos = generate_combos(args.tasks)
            for w in caught:
                print(f"warning: {w.message}", file=sys.stderr)
            print(format_combos(combos))
            return 0
        if args.command == "report":
            if not (args.out / "runs").is_dir():
                print(f"error: no runs under {args.out}", file=sys.stderr)
                return 2
            write_outputs(args.out)
            print(render_report(args.out), end="")
            return 0
        manifest = build_manifest(args)
        if args.command == "list":
            print(f"config hash {manifest.config_hash}, seeds {list(manifest.seeds)}")
            for spec in manifest.select(args.filter):
                print(f"{spec.id:>4}  {spec.paradigm:<14} {spec.describe()}")
            return 0
        summary = run(manifest, args.filter, force=args.force, jobs=args.jobs)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"executed {len(summary.executed)}, skipped {len(summary.skipped)}, failed {len(summary.failed)}; outputs in {args.out}")
    for exp_id, seed in summary.failed:
        print(f"failed: {exp_id} seed {seed}", file=sys.stderr)
    return summary.exit_code


if __name__ == "__main__":
    sys.exit(main())
