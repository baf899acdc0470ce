"""Command line entry point: run, sweep, fuse, validate."""
from __future__ import annotations

import argparse
import dataclasses
import sys

from . import harness
from .fusion import assisted_inference
from .tensors import ProbMap, RegionMaskSet, decode_block, dumps, read_blocks


def _load(path: str, overrides: argparse.Namespace) -> harness.ExperimentConfig:
    cfg = harness.load_config(path)
    changes = {}
    if overrides.seed is not None:
        changes["seeds"] = (overrides.seed,)
    if overrides.out is not None:
        changes["out"] = overrides.out
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _read_tensor(path: str, expected):
    with open(path, encoding="ascii") as fh:
        blocks = read_blocks(fh.read())
    if len(blocks) != 1:
        raise ValueError(f"{path}: expected one tensor block, found {len(blocks)}")
    obj = decode_block(*blocks[0])
    if not isinstance(obj, expected):
        raise ValueError(f"{path}: expected {expected.__name__}, got {type(obj).__name__}")
    return obj


def cmd_run(args) -> int:
    cfg = _load(args.config, args)
    log = None if args.quiet else (lambda m: print(m, flush=True))
    result = harness.run_experiment(cfg, log=log)
    paths = harness.export(result, cfg.out, cfg)
    if not args.quiet:
        for row in harness.comparison_table(result):
            print(f"{row['strategy']:>9}  miou {row['miou']:.4f}  cur {row['cur']:.4f}  "
                  f"latency {row['avg_latency_s']:.4f}")
        print(f"wrote {len(paths)} files to {cfg.out}")
    if result.failures:
        for (strategy, seed), msg in sorted(result.failures.items()):
            print(f"failed cell {strategy} seed {seed}: {msg}", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args.config, args)
    points = harness.sweep_delta(cfg)
    harness.export(None, cfg.out, cfg, sweep=points)
    if not args.quiet:
        for scorer in cfg.sweep_scorers:
            for d, c, m in harness.mean_curve(points, scorer):
                print(f"{scorer:>7}  delta {d:.3f}  cur {c:.4f}  miou {m:.4f}")
    return 0


def cmd_fuse(args) -> int:
    pred = _read_tensor(args.pred, ProbMap)
    masks = _read_tensor(args.masks, RegionMaskSet)
    sys.stdout.write(dumps(assisted_inference(pred, masks).semantic))
    return 0


def cmd_validate(args) -> int:
    cfg = _load(args.config, args)
    if not args.quiet:
        sys.stdout.write(harness.config_text(cfg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coinfer", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_text in (("run", cmd_run, "run every strategy x seed cell and export"),
                                ("sweep", cmd_sweep, "sweep the gate threshold with frozen models"),
                                ("validate", cmd_validate, "check a config and print it resolved")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("config")
        p.set_defaults(func=fn)
    p = sub.add_parser("fuse", parents=[common], help="fuse a PM file with an RM file")
    p.add_argument("pred")
    p.add_argument("masks")
    p.set_defaults(func=cmd_fuse)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (harness.ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
