"""Command-line entry point: ``mmfed {baseline,fedmeta,grid,synth-data,inspect-checkpoint}``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .data import dataset_as_sources, load_aligned, save_sources, synth_generate
from .errors import MMFedError
from .federated import BaselineConfig, MetaConfig, load_checkpoint
from .harness import execute_run, parse_config, run_grid
from .model import ARCH_PRESETS

log = logging.getLogger("mmfed")


def _field_type(f):
    """int, float or str from a dataclass field annotation such as ``"int | None"``."""
    text = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    for t in (int, float, str):
        if t.__name__ in text:
            return t
    return str


def _add_config_flags(parser, cls, skip=()):
    for f in fields(cls):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.name == "seed":
            parser.add_argument(flag, type=int, required=True, help="random seed (required)")
        else:
            parser.add_argument(flag, type=_field_type(f), default=f.default, help=f"default: {f.default}")


def _add_data_flags(parser):
    g = parser.add_argument_group("data")
    g.add_argument("--data", metavar="DIR", help="dataset directory written by synth-data; synthetic if omitted")
    g.add_argument("--data-seed", type=int, default=0, help="alignment or generation seed")
    g.add_argument("--per-class", type=int, default=100)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--scale", type=float, default=1.0)
    g.add_argument("--arch", choices=sorted(ARCH_PRESETS), default="default")


def _load_data(args):
    if args.data:
        return load_aligned(args.data, args.data_seed)
    return synth_generate(per_class=args.per_class, noise_sigma=args.noise, seed=args.data_seed,
                          arch=ARCH_PRESETS[args.arch], scale=args.scale)


def _config_from(args, cls, skip=()):
    return cls(**{f.name: getattr(args, f.name) for f in fields(cls) if f.name not in skip})


def _report(history, error, run_dir):
    if history is None:
        print(f"run failed: {error}", file=sys.stderr)
        return 1
    final = history[-1]
    print(f"round {final.round}: test accuracy {100 * final.test_acc:.3f}%  test loss {final.test_loss:.4f}")
    print(f"metrics written to {run_dir}")
    return 0


def cmd_baseline(args):
    cfg = _config_from(args, BaselineConfig).validate()
    return _report(*execute_run("baseline", cfg, _load_data(args), args.arch, args.out), args.out)


def cmd_fedmeta(args):
    kwargs = {}
    if args.resume:
        state, cfg = load_checkpoint(args.resume)
        cfg = replace(cfg, rounds=args.rounds)
        kwargs["resume"] = state
    else:
        cfg = _config_from(args, MetaConfig)
    cfg.validate()
    if args.checkpoint_dir:
        kwargs["checkpoint_dir"] = args.checkpoint_dir
    return _report(*execute_run("fedmeta", cfg, _load_data(args), args.arch, args.out, **kwargs), args.out)


def cmd_grid(args):
    grid = parse_config(args.config)
    print(f"{len(grid)} runs")
    results = run_grid(grid, args.out, jobs=args.jobs)
    print((Path(args.out) / "summary.txt").read_text(), end="")
    failed = [r for r in results if r.status != "ok"]
    for r in failed:
        print(f"FAILED {r.spec.run_id}: {r.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_synth_data(args):
    ds = synth_generate(per_class=args.per_class, noise_sigma=args.noise, seed=args.seed,
                        arch=ARCH_PRESETS[args.arch], scale=args.scale)
    save_sources(args.out, dataset_as_sources(ds), extra={"synthetic.seed": args.seed, "synthetic.arch": args.arch,
                                                         "synthetic.noise": args.noise, "synthetic.scale": args.scale})
    print(f"wrote {len(ds)} aligned samples to {args.out}")
    return 0


def cmd_inspect_checkpoint(args):
    state, cfg = load_checkpoint(args.directory)
    print(f"round: {state.round}")
    for f in fields(cfg):
        print(f"config.{f.name}: {getattr(cfg, f.name)}")
    print(f"parameters: {state.theta.size()} in {len(state.theta.names())} tensors")
    for name, arr in state.theta.items():
        print(f"  {name:28s} {str(arr.shape):18s} norm {np.linalg.norm(arr):.6g}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="mmfed", description="Federated multimodal meta-learning simulator.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("baseline", help="centralized training with muted branches")
    _add_config_flags(p, BaselineConfig)
    _add_data_flags(p)
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("fedmeta", help="federated meta-learning (3MF)")
    _add_config_flags(p, MetaConfig)
    _add_data_flags(p)
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--checkpoint-dir", help="save the global state here after every round")
    p.add_argument("--resume", metavar="DIR", help="continue from a checkpoint up to --rounds")
    p.set_defaults(func=cmd_fedmeta)

    p = sub.add_parser("grid", help="run every entry of an experiment config")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("synth-data", help="write a separable synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--arch", choices=sorted(ARCH_PRESETS), default="default")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint's round, config and parameter norms")
    p.add_argument("directory")
    p.set_defaults(func=cmd_inspect_checkpoint)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except MMFedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
