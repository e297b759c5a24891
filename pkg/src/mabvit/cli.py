"""Command-line interface.

Subcommands:
    gen-data        write a synthetic train/val corpus (+ norm sidecar)
    train           run one training job from a key=value config file
    eval            score a checkpoint on a dataset
    params          print the exact parameter count of a named preset
    collapse-probe  measure residual-stream statistics across a stack
    gradcheck       finite-difference check of a tiny end-to-end model

Set MABVIT_FIXED_CLOCK=1 to zero out wall_ms in metrics CSVs, making repeated
runs byte-identical (pair with OMP_NUM_THREADS=1 for full determinism).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from .attention import BlockStructure
from .data import SyntheticSpec, gen_corpus
from .diagnostics import (
    collapse_probe,
    gradcheck_model,
    make_probe_batch,
    median_records,
    write_collapse_csv,
)
from .errors import MabvitError
from .model import build_model, config_from_text, param_count, preset
from .train import evaluate, parse_train_config, train

_STRUCTURES = {
    "seq": BlockStructure.PRELN_SEQUENTIAL,
    "par": BlockStructure.PRELN_PARALLEL,
    "postln": BlockStructure.POSTLN_SEQUENTIAL,
}


def _probe_heads(width: int) -> int:
    return next(h for h in (8, 4, 2, 1) if width % h == 0)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mabvit", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic train/val corpus")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train from a key=value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset file or corpus directory")

    p = sub.add_parser("params", help="print a preset's exact parameter count")
    p.add_argument("--preset", required=True, choices=["ti16", "s16", "m16", "b16"])
    p.add_argument(
        "--variant", required=True, choices=["base", "gelu", "glu", "pr-glu"]
    )
    p.add_argument("--structure", default="seq", choices=sorted(_STRUCTURES))

    p = sub.add_parser("collapse-probe", help="residual-stream statistics across a stack")
    p.add_argument("--config", required=True, help="model config file (key=value lines)")
    p.add_argument("--depth", type=int, required=True, help="override the layer count")
    p.add_argument("--width", type=int, required=True, help="override the embed dim")
    p.add_argument("--seeds", type=int, required=True, help="number of seeds to median over")
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny model")
    p.add_argument("--preset", required=True, choices=["tiny"])
    p.add_argument("--variant", required=True, choices=["base", "gelu", "glu"])
    p.add_argument("--structure", default="seq", choices=sorted(_STRUCTURES))

    return parser


def _cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        classes=args.classes, per_class=args.per_class, image_size=args.size
    )
    gen_corpus(spec, args.seed, args.out)
    print(f"wrote train.bin, val.bin, norm.txt to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = parse_train_config(Path(args.config).read_text())
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    clock = (lambda: 0.0) if os.environ.get("MABVIT_FIXED_CLOCK") == "1" else None
    result = train(cfg, clock=clock)
    print(f"metrics: {result.metrics_path}")
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"final train accuracy: {result.final_train_accuracy!r}")
    print(f"final val accuracy: {result.final_val_accuracy!r}")
    print(f"final val loss: {result.final_val_loss!r}")
    return 0


def _cmd_eval(args) -> int:
    accuracy, loss = evaluate(args.checkpoint, args.data)
    print(f"accuracy={accuracy!r}")
    print(f"loss={loss!r}")
    return 0


def _cmd_params(args) -> int:
    config = preset(args.preset, args.variant, _STRUCTURES[args.structure])
    print(param_count(config))
    return 0


def _cmd_collapse_probe(args) -> int:
    config = config_from_text(Path(args.config).read_text())
    if args.depth < 1 or args.width < 1 or args.seeds < 1:
        raise MabvitError("depth, width, and seeds must all be >= 1")
    config = replace(
        config,
        layers=args.depth,
        embed_dim=args.width,
        mlp_dim=4 * args.width,
        heads=_probe_heads(args.width),
    )
    reports = []
    for seed in range(args.seeds):
        params = build_model(config, seed, init_std=None)
        batch = make_probe_batch(config, seed)
        reports.append(collapse_probe(params, config, batch, seed=seed))
    write_collapse_csv(median_records(reports), args.out)
    n = len(reports[0].records)
    print(f"wrote {n} rows (median of {args.seeds} seeds) to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    config = preset(args.preset, args.variant, _STRUCTURES[args.structure])
    report = gradcheck_model(config)
    print(report.summary())
    return 0 if report.passed else 1


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "params": _cmd_params,
    "collapse-probe": _cmd_collapse_probe,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (MabvitError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
