"""Command-line interface: gen-phantom, train, eval, infer, params."""
from __future__ import annotations

import argparse
import sys

from . import layers
from .dataio import parse_config_file
from .errors import VeinsegError
from .model import ModelConfig, build_model, count_params
from .phantom import PhantomParams, generate_dataset
from .train import TrainConfig, evaluate, infer, train


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="veinseg",
        description="Vessel-wall segmentation: synthetic data, training, "
                    "evaluation, inference, and parameter accounting.")
    parser.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
    parser.add_argument("--config", default=None,
                        help="key=value file supplying defaults for any option")
    parser.add_argument("--threads", type=int, default=None,
                        help="batch-parallel workers; results are identical to "
                             "serial (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=None, help="number of image/mask pairs")
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)

    p = sub.add_parser("train", help="train a model on a phantom dataset")
    p.add_argument("--data", required=True, help="dataset directory (with manifest.csv)")
    p.add_argument("--out", required=True, help="output directory for checkpoint/curves")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--variant", choices=("opto", "baseline"), default=None)
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default=None)
    p.add_argument("--out", default=None, help="metrics CSV path")

    p = sub.add_parser("infer", help="segment one image tensor file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output path prefix")

    p = sub.add_parser("params", help="print per-layer parameter tables")
    p.add_argument("--variant", choices=("opto", "baseline", "both"), default=None)
    return parser


class _Options:
    """CLI values override config-file values override defaults."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file = parse_config_file(args.config) if args.config else {}

    def get(self, name: str, cast, default):
        cli = getattr(self.args, name, None)
        if cli is not None:
            return cli
        if name in self.file:
            return cast(self.file[name])
        return default


def _print_param_table(variant: str) -> None:
    model = build_model(ModelConfig(variant=variant), init="zeros")
    total = count_params(model)
    print(f"variant: {variant}")
    for group, n in model.param_table():
        print(f"  {group:16s} {n:>12,}")
    print(f"  {'TOTAL':16s} {total:>12,}  ({total / 1e6:.2f}M)")


def _run(args: argparse.Namespace) -> int:
    opt = _Options(args)
    seed = opt.get("seed", int, 0)
    layers.set_num_threads(opt.get("threads", int, 1))

    if args.command == "gen-phantom":
        params = PhantomParams(count=opt.get("count", int, 240),
                               height=opt.get("height", int, 128),
                               width=opt.get("width", int, 64))
        manifest = generate_dataset(args.out, seed, params)
        print(f"wrote {params.count} pairs; manifest at {manifest}")
        return 0

    if args.command == "train":
        cfg = TrainConfig(
            data_dir=args.data,
            out_dir=args.out,
            seed=seed,
            epochs=opt.get("epochs", int, 20),
            batch_size=opt.get("batch_size", int, 16),
            lr=opt.get("lr", float, 1e-4),
            variant=opt.get("variant", str, "opto"),
            verbose=not args.quiet,
        )
        result = train(cfg)
        print(f"best epoch {result.best_epoch}; checkpoint at {result.checkpoint_path}; "
              f"curves at {result.curves_path}")
        return 0

    if args.command == "eval":
        split = opt.get("split", str, "test")
        pooled, mean_row, params, dice = evaluate(
            args.checkpoint, args.data, split=split, out_csv=args.out)
        print(f"split: {split}  parameters: {params}")
        for label, row in (("pooled", pooled), ("per-image-mean", mean_row)):
            vals = "  ".join(f"{k}={'n/a' if v is None else f'{v:.4f}'}"
                             for k, v in row.as_dict().items())
            print(f"  {label:16s} {vals}")
        print(f"  pooled dice coefficient: {dice:.4f}")
        if args.out:
            print(f"metrics CSV at {args.out}")
        return 0

    if args.command == "infer":
        paths = infer(args.checkpoint, args.image, args.out)
        print(f"wrote {paths['prob']}, {paths['mask']}, {paths['pgm']}")
        return 0

    if args.command == "params":
        variant = opt.get("variant", str, "both")
        for v in ("opto", "baseline") if variant == "both" else (variant,):
            _print_param_table(v)
        return 0

    raise AssertionError(f"unhandled command {args.command!r}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _run(args)
    except VeinsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
