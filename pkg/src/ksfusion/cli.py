"""Command line entry point: ``ksfusion {train,evaluate,generate,ablate}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys

from . import data, trainer
from .errors import ConfigError, DataFormatError, TrainingError
from .fusion import FusionConfig
from .objectives import TASKS

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_TRAINING = 0, 2, 3, 4


def _grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 7x7, got {text!r}") from None
    return h, w


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=TASKS, default="diagnosis")
    p.add_argument("--alpha", type=float, default=0.5, help="tumour weight of the consistency loss")
    p.add_argument("--epochs", type=int, default=None, help="default: 20 (diagnosis, grading) or 10 (survival)")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--no-ge-con", action="store_true", help="disable the gene-guided consistency loss")
    p.add_argument("--no-cg-coord", action="store_true", help="disable gradient coordination")
    p.add_argument("--grid", type=_grid, default=(7, 7), help="fusion grid HxW (must match the dataset)")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--hidden", type=int, default=128, help="genomic encoder hidden width")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ksfusion", description="Two-stream genomics/histology subspace fusion.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write metrics.csv, model.sfck and config.json")
    _add_model_args(p)

    p = sub.add_parser("ablate", help="train the full model and each ablation over several seeds")
    _add_model_args(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=data.SPLITS, default="val")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    defaults = data.SynthConfig()
    p.add_argument("--n-samples", type=int, default=defaults.n_samples)
    p.add_argument("--n-tumour", type=int, default=defaults.n_tumour)
    p.add_argument("--n-tme", type=int, default=defaults.n_tme)
    p.add_argument("--grid", type=_grid, default=(defaults.height, defaults.width))
    p.add_argument("--channels", type=int, default=defaults.channels)
    p.add_argument("--n-diagnosis", type=int, default=defaults.n_diagnosis)
    p.add_argument("--n-grade", type=int, default=defaults.n_grade)
    p.add_argument("--snr", type=float, default=defaults.snr, help="gene signal-to-noise ratio ('inf' for noiseless)")
    p.add_argument("--hist-snr", type=float, default=defaults.hist_snr)
    p.add_argument("--conflict", type=float, default=defaults.conflict_strength, help="conflict strength in [0, 1]")
    p.add_argument("--symmetric", action="store_true", help="both subspaces carry equal signal")
    return parser


def _train_config(args) -> trainer.TrainConfig:
    fusion = FusionConfig(embed_dim=args.embed_dim, heads=args.heads, grid=args.grid)
    return trainer.TrainConfig(
        task=args.task,
        alpha=args.alpha,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        data_dir=args.data,
        out_dir=args.out,
        fusion=fusion,
        cg_coord_enabled=not args.no_cg_coord,
        ge_con_enabled=not args.no_ge_con,
        hidden=args.hidden,
    )


def _fmt(report) -> str:
    return json.dumps({k: v for k, v in report.__dict__.items() if v is not None}, sort_keys=True)


def run(args) -> int:
    if args.command == "generate":
        h, w = args.grid
        cfg = data.SynthConfig(
            n_samples=args.n_samples,
            n_genes=args.n_tumour + args.n_tme,
            n_tumour=args.n_tumour,
            n_tme=args.n_tme,
            height=h,
            width=w,
            channels=args.channels,
            n_diagnosis=args.n_diagnosis,
            n_grade=args.n_grade,
            snr=args.snr,
            hist_snr=args.hist_snr,
            conflict_strength=args.conflict,
            symmetric=args.symmetric,
        )
        if not (math.isinf(cfg.snr) or cfg.snr >= 0):
            raise ConfigError("snr must be non-negative")
        path = data.save(data.generate(cfg, seed=args.seed), args.out)
        print(f"wrote {path}")
    elif args.command == "train":
        result = trainer.train(_train_config(args))
        print(_fmt(result.report))
    elif args.command == "evaluate":
        print(_fmt(trainer.evaluate(args.checkpoint, args.data, args.split)))
    elif args.command == "ablate":
        for row in trainer.ablate(_train_config(args), seeds=args.seeds):
            print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
