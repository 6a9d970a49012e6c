"""Command-line entry point: ``rsfiqa <subcommand> ...``.

Every :class:`RunConfig` key is also a flag (``--lr``, ``--use-mhf`` /
``--no-use-mhf``, ``--split-ratios 0.8 0 0.2``); flags override ``--config``.
Domain failures print ``error: <Category>: <message>`` on stderr and exit 1;
usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import types
import typing
from pathlib import Path

from . import __version__
from .config import RunConfig, config_fields
from .errors import RsfiqaError

log = logging.getLogger("rsfiqa")


# --- config flags -----------------------------------------------------------


def _unwrap_optional(t):
    if typing.get_origin(t) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(t) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return t


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration (overrides --config)")
    group.add_argument("--config", type=Path, help="TOML file of RunConfig keys")
    hints = typing.get_type_hints(RunConfig)
    for f in config_fields():
        t = _unwrap_optional(hints[f.name])
        flag = "--" + f.name.replace("_", "-")
        if t is bool:
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif typing.get_origin(t) is tuple:
            elem = typing.get_args(t)[0]
            group.add_argument(flag, dest=f.name, type=elem, nargs="*", default=None, metavar=f.name.upper())
        else:
            group.add_argument(flag, dest=f.name, type=t, default=None, metavar=t.__name__.upper())


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in config_fields()}
    for name, value in overrides.items():
        if isinstance(value, list):
            overrides[name] = tuple(value)
    return RunConfig.load(args.config, **overrides)


def _add_dataset_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", type=Path, required=True, help="CSV with header image_path,mos")
    parser.add_argument("--images-dir", type=Path, help="base folder for relative image paths (default: CSV folder)")


def _add_store_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--masks-dir", type=Path, help="read/write region masks here")
    parser.add_argument("--cache", type=Path, help="description cache (JSONL)")


def _splits(args, cfg, index):
    from .data import load_split_file, split

    if getattr(args, "split_file", None) is not None:
        return load_split_file(args.split_file, index)
    return split(index, cfg.split_ratios, cfg.seed)


def _cache(args):
    from .description import DescriptionCache

    return DescriptionCache(args.cache) if args.cache is not None else None


# --- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    from .data import make_synthetic_dataset

    index = make_synthetic_dataset(args.count, args.seed, args.out, size=args.size)
    print(f"wrote {len(index)} images and {Path(args.out) / 'dataset.csv'}")
    return 0


def cmd_segment(args) -> int:
    from .data import load_dataset, load_image
    from .training import make_segmenter, region_masks

    cfg = config_from_args(args)
    index = load_dataset(args.dataset, args.images_dir)
    segmenter = make_segmenter(cfg)
    for r in index:
        mask_set = region_masks(load_image(r.path, (cfg.height, cfg.width)), r.image_id, cfg, segmenter, args.masks_dir)
        log.info("%s: %d regions", r.image_id, mask_set.l_eff)
    print(f"segmented {len(index)} images into {args.masks_dir}")
    return 0


def cmd_describe(args) -> int:
    from .data import load_dataset, load_image
    from .description import describe_regions
    from .training import cache_tag, make_describer, make_segmenter, region_masks

    cfg = config_from_args(args)
    index = load_dataset(args.dataset, args.images_dir)
    cache = _cache(args)
    segmenter, describer = make_segmenter(cfg), make_describer(cfg)
    count = 0
    for r in index:
        image = load_image(r.path, (cfg.height, cfg.width))
        mask_set = region_masks(image, r.image_id, cfg, segmenter, args.masks_dir)
        records = describe_regions(
            describer, image, mask_set, r.image_id, cache, cache_tag(cfg, mask_set), cfg.max_in_flight
        )
        count += len(records)
    print(f"described {count} regions of {len(index)} images into {args.cache}")
    return 0


def cmd_train(args) -> int:
    from .data import load_dataset
    from .training import prepare_samples, train

    cfg = config_from_args(args)
    index = load_dataset(args.dataset, args.images_dir)
    train_idx, val_idx, _ = _splits(args, cfg, index)
    cache = _cache(args)
    train_s = prepare_samples(train_idx, cfg, cache, args.masks_dir)
    val_s = prepare_samples(val_idx, cfg, cache, args.masks_dir)
    ckpt = train(cfg, train_s, val_s, progress=True)
    ckpt.save(args.out)
    if args.log is not None:
        Path(args.log).write_text(json.dumps(ckpt.log, indent=1))
    last = ckpt.log[-1]
    summary = {
        "checkpoint": str(args.out),
        "epochs": len(ckpt.log),
        "best_epoch": ckpt.best_epoch,
        "train_loss": last["train_loss"],
        "val_srcc": ckpt.log[ckpt.best_epoch].get("val_srcc"),
    }
    print(json.dumps(summary))
    return 0


def cmd_predict(args) -> int:
    from .data import load_dataset
    from .metrics import write_predictions
    from .training import Checkpoint, predict, prepare_samples

    ckpt = Checkpoint.load(args.checkpoint)
    cfg = ckpt.config
    index = load_dataset(args.dataset, args.images_dir)
    if args.split != "all":
        index = dict(zip(("train", "val", "test"), _splits(args, cfg, index)))[args.split]
    samples = prepare_samples(index, cfg, _cache(args), args.masks_dir)
    scores = predict(ckpt, samples)
    write_predictions(args.out, scores)
    print(f"wrote {len(scores)} predictions to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate

    report = evaluate(args.predictions, args.labels, split=args.split_name)
    if args.json:
        print(json.dumps(report.as_dict()))
    elif report.plcc_std is None:
        print(f"{report.split}: n={report.count} PLCC={report.plcc:.6f} SRCC={report.srcc:.6f}")
    else:
        print(
            f"{report.split}: n={report.count} runs={len(report.per_seed)} "
            f"PLCC={report.plcc:.6f}±{report.plcc_std:.6f} SRCC={report.srcc:.6f}±{report.srcc_std:.6f}"
        )
    return 0


def cmd_gradcheck(args) -> int:
    from .training import gradcheck_model

    report = gradcheck_model(seed=args.seed, eps=args.eps, samples_per_param=args.samples_per_param)
    if args.verbose:
        for name, err in report.per_group.items():
            print(f"  {name}: {err:.3e}")
    print(
        f"max relative error {report.max_rel_error:.3e} over {report.coordinates} coordinates "
        f"({report.seconds:.1f}s)"
    )
    return 0 if report.max_rel_error < args.tolerance else 1


def cmd_ablate(args) -> int:
    from .ablation import GRIDS, ablate, format_table, l_sweep, write_table
    from .data import load_dataset

    cfg = config_from_args(args)
    index = load_dataset(args.dataset, args.images_dir)
    grid = l_sweep(args.L_values) if args.grid == "lsweep" and args.L_values else GRIDS[args.grid]
    rows = ablate(cfg, index, grid, _cache(args), args.masks_dir, progress=args.verbose)
    print(format_table(rows))
    if args.out is not None:
        write_table(rows, args.out)
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .ablation import GRIDS

    parser = argparse.ArgumentParser(prog="rsfiqa", description="Region-aware no-reference image quality assessment.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic distorted-image dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", help="partition every image into regions")
    _add_dataset_flags(p)
    p.add_argument("--masks-dir", type=Path, required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("describe", help="describe every region and fill the cache")
    _add_dataset_flags(p)
    p.add_argument("--masks-dir", type=Path)
    p.add_argument("--cache", type=Path, required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_dataset_flags(p)
    _add_store_flags(p)
    p.add_argument("--split-file", type=Path, help="CSV image_id,split fixing train/val/test")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, help="write the per-epoch log as JSON")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score images with a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_dataset_flags(p)
    _add_store_flags(p)
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--split-file", type=Path)
    p.add_argument("--out", type=Path, required=True, help="predictions CSV (image_id,score)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="PLCC/SRCC of prediction files against labels")
    p.add_argument("--predictions", type=Path, nargs="+", required=True, help="one file per seed")
    p.add_argument("--labels", type=Path, required=True, help="CSV with image_id (or image_path) and mos")
    p.add_argument("--split-name", default="test")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model's gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--samples-per-param", type=int, default=8)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score a grid of configurations")
    _add_dataset_flags(p)
    _add_store_flags(p)
    p.add_argument("--grid", choices=sorted(GRIDS), required=True)
    p.add_argument("--L-values", dest="L_values", type=int, nargs="+", help="values for --grid lsweep")
    p.add_argument("--out", type=Path, help="write the table as CSV")
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except RsfiqaError as e:
        print(f"error: {e.category}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: IoError: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
