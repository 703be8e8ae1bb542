"""Command line entry point.

Subcommands: generate / weights / pretrain / train / eval / relight.
Flag values override config-file values, which override built-in defaults.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from .core import Config, ConfigError, load_config, validate_config
from . import data as data_mod

log = logging.getLogger("nightadapt")

_TAXONOMIES = ("synthetic", "cityscapes")


def _labels_for(name):
    from .core import LabelSet
    if name == "cityscapes":
        return LabelSet.cityscapes()
    return data_mod.synthetic_label_set()


def _setup_logging():
    level = logging.DEBUG if os.environ.get("NIGHTADAPT_VERBOSE") else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _resolve_config(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    overrides = {}
    mapped = {
        "seed": "seed",
        "iters": "max_iters",
        "pretrain_iters": "pretrain_iters",
        "save_interval": "save_interval",
        "crop": None,  # handled below
    }
    for flag, field in mapped.items():
        if field and getattr(args, flag, None) is not None:
            overrides[field] = getattr(args, flag)
    if getattr(args, "crop", None) is not None:
        overrides["crop_source"] = args.crop
        overrides["crop_target"] = args.crop
    if getattr(args, "no_relight", False):
        overrides["relight_enabled"] = False
    if getattr(args, "no_light_loss", False):
        overrides["light_loss_enabled"] = False
    if getattr(args, "static_loss", None) is not None:
        overrides["static_loss_kind"] = args.static_loss
    if getattr(args, "no_reweight", False):
        overrides["reweight_pseudo"] = False
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    cfg = validate_config(cfg)
    log.info("effective config: %s", dataclasses.asdict(cfg))
    return cfg


def cmd_generate(args) -> int:
    meta = data_mod.synth_generate(args.out, seed=args.seed,
                                   n_scenes=args.scenes, size=args.size)
    log.info("wrote %s scenes under %s", meta["counts"], args.out)
    return 0


def cmd_weights(args) -> int:
    from .reweight import (clamp_absent_proportions, normalize_weights,
                           raw_class_weights)
    labels = _labels_for(args.taxonomy)
    index = data_mod.load_labeled_index(args.data)
    proportions = clamp_absent_proportions(
        data_mod.class_proportions(index, labels))
    raw = raw_class_weights(proportions)
    weights = normalize_weights(raw, args.std, args.avg)
    print(f"{'class':<16} {'proportion':>12} {'raw':>10} {'weight':>10}")
    for name, a, wr, w in zip(labels.names, proportions, raw, weights):
        print(f"{name:<16} {float(a):>12.6f} {float(wr):>10.4f} {float(w):>10.4f}")
    return 0


def cmd_pretrain(args) -> int:
    from .trainer import pretrain_source
    cfg = _resolve_config(args)
    labels = _labels_for(args.taxonomy)
    index = data_mod.load_labeled_index(args.source_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "checkpoint_pretrain.pt"
    _, history = pretrain_source(cfg, index, labels, out_path=out_path)
    if history:
        log.info("pretraining done; first loss %.4f, last loss %.4f",
                 history[0], history[-1])
    log.info("wrote %s", out_path)
    return 0


def cmd_train(args) -> int:
    from .trainer import run_training
    cfg = _resolve_config(args)
    labels = _labels_for(args.taxonomy)
    source_index = data_mod.load_labeled_index(args.source_dir)
    paired_index = data_mod.load_paired_index(
        args.target_day_dir, args.target_night_dir, args.pairs_file)
    val_index = None
    if args.val_dir:
        val_index = data_mod.load_labeled_index(args.val_dir, split="night_val")
    pretrained = None if args.no_pretrain else args.pretrained
    final = run_training(cfg, source_index, paired_index, args.out_dir, labels,
                         pretrained=pretrained, resume=args.resume,
                         night_val_index=val_index)
    log.info("wrote %s", final)
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate_dataset
    index = data_mod.load_labeled_index(args.data, split="eval")
    sweep = None
    if args.sweep:
        sweep = [float(s) for s in args.sweep.split(",") if s.strip()]
    report = evaluate_dataset(args.checkpoint, index, std_test=args.std,
                              out_dir=args.out, sweep_stds=sweep)
    log.info("mIoU %.4f over %d images (std=%g)", report["miou"],
             report["num_images"], report["std"])
    return 0


def cmd_relight(args) -> int:
    import torch
    import torch.nn.functional as F
    from PIL import Image

    from .checkpoint import load_checkpoint, restore_networks
    from .relight import RelightNet, to_export_image

    if args.checkpoint:
        _, _, nets = restore_networks(load_checkpoint(args.checkpoint))
        net = nets["relight"]
    else:
        log.warning("no checkpoint given; using an identity-initialized network")
        net = RelightNet()
    net.eval()

    src = Path(args.input)
    files = sorted(p for p in src.glob("*.png")) if src.is_dir() else [src]
    if not files:
        raise FileNotFoundError(f"no PNG images under {src}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in files:
        image = data_mod.load_image(path)
        h, w = image.shape[-2:]
        pad_h, pad_w = (-h) % 4, (-w) % 4
        batch = F.pad(image.unsqueeze(0), (0, pad_w, 0, pad_h), mode="replicate")
        with torch.no_grad():
            relit = net(batch)[0, :, :h, :w]
        arr = to_export_image(relit).permute(1, 2, 0).numpy()
        Image.fromarray(arr).save(out_dir / path.name)
    log.info("relit %d image(s) into %s", len(files), out_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nightadapt",
        description="One-stage day-to-night domain adaptation for semantic "
                    "segmentation: relighting, adversarial output alignment "
                    "and pseudo supervision of static categories.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic desk-scale dataset")
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("weights", help="print the class re-weighting table")
    p.add_argument("--data", required=True, help="labeled source dataset root")
    p.add_argument("--std", type=float, default=0.05)
    p.add_argument("--avg", type=float, default=1.0)
    p.add_argument("--taxonomy", choices=_TAXONOMIES, default="synthetic")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("pretrain", help="source-only segmentation pretraining")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--source-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--pretrain-iters", dest="pretrain_iters", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--taxonomy", choices=_TAXONOMIES, default="synthetic")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="run the adversarial adaptation")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--source-dir", required=True)
    p.add_argument("--target-day-dir", required=True)
    p.add_argument("--target-night-dir", required=True)
    p.add_argument("--pairs-file", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--val-dir", help="labeled night split for periodic validation")
    p.add_argument("--pretrained", help="checkpoint from the pretrain subcommand")
    p.add_argument("--resume", help="resume an interrupted run bit-exactly")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int, help="override max_iters")
    p.add_argument("--crop", type=int)
    p.add_argument("--save-interval", dest="save_interval", type=int)
    p.add_argument("--taxonomy", choices=_TAXONOMIES, default="synthetic")
    p.add_argument("--no-relight", action="store_true",
                   help="ablation: bypass the relighting network")
    p.add_argument("--no-light-loss", action="store_true",
                   help="ablation: keep relighting but drop its loss")
    p.add_argument("--static-loss", choices=("paper", "ce", "focal", "none"),
                   help="ablation: pseudo-supervision loss variant")
    p.add_argument("--no-reweight", action="store_true",
                   help="ablation: uniform weights for pseudo labels")
    p.add_argument("--no-pretrain", action="store_true",
                   help="ablation: ignore --pretrained and start from scratch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="labeled dataset root")
    p.add_argument("--std", type=float, default=0.16,
                   help="re-weighting std at inference; 0 disables re-weighting")
    p.add_argument("--out", help="directory for metrics.json and predictions")
    p.add_argument("--sweep", help="comma-separated std values for sweep.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("relight", help="export relighted 8-bit images")
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_relight)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or argparse usage error
        return int(exc.code or 0)
    _setup_logging()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"nightadapt: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, NotADirectoryError, ValueError, OSError) as exc:
        print(f"nightadapt: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
