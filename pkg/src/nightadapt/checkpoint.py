"""Single-archive checkpointing of all networks, optimizer and RNG state."""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path

import torch

from .adversarial import Discriminator
from .core import Config, LabelSet, validate_config
from .relight import RelightNet
from .segmentation import SegNet

FORMAT_VERSION = 1


def build_networks(cfg: Config, num_classes: int):
    """Instantiate the generator halves and both discriminators."""
    relight = RelightNet(base_channels=cfg.relight_channels)
    seg = SegNet(num_classes, base_channels=cfg.seg_channels)
    disc_day = Discriminator(num_classes)
    disc_night = Discriminator(num_classes)
    return relight, seg, disc_day, disc_night


def labels_to_dict(labels: LabelSet) -> dict:
    return {"names": list(labels.names),
            "static_mask": list(labels.static_mask),
            "ignore_index": labels.ignore_index}


def labels_from_dict(d: dict) -> LabelSet:
    return LabelSet(names=tuple(d["names"]),
                    static_mask=tuple(bool(b) for b in d["static_mask"]),
                    ignore_index=int(d["ignore_index"]))


def save_checkpoint(path, *, stage, iteration, cfg, labels, raw_weights,
                    nets, optimizers=None, rng=None, cyclers=None):
    """Atomically write one archive holding the entire training state."""
    payload = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "iteration": int(iteration),
        "config": dataclasses.asdict(cfg),
        "labels": labels_to_dict(labels),
        "raw_weights": torch.as_tensor(raw_weights, dtype=torch.float64),
        "nets": {name: net.state_dict() for name, net in nets.items()},
        "optimizers": ({name: opt.state_dict() for name, opt in optimizers.items()}
                       if optimizers else None),
        "rng": rng,
        "cyclers": cyclers,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version!r} in {path}")
    return payload


def config_from_checkpoint(payload: dict) -> Config:
    raw = dict(payload["config"])
    for key in ("scale_source", "scale_target"):
        raw[key] = tuple(raw[key])
    return validate_config(Config(**raw))


def restore_networks(payload: dict):
    """Rebuild all four networks from a loaded checkpoint payload."""
    cfg = config_from_checkpoint(payload)
    labels = labels_from_dict(payload["labels"])
    relight, seg, disc_day, disc_night = build_networks(cfg, labels.num_classes)
    nets = {"relight": relight, "seg": seg,
            "disc_day": disc_day, "disc_night": disc_night}
    for name, net in nets.items():
        net.load_state_dict(payload["nets"][name])
    return cfg, labels, nets
