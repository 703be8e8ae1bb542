"""Confusion-matrix accumulation, per-class IoU / mIoU, and prediction export."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import IGNORE_INDEX, DegenerateInputError, LabelSet, ShapeError
from .checkpoint import load_checkpoint, restore_networks
from .data import DatasetIndex, load_image, load_label
from .reweight import normalize_weights, reweighted_argmax

CITYSCAPES_PALETTE = {
    "road": (128, 64, 128), "sidewalk": (244, 35, 232), "building": (70, 70, 70),
    "wall": (102, 102, 156), "fence": (190, 153, 153), "pole": (153, 153, 153),
    "traffic light": (250, 170, 30), "traffic sign": (220, 220, 0),
    "vegetation": (107, 142, 35), "terrain": (152, 251, 152), "sky": (70, 130, 180),
    "person": (220, 20, 60), "rider": (255, 0, 0), "car": (0, 0, 142),
    "truck": (0, 0, 70), "bus": (0, 60, 100), "train": (0, 80, 100),
    "motorcycle": (0, 0, 230), "bicycle": (119, 11, 32),
}


def confusion_matrix(pred, gt, num_classes, ignore_index=IGNORE_INDEX) -> np.ndarray:
    """Count (gt row, pred column) pairs over pixels with a valid ground truth."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    valid = gt != ignore_index
    flat = num_classes * gt[valid].astype(np.int64) + pred[valid].astype(np.int64)
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def iou_from_confusion(matrix):
    """Per-class IoU (NaN where a class is absent from gt and prediction) and mIoU."""
    matrix = np.asarray(matrix, dtype=np.float64)
    inter = np.diag(matrix)
    union = matrix.sum(axis=1) + matrix.sum(axis=0) - inter
    if not (union > 0).any():
        raise DegenerateInputError("no class present in ground truth or prediction")
    ious = np.full(matrix.shape[0], np.nan)
    present = union > 0
    ious[present] = inter[present] / union[present]
    return ious, float(np.nanmean(ious))


def class_colors(labels: LabelSet) -> np.ndarray:
    """(K, 3) uint8 palette keyed by class name; unknown names get hashed colors."""
    colors = np.zeros((labels.num_classes, 3), dtype=np.uint8)
    for i, name in enumerate(labels.names):
        if name in CITYSCAPES_PALETTE:
            colors[i] = CITYSCAPES_PALETTE[name]
        else:
            colors[i] = tuple(hashlib.sha1(name.encode()).digest()[:3])
    return colors


def colorize_labels(label_map, colors, ignore_index=IGNORE_INDEX) -> np.ndarray:
    label_map = np.asarray(label_map)
    out = np.zeros((*label_map.shape, 3), dtype=np.uint8)
    valid = label_map != ignore_index
    out[valid] = colors[label_map[valid]]
    return out


def predict_probs(nets, cfg, image) -> torch.Tensor:
    """Run relight + segmentation on one (3, H, W) image; softmax over classes."""
    with torch.no_grad():
        batch = image.unsqueeze(0)
        if cfg.relight_enabled:
            batch = nets["relight"](batch)
        logits = nets["seg"](batch)
        return F.softmax(logits, dim=1).squeeze(0)


def evaluate_dataset(checkpoint, index: DatasetIndex, std_test=None,
                     out_dir=None, sweep_stds=None) -> dict:
    """Full evaluation pipeline over a labeled split.

    `checkpoint` is a path or a loaded payload. Every image runs through
    relight -> segment -> softmax -> re-weighted argmax (std_test; 0 means
    uniform weights, i.e. a plain argmax) and accumulates into one
    confusion matrix. When `out_dir` is given, color-coded predictions,
    ``metrics.json`` and (with `sweep_stds`) ``sweep.csv`` are written.
    """
    if not isinstance(checkpoint, dict):
        checkpoint = load_checkpoint(checkpoint)
    cfg, labels, nets = restore_networks(checkpoint)
    for net in nets.values():
        net.eval()
    if std_test is None:
        std_test = cfg.std_test
    if not index.records:
        raise ValueError(f"evaluation split {index.split!r} has no records")

    raw = checkpoint["raw_weights"]
    cached = []
    for record in index.records:
        if record.label_path is None:
            raise ValueError(f"record {record.record_id} has no label for evaluation")
        probs = predict_probs(nets, cfg, load_image(record.image_path))
        gt = load_label(record.label_path)
        cached.append((record, probs, gt))

    def run(std):
        weights = normalize_weights(raw, std, cfg.weight_avg)
        matrix = np.zeros((labels.num_classes, labels.num_classes), dtype=np.int64)
        preds = {}
        for record, probs, gt in cached:
            pred = reweighted_argmax(probs.unsqueeze(0), weights).squeeze(0)
            matrix += confusion_matrix(pred.numpy(), gt.numpy(),
                                       labels.num_classes, labels.ignore_index)
            preds[record.record_id] = pred.numpy()
        ious, miou = iou_from_confusion(matrix)
        return matrix, ious, miou, preds

    matrix, ious, miou, preds = run(std_test)
    report = {
        "split": index.split,
        "num_images": len(index.records),
        "std": float(std_test),
        "miou": miou,
        "per_class": {name: (None if np.isnan(iou) else float(iou))
                      for name, iou in zip(labels.names, ious)},
    }
    if sweep_stds is not None:
        report["sweep"] = [
            {"std": float(s), "miou": run(s)[2]} for s in sweep_stds]

    if out_dir is not None:
        from PIL import Image

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        colors = class_colors(labels)
        for record_id, pred in preds.items():
            Image.fromarray(colorize_labels(pred, colors)).save(
                out_dir / f"pred_{record_id}.png")
        (out_dir / "metrics.json").write_text(
            json.dumps(report, sort_keys=True, indent=2))
        if sweep_stds is not None:
            lines = ["std,miou"] + [
                f"{row['std']:.10g},{row['miou']:.10g}" for row in report["sweep"]]
            (out_dir / "sweep.csv").write_text("\n".join(lines) + "\n")
    return report
