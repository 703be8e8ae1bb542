"""Class-frequency based probability re-weighting.

Rare categories receive weights above the mean so that multiplying the
per-class likelihood channels before the argmax promotes small objects.
Weights derive from -log of the class pixel proportions on the labeled
source split and are renormalized to a chosen mean and population std.
"""

from __future__ import annotations

import logging

import torch

from .core import ConfigError

log = logging.getLogger(__name__)


def clamp_absent_proportions(proportions, floor=1e-8):
    """Lift zero proportions of dataset-absent categories to a tiny floor.

    Present classes are left untouched; the perturbation of the sum stays
    far below the tolerance of raw_class_weights.
    """
    a = torch.as_tensor(proportions, dtype=torch.float64).clone()
    absent = a <= 0
    if absent.any():
        log.warning("%d categories absent from the source split; clamping "
                    "their proportion to %g", int(absent.sum()), floor)
        a[absent] = floor
    return a


def raw_class_weights(proportions):
    """-log of per-class pixel proportions; proportions must be positive and sum to 1."""
    a = torch.as_tensor(proportions, dtype=torch.float64)
    if a.dim() != 1:
        raise ConfigError(f"proportions must be a vector, got shape {tuple(a.shape)}")
    if (a <= 0).any():
        bad = int((a <= 0).nonzero()[0])
        raise ConfigError(f"class {bad} has non-positive proportion {float(a[bad])}")
    total = float(a.sum())
    if abs(total - 1.0) > 1e-6:
        raise ConfigError(f"proportions sum to {total}, expected 1")
    return -a.log()


def normalize_weights(raw, std, avg):
    """Shift raw weights to mean `avg` and population std `std`.

    A constant raw vector (or std = 0) maps every entry to `avg`.
    """
    w = torch.as_tensor(raw, dtype=torch.float64)
    if std < 0:
        raise ConfigError(f"std must be >= 0, got {std}")
    sigma = float(w.std(correction=0))
    if sigma == 0.0 or std == 0.0:
        return torch.full_like(w, float(avg))
    return (w - w.mean()) / sigma * std + avg


def reweighted_argmax(probs, weights):
    """Argmax over class channels after multiplying each by its weight.

    probs: (B, K, H, W) softmax probabilities. Ties resolve to the smallest
    class index. Returns (B, H, W) int64 labels.
    """
    w = torch.as_tensor(weights, dtype=probs.dtype, device=probs.device)
    return (probs * w.view(1, -1, 1, 1)).argmax(dim=1)
