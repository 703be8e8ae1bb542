"""Pseudo supervision of nighttime predictions by paired daytime predictions.

The day prediction, re-weighted and restricted to static object categories,
becomes a pseudo label for the aligned night image. The night prediction is
penalized through a focal-style loss whose matched probability tolerates
small misalignment via a 3x3 search window.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .core import IGNORE_INDEX, DegenerateInputError, LabelSet, ShapeError
from .reweight import reweighted_argmax


def restrict_to_static(probs, static_indices):
    """Slice (B, K, H, W) probabilities down to the static category channels.

    Channels are selected, not renormalized, so values keep their meaning
    as probabilities under the full taxonomy.
    """
    idx = torch.as_tensor(static_indices, dtype=torch.long, device=probs.device)
    return probs.index_select(1, idx)


def make_pseudo_label(day_probs, weights, labels: LabelSet):
    """Re-weighted argmax of the day prediction over static categories only.

    day_probs: (B, K, H, W) softmax probabilities. Returns detached
    (B, H, W) int64 labels holding global class indices of static
    categories.
    """
    static = labels.static_indices
    sub = restrict_to_static(day_probs.detach(), static)
    w = torch.as_tensor(weights, dtype=day_probs.dtype, device=day_probs.device)
    local = reweighted_argmax(sub, w[list(static)])
    lut = torch.as_tensor(static, dtype=torch.long, device=day_probs.device)
    return lut[local]


def _subspace_index(pseudo, static_indices, ignore_index):
    """Map global pseudo labels to positions within the static channel slice."""
    lut = torch.full((max(max(static_indices), ignore_index) + 1,), -1,
                     dtype=torch.long, device=pseudo.device)
    lut[torch.as_tensor(static_indices, device=pseudo.device)] = torch.arange(
        len(static_indices), device=pseudo.device)
    sub = lut[pseudo.long()]
    return sub, sub >= 0


def local_match_prob(night_static_probs, pseudo, static_indices,
                     ignore_index=IGNORE_INDEX):
    """Best probability the night prediction gives to any pseudo class near i.

    For each pixel the value is the maximum, over static categories present
    in the 3x3 pseudo-label window centered there, of the night probability
    for that category *at* the pixel. Windows are truncated at borders.
    Returns a (B, H, W) grid; pixels whose window holds no valid pseudo
    label get 0.
    """
    b, s, h, w = night_static_probs.shape
    if pseudo.shape != (b, h, w):
        raise ShapeError(
            f"pseudo labels {tuple(pseudo.shape)} do not align with {tuple(night_static_probs.shape)}")
    sub, valid = _subspace_index(pseudo, static_indices, ignore_index)
    onehot = torch.zeros((b, s, h, w), dtype=night_static_probs.dtype,
                         device=night_static_probs.device)
    onehot.scatter_(1, sub.clamp(min=0).unsqueeze(1), valid.to(onehot.dtype).unsqueeze(1))
    # zero padding leaves absent classes absent, matching truncated windows
    present = F.max_pool2d(onehot, 3, stride=1, padding=1).detach()
    return (present * night_static_probs).amax(dim=1)


def static_loss(night_static_probs, pseudo, static_indices, gamma=1.0,
                ignore_index=IGNORE_INDEX, modulation="pseudo"):
    """Focal-modulated negative log of the locally matched night probability.

    With `modulation='pseudo'` the focal factor is (1 - q)^gamma where q is
    the night probability of the pixel's own pseudo class; 'matched' uses
    the window-matched probability instead.
    """
    if modulation not in ("pseudo", "matched"):
        raise ValueError(f"modulation must be 'pseudo' or 'matched', got {modulation!r}")
    sub, valid = _subspace_index(pseudo, static_indices, ignore_index)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateInputError("no valid pseudo-labeled pixels")
    p = local_match_prob(night_static_probs, pseudo, static_indices, ignore_index)
    q = night_static_probs.gather(1, sub.clamp(min=0).unsqueeze(1)).squeeze(1)
    mod = (1 - (q if modulation == "pseudo" else p)) ** gamma
    losses = -mod * p.clamp(min=1e-12).log()
    return (losses * valid.to(losses.dtype)).sum() / n_valid


def static_loss_ce(night_static_probs, pseudo, static_indices,
                   ignore_index=IGNORE_INDEX):
    """Plain cross entropy against the pseudo class at each pixel (no window)."""
    sub, valid = _subspace_index(pseudo, static_indices, ignore_index)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateInputError("no valid pseudo-labeled pixels")
    q = night_static_probs.gather(1, sub.clamp(min=0).unsqueeze(1)).squeeze(1)
    losses = -q.clamp(min=1e-12).log()
    return (losses * valid.to(losses.dtype)).sum() / n_valid


def static_loss_focal(night_static_probs, pseudo, static_indices, gamma=1.0,
                      ignore_index=IGNORE_INDEX):
    """Standard focal loss against the pseudo class at each pixel (no window)."""
    sub, valid = _subspace_index(pseudo, static_indices, ignore_index)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateInputError("no valid pseudo-labeled pixels")
    q = night_static_probs.gather(1, sub.clamp(min=0).unsqueeze(1)).squeeze(1)
    losses = -((1 - q) ** gamma) * q.clamp(min=1e-12).log()
    return (losses * valid.to(losses.dtype)).sum() / n_valid
