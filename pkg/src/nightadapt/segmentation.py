"""Segmentation network interface, a small trainable backbone, and the
weighted cross-entropy loss for the labeled source domain."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import IGNORE_INDEX, DegenerateInputError, ShapeError


def _gn(channels):
    # group normalization: identical behaviour in train and eval mode and
    # no cross-domain statistics, which matters at batch size 2 with three
    # domains sharing the weights
    return nn.GroupNorm(4, channels)


def _conv_gn_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        _gn(cout),
        nn.ReLU(inplace=True),
    )


class _GNResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.gn1 = _gn(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.gn2 = _gn(channels)

    def forward(self, x):
        y = F.relu(self.gn1(self.conv1(x)), inplace=True)
        y = self.gn2(self.conv2(y))
        return F.relu(x + y, inplace=True)


class SegNet(nn.Module):
    """Small encoder + residual trunk predicting full-resolution class logits.

    Five convolutions (two with stride 2), three residual blocks at 1/4
    resolution, bilinear upsampling of the trunk features fused with the
    full-resolution stem features, and a 1x1 classifier. The fusion path
    exists because 1-2 pixel objects (poles, signs) vanish entirely in a
    pure 1/4-resolution head. Any resolution >= 8x8 is accepted; logits
    always match the input spatial size. The interface admits swapping in
    a larger backbone: any module mapping (B, 3, H, W) images to
    (B, K, H, W) logits works.
    """

    def __init__(self, num_classes, base_channels=64):
        super().__init__()
        c1, c2 = base_channels // 2, base_channels
        self.num_classes = num_classes
        self.stem = _conv_gn_relu(3, c1, stride=1)
        self.encoder = nn.Sequential(
            _conv_gn_relu(c1, c1, stride=2),
            _conv_gn_relu(c1, c1, stride=1),
            _conv_gn_relu(c1, c2, stride=2),
            _conv_gn_relu(c2, c2, stride=1),
        )
        self.blocks = nn.Sequential(*[_GNResidualBlock(c2) for _ in range(3)])
        # the full-resolution stem path needs enough width to carry fine
        # color evidence past the coarse context, or 3-4 px classes vanish
        self.fuse = nn.Sequential(
            _conv_gn_relu(c2 + c1, c1, stride=1),
            _conv_gn_relu(c1, c1, stride=1),
        )
        self.classifier = nn.Conv2d(c1, num_classes, 1)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"segmentation input must be (B, 3, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h < 8 or w < 8:
            raise ShapeError(f"segmentation input {h}x{w} below minimum 8x8")
        fine = self.stem(x)
        coarse = self.blocks(self.encoder(fine))
        up = F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=False)
        return self.classifier(self.fuse(torch.cat([up, fine], dim=1)))


def weighted_ce(pred, target, class_weights, ignore_index=IGNORE_INDEX,
                from_logits=True):
    """Class-weighted cross entropy, normalized by valid pixels *and* classes.

    pred: (B, K, H, W) logits (default) or probabilities; target: (B, H, W)
    integer labels. Pixels labeled `ignore_index` contribute nothing. The
    value is -1/(N*K) * sum over valid pixels of w[gt] * log p[gt], where N
    counts the valid pixels.
    """
    if pred.dim() != 4:
        raise ShapeError(f"prediction must be (B, K, H, W), got {tuple(pred.shape)}")
    if target.shape != (pred.shape[0], pred.shape[2], pred.shape[3]):
        raise ShapeError(
            f"labels {tuple(target.shape)} do not align with prediction {tuple(pred.shape)}")
    k = pred.shape[1]
    class_weights = torch.as_tensor(class_weights, dtype=pred.dtype, device=pred.device)
    if class_weights.shape != (k,):
        raise ShapeError(f"expected {k} class weights, got {tuple(class_weights.shape)}")

    valid = target != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateInputError("all pixels carry the ignore label")

    if from_logits:
        logp = F.log_softmax(pred, dim=1)
    else:
        logp = pred.clamp(min=1e-12).log()
    safe_target = torch.where(valid, target, torch.zeros_like(target))
    logp_at_gt = logp.gather(1, safe_target.unsqueeze(1).long()).squeeze(1)
    w_at_gt = class_weights[safe_target.long()]
    loss = -(w_at_gt * logp_at_gt * valid.to(pred.dtype)).sum()
    return loss / (n_valid * k)
