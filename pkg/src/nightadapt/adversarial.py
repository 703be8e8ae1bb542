"""Output-space discriminators and the least-squares adversarial losses.

Two discriminators with identical structure but separate weights judge
whether a softmax prediction map comes from the source domain or from the
day / night target domain respectively.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .core import ShapeError


class Discriminator(nn.Module):
    """Five 4x4 convolutions with channels {64, 128, 256, 256, 1}.

    Stride 2 for the first two layers, 1 for the rest, padding 1
    everywhere, leaky slope 0.2 between layers. Consumes a (B, K, H, W)
    probability map and emits a (B, 1, h, w) score grid.
    """

    MIN_SIZE = 16

    def __init__(self, in_channels):
        super().__init__()
        self.in_channels = in_channels
        channels = (64, 128, 256, 256, 1)
        strides = (2, 2, 1, 1, 1)
        layers = []
        cin = in_channels
        for i, (cout, stride) in enumerate(zip(channels, strides)):
            layers.append(nn.Conv2d(cin, cout, 4, stride=stride, padding=1))
            if i < len(channels) - 1:
                layers.append(nn.LeakyReLU(0.2, inplace=True))
            cin = cout
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"discriminator expects (B, {self.in_channels}, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h < self.MIN_SIZE or w < self.MIN_SIZE:
            raise ShapeError(f"discriminator input {h}x{w} below minimum {self.MIN_SIZE}")
        return self.layers(x)


def disc_output_size(size):
    """Spatial size of the score grid for a square input of the given size."""
    for stride in (2, 2, 1, 1, 1):
        size = (size + 2 - 4) // stride + 1
    return size


def gen_adv_loss(day_scores, night_scores, real_label=1.0):
    """Push both target-domain score grids toward the source label."""
    return ((day_scores - real_label) ** 2).mean() + \
           ((night_scores - real_label) ** 2).mean()


def disc_loss(source_scores, target_scores, real_label=1.0, fake_label=0.0):
    """Least-squares discriminator objective over detached predictions."""
    return 0.5 * ((source_scores - real_label) ** 2).mean() + \
           0.5 * ((target_scores - fake_label) ** 2).mean()
