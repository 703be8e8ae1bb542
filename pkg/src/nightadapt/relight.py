"""Residual image relighting network and its three-part light loss.

The network predicts a 3-channel residual that is added to the input, so
zero-initializing the final layer makes it start as an exact identity.
Outputs are intentionally not clamped to [0, 1] during training; clamping
happens only when images are exported to disk.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ShapeError

EXPOSURE_PATCH = 32

# stabilizers of the structural-similarity index on a dynamic range of 1
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _batch_norm(channels):
    # normalize with the current batch statistics in every mode: inputs from
    # three domains with very different intensity statistics share this net,
    # so running averages would fit none of them
    return nn.BatchNorm2d(channels, track_running_stats=False)


def _conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        _batch_norm(cout),
        nn.ReLU(inplace=True),
    )


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = _batch_norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = _batch_norm(channels)

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)), inplace=True)
        y = self.bn2(self.conv2(y))
        return F.relu(x + y, inplace=True)


class RelightNet(nn.Module):
    """Four conv layers, three residual blocks, two transposed convs.

    Every convolution is followed by batch normalization except the final
    residual-producing layer, which is zero-initialized by default so the
    network starts as the identity mapping.
    """

    MIN_SIZE = 8

    def __init__(self, base_channels=64, zero_init_final=True):
        super().__init__()
        c1, c2, c3 = base_channels // 4, base_channels // 2, base_channels
        self.encoder = nn.Sequential(
            _conv_bn_relu(3, c1, stride=1),
            _conv_bn_relu(c1, c2, stride=2),
            _conv_bn_relu(c2, c3, stride=2),
            _conv_bn_relu(c3, c3, stride=1),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(c3) for _ in range(3)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(c3, c2, 4, stride=2, padding=1, bias=False),
            _batch_norm(c2),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1, bias=False),
            _batch_norm(c1),
            nn.ReLU(inplace=True),
        )
        self.final = nn.Conv2d(c1, 3, 3, padding=1)
        if zero_init_final:
            nn.init.zeros_(self.final.weight)
            nn.init.zeros_(self.final.bias)

    def forward(self, x):
        _check_image(x, "relighting input")
        h, w = x.shape[-2:]
        if h < self.MIN_SIZE or w < self.MIN_SIZE or h % 4 or w % 4:
            raise ShapeError(
                f"relighting input {h}x{w} must be >= {self.MIN_SIZE} and divisible by 4")
        y = self.encoder(x)
        y = self.blocks(y)
        y = self.decoder(y)
        return x + self.final(y)


def _check_image(x, what):
    if x.dim() != 4:
        raise ShapeError(f"{what} must be 4D (B, C, H, W), got {tuple(x.shape)}")


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def tv_loss(original, relit):
    """Mean squared forward differences of the residual image (original - relit).

    The sum runs over all valid neighbour pairs in x and y and is divided
    by the total element count of the input.
    """
    _check_image(original, "tv_loss input")
    _check_same_shape(original, relit)
    d = original - relit
    dx = d[..., :, 1:] - d[..., :, :-1]
    dy = d[..., 1:, :] - d[..., :-1, :]
    return (dx.pow(2).sum() + dy.pow(2).sum()) / d.numel()


def exposure_loss(relit, level):
    """Mean absolute deviation of 32x32-pooled channel intensities from `level`."""
    _check_image(relit, "exposure_loss input")
    h, w = relit.shape[-2:]
    if h % EXPOSURE_PATCH or w % EXPOSURE_PATCH:
        raise ShapeError(
            f"exposure_loss input {h}x{w} not divisible by {EXPOSURE_PATCH}")
    pooled = F.avg_pool2d(relit, EXPOSURE_PATCH)
    return (pooled - level).abs().mean()


def ssim_loss(original, relit):
    """Half of one minus the mean structural similarity over 3x3 windows.

    Window statistics use valid positions only (no padding); the value
    always lies in [0, 1] and is 0 exactly when the two images agree.
    """
    _check_image(original, "ssim_loss input")
    _check_same_shape(original, relit)
    h, w = original.shape[-2:]
    if h < 3 or w < 3:
        raise ShapeError(f"ssim_loss needs at least 3x3 inputs, got {h}x{w}")
    mu_x = F.avg_pool2d(original, 3, stride=1)
    mu_y = F.avg_pool2d(relit, 3, stride=1)
    var_x = F.avg_pool2d(original * original, 3, stride=1) - mu_x * mu_x
    var_y = F.avg_pool2d(relit * relit, 3, stride=1) - mu_y * mu_y
    cov = F.avg_pool2d(original * relit, 3, stride=1) - mu_x * mu_y
    num = (2 * mu_x * mu_y + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
    ssim = num / den
    return ((1 - ssim) / 2).mean()


@dataclass
class LightLossTerms:
    """The three light-loss components and their weighted combination."""

    tv: torch.Tensor
    exposure: torch.Tensor
    ssim: torch.Tensor
    total: torch.Tensor


def light_loss(original, relit, level, weights=(10.0, 1.0, 1.0)) -> LightLossTerms:
    """Combine the smoothness, exposure and structure terms.

    `weights` are (alpha_tv, alpha_exp, alpha_ssim); the defaults are the
    values used for every experiment.
    """
    a_tv, a_exp, a_ssim = weights
    l_tv = tv_loss(original, relit)
    l_exp = exposure_loss(relit, level)
    l_ssim = ssim_loss(original, relit)
    total = a_tv * l_tv + a_exp * l_exp + a_ssim * l_ssim
    return LightLossTerms(tv=l_tv, exposure=l_exp, ssim=l_ssim, total=total)


def to_export_image(x):
    """Clamp a (3, H, W) or (B, 3, H, W) float image to [0, 1] and scale to uint8."""
    arr = (x.detach().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    return arr
