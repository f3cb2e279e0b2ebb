"""Degradation encoder: blurry image -> multi-channel latent map at 1/16
resolution, with intermediate activations exposed for the blur-aware loss.

No normalization layers: the representation stays sensitive to absolute
blur energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .exceptions import DimensionError


@dataclass
class EncoderConfig:
    in_channels: int = 3
    widths: tuple = (16, 32, 64, 64)
    latent_channels: int = 32

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if len(self.widths) != 4:
            raise ValueError("encoder needs exactly 4 stride-2 stages")


@dataclass
class DegradationMap:
    """Latent blur map, (C_d, H/16, W/16) for a (H, W) source image."""

    data: torch.Tensor
    source_shape: tuple

    def __post_init__(self):
        h, w = self.source_shape
        if self.data.shape[-2:] != (h // 16, w // 16):
            raise DimensionError(
                f"latent {tuple(self.data.shape[-2:])} != source {h}x{w} / 16"
            )


@dataclass
class EncoderFeatures:
    """Per-stage activations; layer i (1-based) has spatial size H/2^i."""

    layers: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.layers) != 4:
            raise ValueError("expected 4 encoder layers")


class DegradationEncoder(nn.Module):
    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config or EncoderConfig()
        blocks = []
        in_ch = self.config.in_channels
        for width in self.config.widths:
            blocks.append(nn.Sequential(
                nn.Conv2d(in_ch, width, 3, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
                nn.Conv2d(width, width, 3, stride=1, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
            ))
            in_ch = width
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(in_ch, self.config.latent_channels, 1)

    def forward(self, x):
        """Return (list of 4 stage activations, latent map); single pass."""
        feats = []
        out = x
        for block in self.blocks:
            out = block(out)
            feats.append(out)
        return feats, self.head(out)


def _as_batch(img_or_batch) -> tuple[torch.Tensor, bool]:
    if hasattr(img_or_batch, "tensor"):  # Image
        return img_or_batch.tensor().unsqueeze(0), True
    t = img_or_batch
    if t.dim() == 3:
        return t.unsqueeze(0), True
    return t, False


def encode(encoder: DegradationEncoder, img_or_batch) -> DegradationMap:
    """Latent degradation map of a blurry image (or batch)."""
    x, squeezed = _as_batch(img_or_batch)
    h, w = x.shape[-2:]
    if h % 16 or w % 16:
        raise DimensionError(f"input {h}x{w} not divisible by 16")
    _, latent = encoder(x)
    if squeezed:
        latent = latent[0]
    return DegradationMap(latent, (h, w))


def encode_features(encoder: DegradationEncoder, img_or_batch) -> EncoderFeatures:
    """All 4 intermediate activations from the same forward pass as encode."""
    x, squeezed = _as_batch(img_or_batch)
    h, w = x.shape[-2:]
    if h % 16 or w % 16:
        raise DimensionError(f"input {h}x{w} not divisible by 16")
    feats, _ = encoder(x)
    if squeezed:
        feats = [f[0] for f in feats]
    return EncoderFeatures(list(feats))


def freeze(encoder: DegradationEncoder) -> DegradationEncoder:
    """Exclude parameters from optimization while keeping the module
    differentiable w.r.t. its inputs."""
    for p in encoder.parameters():
        p.requires_grad_(False)
    encoder.eval()
    return encoder


def parameter_checksum(module: nn.Module) -> float:
    """Cheap change detector over all parameters."""
    with torch.no_grad():
        return float(sum(p.double().abs().sum() for p in module.parameters()))
