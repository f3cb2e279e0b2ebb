"""Multi-scale conditional patch discriminator and hinge losses.

The discriminator sees the sharp image concatenated with the candidate
(real or reblurred) image; the second scale runs on a 2x average-pooled
copy. Real patches are pushed above +1, fakes below -1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import DimensionError


@dataclass
class DiscriminatorOutputs:
    """Patch realness logits, one (B, 1, h_s, w_s) map per scale."""

    scores: list = field(default_factory=list)


class PatchDiscriminator(nn.Module):
    """Three stride-2 convs, one stride-1 conv, then a 1-channel head.

    64x64 inputs give an 8x8 logit map. No normalization on the first
    layer; instance norm on the rest keeps hinge training stable. Spectral
    normalization is available but off by default.
    """

    def __init__(self, in_channels=6, ndf=32, spectral_norm=False):
        super().__init__()
        sn = nn.utils.spectral_norm if spectral_norm else (lambda m: m)
        self.body = nn.Sequential(
            sn(nn.Conv2d(in_channels, ndf, 4, stride=2, padding=1)),
            nn.LeakyReLU(0.2, inplace=True),
            sn(nn.Conv2d(ndf, ndf * 2, 4, stride=2, padding=1)),
            nn.InstanceNorm2d(ndf * 2),
            nn.LeakyReLU(0.2, inplace=True),
            sn(nn.Conv2d(ndf * 2, ndf * 4, 4, stride=2, padding=1)),
            nn.InstanceNorm2d(ndf * 4),
            nn.LeakyReLU(0.2, inplace=True),
            sn(nn.Conv2d(ndf * 4, ndf * 4, 3, stride=1, padding=1)),
            nn.InstanceNorm2d(ndf * 4),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.head = sn(nn.Conv2d(ndf * 4, 1, 3, padding=1))

    def forward(self, x):
        return self.head(self.body(x))


class MultiScaleDiscriminator(nn.Module):
    def __init__(self, in_channels=6, ndf=32, num_scales=2, spectral_norm=False):
        super().__init__()
        self.discs = nn.ModuleList(
            PatchDiscriminator(in_channels, ndf, spectral_norm)
            for _ in range(num_scales)
        )

    def forward(self, x):
        scores = []
        cur = x
        for i, disc in enumerate(self.discs):
            if i > 0:
                cur = F.avg_pool2d(cur, 2)
            scores.append(disc(cur))
        return scores


def discriminate(disc: MultiScaleDiscriminator, condition, candidate) -> DiscriminatorOutputs:
    """Score ``candidate`` conditioned on the sharp image."""
    if condition.shape != candidate.shape:
        raise DimensionError(
            f"condition {tuple(condition.shape)} vs candidate {tuple(candidate.shape)}"
        )
    return DiscriminatorOutputs(disc(torch.cat([condition, candidate], dim=1)))


def _score_list(outputs):
    return outputs.scores if isinstance(outputs, DiscriminatorOutputs) else outputs


def hinge_d_loss(real, fake):
    """-E[min(0, -1 + D_real)] - E[min(0, -1 - D_fake)], scales weighted equally."""
    real, fake = _score_list(real), _score_list(fake)
    if len(real) != len(fake):
        raise DimensionError("real/fake outputs have different scale counts")
    terms = []
    for r, f in zip(real, fake):
        terms.append(F.relu(1.0 - r).mean() + F.relu(1.0 + f).mean())
    return torch.stack(terms).mean()


def hinge_g_loss(fake):
    """-E[D_fake], scales weighted equally."""
    fake = _score_list(fake)
    return torch.stack([(-f).mean() for f in fake]).mean()
