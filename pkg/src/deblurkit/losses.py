"""Training objectives: L1, perceptual, PSNR-based, blur-aware, and the
stage-wise compositions.

The perceptual/contextual feature extractor is a frozen conv pyramid with
seeded random weights: deterministic, dependency-free, and documented as an
approximation of a pre-trained backbone. ``set_pretrained_weights`` accepts
externally supplied parameters for users who want one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adversarial import discriminate, hinge_d_loss, hinge_g_loss
from .exceptions import DimensionError

EXTRACTOR_WIDTHS = (8, 16, 32, 64, 64)
EXTRACTOR_STRIDES = (1, 2, 2, 2, 2)


@dataclass
class LossWeights:
    lambda1: float = 30.0   # perceptual weight inside the reblurring objective
    lambda2: float = 10.0   # L1 weight on the deblurring branch (joint stage)
    lambda3: float = 1.0    # blur-aware weight (encoder-frozen stage)

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be >= 0")


class FrozenFeatureExtractor(nn.Module):
    """Five conv stages (strides 1,2,2,2,2) with fixed seeded parameters."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        convs = []
        in_ch = 3
        for width, stride in zip(EXTRACTOR_WIDTHS, EXTRACTOR_STRIDES):
            conv = nn.Conv2d(in_ch, width, 3, stride=stride, padding=1)
            std = (2.0 / (in_ch * 9)) ** 0.5
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.01)
            convs.append(conv)
            in_ch = width
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def set_pretrained_weights(self, state_dict):
        """Swap in externally trained conv weights (same topology)."""
        self.load_state_dict(state_dict)
        for p in self.parameters():
            p.requires_grad_(False)

    def stage_features(self, x):
        feats = []
        out = x
        for conv in self.convs:
            out = F.leaky_relu(conv(out), 0.2)
            feats.append(out)
        return feats

    def forward(self, x):
        return self.stage_features(x)


_DEFAULT_EXTRACTOR = {}


def default_feature_extractor(seed: int = 0) -> FrozenFeatureExtractor:
    if seed not in _DEFAULT_EXTRACTOR:
        _DEFAULT_EXTRACTOR[seed] = FrozenFeatureExtractor(seed)
    return _DEFAULT_EXTRACTOR[seed]


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(a, b):
    _check_same_shape(a, b)
    return (a - b).abs().mean()


def perceptual_loss(a, b, extractor: FrozenFeatureExtractor):
    """Sum over stages of the mean L1 distance between activations."""
    _check_same_shape(a, b)
    fa = extractor.stage_features(a)
    fb = extractor.stage_features(b)
    return sum((x - y).abs().mean() for x, y in zip(fa, fb))


def psnr_loss(target, estimate, mse_floor: float = 1e-10):
    """Negated PSNR (dB); identical inputs sit at the -100 dB floor cap."""
    _check_same_shape(target, estimate)
    mse = ((target - estimate) ** 2).mean()
    return 10.0 * torch.log10(torch.clamp(mse, min=mse_floor))


def blur_aware_loss(encoder, estimate, target):
    """Per-layer L1 distance between degradation-encoder activations of the
    estimate and the ground truth, each normalized by the layer's pixel
    count. Gradients reach the estimate only."""
    _check_same_shape(estimate, target)
    est = estimate if estimate.dim() == 4 else estimate.unsqueeze(0)
    tgt = target if target.dim() == 4 else target.unsqueeze(0)
    feats_est, _ = encoder(est)
    with torch.no_grad():
        feats_tgt, _ = encoder(tgt)
    total = est.new_zeros(())
    for fe, ft in zip(feats_est, feats_tgt):
        pixels = fe.shape[-2] * fe.shape[-1]
        per_sample = (fe - ft).abs().sum(dim=(1, 2, 3)) / pixels
        total = total + per_sample.mean()
    return total


@dataclass
class ModelBundle:
    encoder: nn.Module
    reblur_gen: nn.Module
    deblur_gen: nn.Module
    discriminator: nn.Module | None = None
    extractor: FrozenFeatureExtractor | None = None


@dataclass
class Stage1Report:
    g_total: torch.Tensor
    d_loss: torch.Tensor
    deblur: torch.Tensor
    g_adv: torch.Tensor
    perceptual: torch.Tensor
    reblurred: list = field(default_factory=list)
    deblurred: list = field(default_factory=list)


def stage1_objective(batch, models: ModelBundle, weights: LossWeights,
                     use_reblur: bool = True) -> Stage1Report:
    """Joint objective: hinge-adversarial + weighted perceptual loss on the
    reblurred image, plus the weighted L1 deblurring term.

    Image losses supervise every stacked output (equal weights); the
    adversarial term scores the final output only. The discriminator loss is
    computed against the detached reblur so it can drive its own update.
    """
    x, y = batch
    use_deg = models.reblur_gen.config.uses_degradation() or \
        models.deblur_gen.config.uses_degradation()
    deg = None
    if use_deg:
        _, deg = models.encoder(y)

    zero = x.new_zeros(())
    g_adv = perc = d_loss = zero
    reblurred = []
    if use_reblur:
        reblurred = models.reblur_gen(x, deg)
        perc = sum(perceptual_loss(y, out, models.extractor)
                   for out in reblurred) / len(reblurred)
        fake = discriminate(models.discriminator, x, reblurred[-1])
        g_adv = hinge_g_loss(fake)
        real = discriminate(models.discriminator, x, y)
        fake_det = discriminate(models.discriminator, x, reblurred[-1].detach())
        d_loss = hinge_d_loss(real, fake_det)

    deblurred = models.deblur_gen(y, deg)
    deblur = weights.lambda2 * sum(l1_loss(x, out)
                                   for out in deblurred) / len(deblurred)
    g_total = g_adv + weights.lambda1 * perc
    return Stage1Report(g_total=g_total, d_loss=d_loss, deblur=deblur,
                        g_adv=g_adv, perceptual=perc,
                        reblurred=reblurred, deblurred=deblurred)


def stage2_objective(target, estimate, encoder, weights: LossWeights):
    """PSNR loss plus the weighted blur-aware term (encoder frozen)."""
    loss = psnr_loss(target, estimate)
    if weights.lambda3 > 0:
        loss = loss + weights.lambda3 * blur_aware_loss(encoder, estimate, target)
    return loss
