"""Multi-scale degradation injection network.

A 5-scale U-Net predicting an image residual. The latent degradation map
enters at the coarsest scale and is repeatedly upsampled (nearest-neighbour
then conv, which avoids checkerboard artifacts); at each scale it modulates
the skip-connection features with predicted per-pixel scale and bias.
Generators stack two of these nets; reblurring and deblurring generators
share the architecture but never parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, replace, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import DimensionError

INJECTION_MODES = ("sam", "concat", "none")
INJECTION_SCALES = ("all", "coarsest_only")


@dataclass
class MSDINetConfig:
    scales: int = 5
    base_channels: int = 16
    channel_cap: int = 128
    stack_depth: int = 2
    injection_mode: str = "sam"
    injection_scales: str = "all"
    degradation_channels: int = 32
    input_concat: bool = False
    inject_into_all_stacked: bool = True

    def __post_init__(self):
        if self.scales != 5:
            raise ValueError("the generator is fixed at 5 scales")
        if self.stack_depth < 1:
            raise ValueError("stack_depth must be >= 1")
        if self.injection_mode not in INJECTION_MODES:
            raise ValueError(f"injection_mode must be one of {INJECTION_MODES}")
        if self.injection_scales not in INJECTION_SCALES:
            raise ValueError(f"injection_scales must be one of {INJECTION_SCALES}")
        if self.input_concat and self.injection_mode != "none":
            raise ValueError("input_concat replaces skip injection; set injection_mode='none'")

    def width(self, scale: int) -> int:
        # scale 1 = full resolution ... scale 5 = 1/16 latent resolution
        return min(self.base_channels * 2 ** (scale - 1), self.channel_cap)

    def deg_width(self, scale: int) -> int:
        return min(self.degradation_channels, self.width(scale))

    def uses_degradation(self) -> bool:
        return self.injection_mode != "none" or self.input_concat

    def injected_scales(self) -> tuple:
        if self.injection_mode == "none":
            return ()
        if self.injection_scales == "coarsest_only":
            return (5,)
        return (1, 2, 3, 4, 5)

    def as_dict(self) -> dict:
        return asdict(self)


def conv_block(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
    )


class DegradationUpsampler(nn.Module):
    """Nearest-neighbour x2 followed by a 3x3 conv; doubles spatial dims."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, m):
        return self.conv(F.interpolate(m, scale_factor=2, mode="nearest"))


class FeatureUpsampler(nn.Module):
    """Decoder upsampling with the same anti-checkerboard rule."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class SpatialModulation(nn.Module):
    """Predict per-pixel scale/bias from the degradation map and apply
    F = gamma * f + beta to the skip features."""

    def __init__(self, feat_ch, deg_ch, hidden=None):
        super().__init__()
        hidden = hidden or deg_ch
        self.trunk = nn.Sequential(
            nn.Conv2d(deg_ch, hidden, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.to_gamma = nn.Conv2d(hidden, feat_ch, 3, padding=1)
        self.to_beta = nn.Conv2d(hidden, feat_ch, 3, padding=1)

    def params(self, m):
        shared = self.trunk(m)
        return self.to_gamma(shared), self.to_beta(shared)

    def forward(self, f, m):
        if f.shape[-2:] != m.shape[-2:]:
            raise DimensionError(
                f"skip {tuple(f.shape[-2:])} vs degradation map {tuple(m.shape[-2:])}"
            )
        gamma, beta = self.params(m)
        return gamma * f + beta


class ConcatInjection(nn.Module):
    """Ablation variant: concatenate the degradation map with the skip
    features, then fuse with a two-layer residual block."""

    def __init__(self, feat_ch, deg_ch):
        super().__init__()
        self.fuse = nn.Conv2d(feat_ch + deg_ch, feat_ch, 3, padding=1)
        self.res = nn.Sequential(
            nn.Conv2d(feat_ch, feat_ch, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(feat_ch, feat_ch, 3, padding=1),
        )

    def forward(self, f, m):
        if f.shape[-2:] != m.shape[-2:]:
            raise DimensionError(
                f"skip {tuple(f.shape[-2:])} vs degradation map {tuple(m.shape[-2:])}"
            )
        fused = self.fuse(torch.cat([f, m], dim=1))
        return fused + self.res(fused)


class MSDINet(nn.Module):
    """One U-Net predicting an unbounded image residual."""

    def __init__(self, config: MSDINetConfig):
        super().__init__()
        self.config = config
        w = [config.width(i) for i in range(1, 6)]

        in_ch = 3
        if config.input_concat:
            in_ch += config.deg_width(1)
            ups = []
            for scale in (5, 4, 3, 2):
                ups.append(DegradationUpsampler(
                    config.deg_width(scale), config.deg_width(scale - 1)))
            self.input_deg_proj = nn.Conv2d(
                config.degradation_channels, config.deg_width(5), 3, padding=1)
            self.input_deg_ups = nn.ModuleList(ups)

        self.enc_blocks = nn.ModuleList([
            conv_block(in_ch, w[0]),
            conv_block(w[0], w[1]),
            conv_block(w[1], w[2]),
            conv_block(w[2], w[3]),
            conv_block(w[3], w[4]),
        ])
        self.downs = nn.ModuleList([
            nn.Conv2d(w[i], w[i], 3, stride=2, padding=1) for i in range(4)
        ])

        injected = config.injected_scales()
        if injected:
            self.deg_proj = nn.Conv2d(
                config.degradation_channels, config.deg_width(5), 3, padding=1)
            # upsamplers from scale s+1 down to the finest injected scale
            finest = min(injected)
            self.deg_ups = nn.ModuleDict({
                str(s): DegradationUpsampler(config.deg_width(s + 1),
                                             config.deg_width(s))
                for s in range(4, finest - 1, -1)
            })
            inject_cls = SpatialModulation if config.injection_mode == "sam" \
                else ConcatInjection
            self.injections = nn.ModuleDict({
                str(s): inject_cls(w[s - 1], config.deg_width(s)) for s in injected
            })

        self.dec_blocks = nn.ModuleList([
            conv_block(w[4], w[4]),                 # scale 5
            conv_block(w[3] + w[3], w[3]),          # scale 4 (upsampled + skip)
            conv_block(w[2] + w[2], w[2]),
            conv_block(w[1] + w[1], w[1]),
            conv_block(w[0] + w[0], w[0]),
        ])
        self.dec_ups = nn.ModuleList([
            FeatureUpsampler(w[4], w[3]),
            FeatureUpsampler(w[3], w[2]),
            FeatureUpsampler(w[2], w[1]),
            FeatureUpsampler(w[1], w[0]),
        ])
        self.head = nn.Conv2d(w[0], 3, 3, padding=1)

    def _deg_pyramid(self, deg):
        """Maps keyed by scale, coarsest (5) first, for the injected scales."""
        injected = self.config.injected_scales()
        finest = min(injected)
        maps = {5: self.deg_proj(deg)}
        for s in range(4, finest - 1, -1):
            maps[s] = self.deg_ups[str(s)](maps[s + 1])
        return maps

    def forward(self, x, deg=None):
        cfg = self.config
        h, w_in = x.shape[-2:]
        if h % 16 or w_in % 16:
            raise DimensionError(f"input {h}x{w_in} not divisible by 16")
        needs_deg = cfg.uses_degradation()
        if needs_deg:
            if deg is None:
                raise ValueError("this configuration requires a degradation map")
            if deg.shape[-2:] != (h // 16, w_in // 16):
                raise DimensionError(
                    f"degradation map {tuple(deg.shape[-2:])} != input/16 "
                    f"({h // 16}x{w_in // 16})"
                )

        if cfg.input_concat:
            m = self.input_deg_proj(deg)
            for up in self.input_deg_ups:
                m = up(m)
            x = torch.cat([x, m], dim=1)

        skips = []
        feat = x
        for i, block in enumerate(self.enc_blocks):
            feat = block(feat)
            skips.append(feat)
            if i < 4:
                feat = self.downs[i](feat)

        injected = cfg.injected_scales()
        if injected and not cfg.input_concat:
            maps = self._deg_pyramid(deg)
            for s in injected:
                skips[s - 1] = self.injections[str(s)](skips[s - 1], maps[s])

        d = self.dec_blocks[0](skips[4])
        for i, scale in enumerate((4, 3, 2, 1)):
            up = self.dec_ups[i](d)
            d = self.dec_blocks[i + 1](torch.cat([up, skips[scale - 1]], dim=1))
        return self.head(d)


class Generator(nn.Module):
    """Two MSDI-Nets in sequence; each adds its predicted residual and the
    second one re-reads the first one's output image."""

    def __init__(self, config: MSDINetConfig):
        super().__init__()
        self.config = config
        configs = [config]
        for _ in range(config.stack_depth - 1):
            if config.inject_into_all_stacked:
                configs.append(config)
            else:
                configs.append(replace(config, injection_mode="none",
                                       input_concat=False))
        self.nets = nn.ModuleList(MSDINet(c) for c in configs)

    def forward(self, x, deg=None):
        """Return the per-stage output images, finest supervision last."""
        outputs = []
        cur = x
        for net in self.nets:
            cur = cur + net(cur, deg if net.config.uses_degradation() else None)
            outputs.append(cur)
        return outputs


def _to_tensor(img_or_tensor):
    if hasattr(img_or_tensor, "tensor"):
        return img_or_tensor.tensor().unsqueeze(0), True
    t = img_or_tensor
    if t.dim() == 3:
        return t.unsqueeze(0), True
    return t, False


def _deg_tensor(deg):
    if deg is None:
        return None
    t = deg if torch.is_tensor(deg) else deg.data  # DegradationMap or tensor
    return t.unsqueeze(0) if t.dim() == 3 else t


def forward_residual(net: MSDINet, img_or_tensor, deg=None):
    """Residual prediction of a single net; shape mirrors the input."""
    x, squeezed = _to_tensor(img_or_tensor)
    res = net(x, _deg_tensor(deg))
    return res[0] if squeezed else res


def _run_stack(gen: Generator, img_or_tensor, deg):
    from .imaging import Image

    d = _deg_tensor(deg)
    if hasattr(img_or_tensor, "tensor"):
        with torch.no_grad():
            outs = gen(img_or_tensor.tensor().unsqueeze(0), d)
        return [Image.from_tensor(o[0].clamp(0.0, 1.0)) for o in outs]
    return gen(img_or_tensor, d)


def reblur(reblur_gen: Generator, sharp, deg):
    """All stacked outputs of the reblurring generator; last entry is the
    final reblurred image. Image inputs give clamped Images back."""
    return _run_stack(reblur_gen, sharp, deg)


def deblur(deblur_gen: Generator, blurry, deg):
    """Symmetric to reblur, for the deblurring generator."""
    return _run_stack(deblur_gen, blurry, deg)
