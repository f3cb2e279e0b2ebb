"""Latent-space analyses of the learned degradation representations:
interpolation sweeps, cross-image blur transfer, content/blur decoupling
tables, and percentile evaluation splits.

All operations are read-only over trained models and clamp outputs to
[0, 1] before returning or saving them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .blursynth import ImagePair
from .exceptions import DimensionError
from .imaging import Image, contextual_similarity, psnr, save_image


@torch.no_grad()
def _latent(encoder, image: Image):
    return encoder(image.tensor().unsqueeze(0))[1]


@torch.no_grad()
def _reblur_with(reblur_gen, sharp: Image, deg) -> Image:
    out = reblur_gen(sharp.tensor().unsqueeze(0), deg)[-1][0]
    return Image.from_tensor(out.clamp(0.0, 1.0), id=sharp.id)


def interpolate_degradations(sharp: Image, blurry: Image, encoder, reblur_gen,
                             alphas: list) -> list:
    """Reblur ``sharp`` under latents blended between its own representation
    (alpha=0) and the blurry image's (alpha=1)."""
    if sharp.shape != blurry.shape:
        raise DimensionError("interpolation needs a matched pair")
    deg_sharp = _latent(encoder, sharp)
    deg_blurry = _latent(encoder, blurry)
    outputs = []
    for alpha in alphas:
        if alpha == 1.0:
            deg = deg_blurry  # exact endpoint: same tensor as the plain path
        elif alpha == 0.0:
            deg = deg_sharp
        else:
            deg = (1.0 - alpha) * deg_sharp + alpha * deg_blurry
        outputs.append(_reblur_with(reblur_gen, sharp, deg))
    return outputs


def swap_reblur(sharp_a: Image, blurry_b: Image, encoder, reblur_gen) -> Image:
    """Reblur scene A under the degradation representation of blur(B)."""
    if sharp_a.shape != blurry_b.shape:
        raise DimensionError("swap needs equal-sized images")
    return _reblur_with(reblur_gen, sharp_a, _latent(encoder, blurry_b))


@dataclass
class DecouplenessReport:
    """Mean contextual-similarity statistics over all (A, B) pairings."""

    cx_blur_a_vs_a: float
    cx_swap_vs_a: float
    cx_blur_a_vs_b: float
    cx_swap_vs_b: float
    num_pairings: int
    per_pair: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "cx_blur_a_vs_a": self.cx_blur_a_vs_a,
            "cx_swap_vs_a": self.cx_swap_vs_a,
            "cx_blur_a_vs_b": self.cx_blur_a_vs_b,
            "cx_swap_vs_b": self.cx_swap_vs_b,
            "num_pairings": self.num_pairings,
        }


def decoupleness_report(test_pairs: list[ImagePair], encoder, reblur_gen,
                        extractor=None) -> DecouplenessReport:
    """Pair up the test set as (A, B) couples and measure whether transferred
    blur keeps A's content: swap results should stay close to A and far
    from B."""
    if len(test_pairs) < 2 or len(test_pairs) % 2:
        raise ValueError("decoupleness needs an even number of test pairs")
    rows = []
    for i in range(0, len(test_pairs), 2):
        a, b = test_pairs[i], test_pairs[i + 1]
        swap = swap_reblur(a.sharp, b.blurry, encoder, reblur_gen)
        rows.append({
            "cx_blur_a_vs_a": contextual_similarity(a.blurry, a.sharp, extractor),
            "cx_swap_vs_a": contextual_similarity(swap, a.sharp, extractor),
            "cx_blur_a_vs_b": contextual_similarity(a.blurry, b.sharp, extractor),
            "cx_swap_vs_b": contextual_similarity(swap, b.sharp, extractor),
        })
    means = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    return DecouplenessReport(num_pairings=len(rows), per_pair=rows, **means)


def percentile_split(test_pairs: list[ImagePair], fraction: float):
    """Rank pairs by input PSNR (ascending) and return the bottom and top
    ``fraction`` as (blurriest, sharpest) subsets."""
    if not 0.0 < fraction <= 0.5:
        raise ValueError("fraction must lie in (0, 0.5]")
    count = int(len(test_pairs) * fraction)
    if count < 1:
        raise ValueError(
            f"fraction {fraction} selects no pairs from {len(test_pairs)}")
    ranked = sorted(test_pairs, key=lambda p: psnr(p.blurry, p.sharp))
    return ranked[:count], ranked[-count:]


def contact_sheet(rows: list, path=None) -> Image:
    """Tile rows of equally sized images into one grid image (2 px gutters)."""
    if not rows or not rows[0]:
        raise ValueError("contact sheet needs at least one image")
    c, h, w = rows[0][0].shape
    gut = 2
    n_cols = max(len(r) for r in rows)
    grid = np.ones((c, len(rows) * (h + gut) - gut, n_cols * (w + gut) - gut))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            if img.shape != (c, h, w):
                raise DimensionError("contact sheet images must share a shape")
            grid[:, i * (h + gut):i * (h + gut) + h,
                 j * (w + gut):j * (w + gut) + w] = img.data
    sheet = Image(grid)
    if path is not None:
        save_image(sheet, path)
    return sheet
