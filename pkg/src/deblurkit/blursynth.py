"""Synthetic spatially varying blur: motion fields, line-integral blurring,
procedural sharp textures, and the dataset pipeline (crop, augment, batch).

Everything here is numpy + a seed; dataset bytes are a pure function of the
config so parallel workers can regenerate any pair from (seed, index).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import gaussian_filter

from .exceptions import DimensionError
from .imaging import Image, save_image, load_image


@dataclass
class MotionField:
    """Per-pixel blur trajectory, vectors (2, H, W) = (row, col) displacement."""

    vectors: np.ndarray
    max_magnitude: float

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] != 2:
            raise DimensionError(f"expected (2, H, W) field, got {v.shape}")
        self.vectors = v

    @property
    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.vectors[0] ** 2 + self.vectors[1] ** 2)

    def crop(self, top: int, left: int, h: int, w: int) -> "MotionField":
        return MotionField(self.vectors[:, top:top + h, left:left + w].copy(),
                           self.max_magnitude)


@dataclass
class ImagePair:
    sharp: Image
    blurry: Image
    field: MotionField | None = None
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.sharp.shape != self.blurry.shape:
            raise DimensionError(
                f"sharp/blurry shape mismatch: {self.sharp.shape} vs {self.blurry.shape}"
            )
        if not 0.0 <= self.noise_sigma <= 0.02:
            raise ValueError(f"noise_sigma {self.noise_sigma} outside [0, 0.02]")

    @property
    def id(self) -> str | None:
        return self.sharp.id


@dataclass
class DatasetConfig:
    num_pairs: int = 8
    patch_size: int = 64
    seed: int = 0
    max_magnitude: float = 8.0
    max_segments: int = 4
    augment: bool = True
    noise_max: float = 0.01
    # bound on |d(field component)/d(pixel)| enforced by construction
    smoothness_bound: float = 2.0
    blend_sigma: float = 5.0

    def __post_init__(self):
        if self.patch_size % 16:
            raise ValueError(f"patch_size {self.patch_size} not divisible by 16")
        if self.patch_size < 32:
            raise ValueError(f"patch_size {self.patch_size} below minimum 32")
        if self.num_pairs < 1:
            raise ValueError("num_pairs must be >= 1")
        if self.max_magnitude < 0:
            raise ValueError("max_magnitude must be >= 0")
        if not 0.0 <= self.noise_max <= 0.02:
            raise ValueError("noise_max must lie in [0, 0.02]")

    def as_dict(self) -> dict:
        return asdict(self)


def default_steps(max_magnitude: float) -> int:
    """Samples along the blur trajectory; enough that the line looks solid."""
    return max(3, int(np.ceil(2.0 * max_magnitude)) + 1)


def synthesize_motion_field(rng: np.random.Generator, h: int, w: int,
                            params: DatasetConfig) -> MotionField:
    """Piecewise-affine random motion blended with Gaussian-smoothed masks.

    1..max_segments Voronoi regions each get an affine motion model; the
    region masks are smoothed so the blended field stays within the
    configured gradient bound, then magnitudes are clipped.
    """
    if h < 32 or w < 32:
        raise DimensionError(f"field size {h}x{w} below minimum 32x32")
    if params.max_magnitude == 0.0:
        return MotionField(np.zeros((2, h, w)), 0.0)

    n_seg = int(rng.integers(1, params.max_segments + 1))
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    span = float(max(h, w))

    seeds = np.stack([rng.uniform(0, h, n_seg), rng.uniform(0, w, n_seg)], axis=1)
    d2 = (rows[None] - seeds[:, 0, None, None]) ** 2 \
        + (cols[None] - seeds[:, 1, None, None]) ** 2
    region = d2.argmin(axis=0)

    masks = np.zeros((n_seg, h, w))
    for k in range(n_seg):
        masks[k] = gaussian_filter((region == k).astype(np.float64),
                                   params.blend_sigma, mode="nearest")
    masks /= masks.sum(axis=0, keepdims=True)

    fld = np.zeros((2, h, w))
    for k in range(n_seg):
        base = rng.uniform(-1.0, 1.0, size=2)
        norm = np.linalg.norm(base)
        if norm > 1e-9:
            base = base / norm * rng.uniform(0.3, 1.0) * params.max_magnitude
        # small affine part so blur varies inside a region too
        jac = rng.uniform(-0.25, 0.25, size=(2, 2)) * params.max_magnitude / span
        rel_r = (rows - h / 2.0) / span
        rel_c = (cols - w / 2.0) / span
        vr = base[0] + jac[0, 0] * rel_r * span + jac[0, 1] * rel_c * span
        vc = base[1] + jac[1, 0] * rel_r * span + jac[1, 1] * rel_c * span
        fld[0] += masks[k] * vr
        fld[1] += masks[k] * vc

    mag = np.sqrt(fld[0] ** 2 + fld[1] ** 2)
    over = mag > params.max_magnitude
    if over.any():
        scale = np.where(over, params.max_magnitude / np.maximum(mag, 1e-12), 1.0)
        fld *= scale
    return MotionField(fld, params.max_magnitude)


def _bilinear_sample(channel: np.ndarray, r: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Clamp-to-edge bilinear sampling of a 2-D array at float coordinates."""
    h, w = channel.shape
    r = np.clip(r, 0.0, h - 1.0)
    c = np.clip(c, 0.0, w - 1.0)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    top = channel[r0, c0] * (1 - fc) + channel[r0, c1] * fc
    bot = channel[r1, c0] * (1 - fc) + channel[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def apply_spatially_varying_blur(sharp: Image, fld: MotionField, steps: int,
                                 noise_sigma: float = 0.0,
                                 rng: np.random.Generator | None = None) -> Image:
    """Average ``steps`` bilinear samples along p +/- field(p)*t, t in [-1/2, 1/2],
    then add Gaussian noise and clamp."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if fld.vectors.shape[1:] != (sharp.height, sharp.width):
        raise DimensionError("motion field does not match image size")
    h, w = sharp.height, sharp.width
    if not fld.vectors.any():
        out = sharp.data.copy()  # exact identity at zero magnitude
    else:
        rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
        ts = np.linspace(-0.5, 0.5, steps) if steps > 1 else np.array([0.0])
        out = np.zeros_like(sharp.data)
        for t in ts:
            r = rows + fld.vectors[0] * t
            c = cols + fld.vectors[1] * t
            for ch in range(3):
                out[ch] += _bilinear_sample(sharp.data[ch], r, c)
        out /= len(ts)
    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        out += rng.normal(0.0, noise_sigma, size=out.shape)
    return Image(np.clip(out, 0.0, 1.0), id=sharp.id)


def render_texture(rng: np.random.Generator, h: int, w: int) -> Image:
    """Procedural sharp image: smooth background + shapes + strokes + texture."""
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    base = (
        rng.uniform(0.25, 0.75)
        + rng.uniform(-0.3, 0.3) * (rows / h - 0.5)
        + rng.uniform(-0.3, 0.3) * (cols / w - 0.5)
    )
    base += 0.25 * gaussian_filter(rng.standard_normal((h, w)), max(h, w) / 8.0,
                                   mode="nearest")

    luma = base.copy()
    for _ in range(int(rng.integers(8, 16))):
        kind = rng.integers(0, 3)
        val = rng.uniform(0.3, 0.8) * (1 if rng.integers(0, 2) else -1)
        if kind == 0:  # rectangle
            r0, c0 = rng.integers(0, h - 4), rng.integers(0, w - 4)
            rh = int(rng.integers(4, max(5, h // 3)))
            cw = int(rng.integers(4, max(5, w // 3)))
            luma[r0:r0 + rh, c0:c0 + cw] += val
        elif kind == 1:  # disk
            cr, cc = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(3, max(4, min(h, w) / 5))
            luma += val * ((rows - cr) ** 2 + (cols - cc) ** 2 < rad**2)
        else:  # text-like strokes: short thin segments
            for _ in range(int(rng.integers(2, 6))):
                r0, c0 = rng.uniform(2, h - 2), rng.uniform(2, w - 2)
                ang = rng.uniform(0, 2 * np.pi)
                length = rng.uniform(4, min(h, w) / 4)
                n = max(int(length * 2), 2)
                rr = np.clip(r0 + np.cos(ang) * np.linspace(0, length, n), 0, h - 1)
                cc = np.clip(c0 + np.sin(ang) * np.linspace(0, length, n), 0, w - 1)
                luma[rr.astype(int), cc.astype(int)] = np.clip(
                    luma[rr.astype(int), cc.astype(int)] + val * 1.5, -0.2, 1.2)

    # band-limited texture keeps fine detail everywhere, not just at edges
    luma += 0.16 * gaussian_filter(rng.standard_normal((h, w)), 0.8, mode="nearest")

    chans = []
    for _ in range(3):
        tint = rng.uniform(0.85, 1.15)
        offset = rng.uniform(-0.05, 0.05)
        chans.append(luma * tint + offset)
    img = np.stack(chans, axis=0)
    lo, hi = img.min(), img.max()
    if hi - lo > 1.0:
        img = (img - lo) / (hi - lo)
    else:
        img = np.clip(img, 0.0, 1.0)
    return Image(img)


def _pair_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def make_pair(config: DatasetConfig, index: int) -> ImagePair:
    """Generate pair ``index`` of the dataset; pure function of (config, index).

    The sharp image is rendered with a margin, blurred, then centre-cropped so
    border clamping never contaminates the training patch.
    """
    rng = _pair_rng(config.seed, index)
    pad = int(np.ceil(config.max_magnitude)) + 2
    gen_h = config.patch_size + 2 * pad
    gen_w = config.patch_size + 2 * pad

    sharp_full = render_texture(rng, gen_h, gen_w)
    # per-pair blur severity so the corpus spans sharp-ish to heavily blurred
    severity = rng.uniform(0.35, 1.0)
    pair_params = DatasetConfig(**{**config.as_dict(),
                                   "max_magnitude": config.max_magnitude * severity})
    fld = synthesize_motion_field(rng, gen_h, gen_w, pair_params)
    noise_sigma = float(rng.uniform(0.0, config.noise_max))
    steps = default_steps(config.max_magnitude)
    blurry_full = apply_spatially_varying_blur(sharp_full, fld, steps,
                                               noise_sigma, rng)

    s = slice(pad, pad + config.patch_size)
    pair_id = f"{config.seed:08d}_{index:04d}"
    sharp = Image(sharp_full.data[:, s, s].copy(), id=pair_id)
    blurry = Image(blurry_full.data[:, s, s].copy(), id=pair_id)
    return ImagePair(sharp, blurry,
                     field=fld.crop(pad, pad, config.patch_size, config.patch_size),
                     noise_sigma=noise_sigma)


def make_dataset(config: DatasetConfig) -> list[ImagePair]:
    return [make_pair(config, i) for i in range(config.num_pairs)]


def _rebuild(pair: ImagePair, sharp: np.ndarray, blurry: np.ndarray,
             vec: np.ndarray | None) -> ImagePair:
    fld = None
    if vec is not None:
        fld = MotionField(np.ascontiguousarray(vec), pair.field.max_magnitude)
    return ImagePair(Image(np.ascontiguousarray(sharp), id=pair.sharp.id),
                     Image(np.ascontiguousarray(blurry), id=pair.blurry.id),
                     field=fld, noise_sigma=pair.noise_sigma)


def crop_pair(pair: ImagePair, top: int, left: int, size: int) -> ImagePair:
    h, w = pair.sharp.height, pair.sharp.width
    if size > min(h, w) or top + size > h or left + size > w:
        raise DimensionError(f"crop {size}@({top},{left}) outside image {h}x{w}")
    sl_r, sl_c = slice(top, top + size), slice(left, left + size)
    vec = None if pair.field is None else pair.field.vectors[:, sl_r, sl_c]
    return _rebuild(pair, pair.sharp.data[:, sl_r, sl_c],
                    pair.blurry.data[:, sl_r, sl_c], vec)


def hflip_pair(pair: ImagePair) -> ImagePair:
    """Mirror along the width axis; column displacements flip sign."""
    vec = None
    if pair.field is not None:
        v = pair.field.vectors
        vec = np.stack([v[0, :, ::-1], -v[1, :, ::-1]])
    return _rebuild(pair, pair.sharp.data[:, :, ::-1],
                    pair.blurry.data[:, :, ::-1], vec)


def rot90_pair(pair: ImagePair, k: int) -> ImagePair:
    """Rotate by k*90 deg CCW; vector components rotate with the frame."""
    k = k % 4
    vec = None
    if pair.field is not None:
        vec = np.stack([np.rot90(pair.field.vectors[0], k),
                        np.rot90(pair.field.vectors[1], k)])
        for _ in range(k):
            vec = np.stack([-vec[1], vec[0]])
    return _rebuild(pair, np.rot90(pair.sharp.data, k, axes=(1, 2)),
                    np.rot90(pair.blurry.data, k, axes=(1, 2)), vec)


def crop_and_augment(pair: ImagePair, size: int, rng: np.random.Generator,
                     augment: bool = True) -> ImagePair:
    """Identical random crop plus optional flip / 90-degree rotation applied
    to sharp and blurry (and the provenance field, if present)."""
    h, w = pair.sharp.height, pair.sharp.width
    if size > min(h, w):
        raise DimensionError(f"crop {size} larger than image {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    out = crop_pair(pair, top, left, size)
    if augment:
        if rng.integers(0, 2):
            out = hflip_pair(out)
        k = int(rng.integers(0, 4))
        if k:
            out = rot90_pair(out, k)
    return out


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic shuffle for one epoch; pure function of (n, seed, epoch)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 997, epoch])))
    return rng.permutation(n)


def batch_iterator(dataset: list[ImagePair], batch_size: int, seed: int,
                   epochs: int | None = None):
    """Yield shuffled batches, dropping the last partial batch each epoch.

    Runs forever when ``epochs`` is None.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    per_epoch = n // batch_size
    if per_epoch == 0:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    epoch = 0
    while epochs is None or epoch < epochs:
        perm = epoch_permutation(n, seed, epoch)
        for b in range(per_epoch):
            idx = perm[b * batch_size:(b + 1) * batch_size]
            yield [dataset[i] for i in idx]
        epoch += 1


def save_dataset(pairs: list[ImagePair], config: DatasetConfig, out_dir) -> None:
    """Persist as paired 16-bit PNGs plus a JSON manifest."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i, pair in enumerate(pairs):
        pid = pair.id or f"{i:04d}"
        save_image(pair.sharp, os.path.join(out_dir, f"{pid}_sharp.png"), bit_depth=16)
        save_image(pair.blurry, os.path.join(out_dir, f"{pid}_blur.png"), bit_depth=16)
        records.append({"id": pid, "index": i, "noise_sigma": pair.noise_sigma,
                        "field_seed": [config.seed, i]})
    manifest = {"config": config.as_dict(), "pairs": records}
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))


def load_dataset(data_dir) -> list[ImagePair]:
    """Load a directory written by save_dataset."""
    manifest_path = os.path.join(data_dir, "manifest.json")
    with open(manifest_path) as f:
        manifest = json.load(f)
    pairs = []
    for rec in manifest["pairs"]:
        sharp = load_image(os.path.join(data_dir, f"{rec['id']}_sharp.png"), id=rec["id"])
        blurry = load_image(os.path.join(data_dir, f"{rec['id']}_blur.png"), id=rec["id"])
        pairs.append(ImagePair(sharp, blurry, noise_sigma=rec["noise_sigma"]))
    return pairs
