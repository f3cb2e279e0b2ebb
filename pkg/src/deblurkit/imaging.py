"""Image container, PNG I/O and scalar image metrics.

Images are channel-first float arrays in [0, 1]. All metrics are pure
functions and safe to call concurrently.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy.ndimage import correlate1d

from .exceptions import DimensionError, ImageIOError

PSNR_CAP_DB = 100.0
MSE_FLOOR = 1e-10

# Rec. 601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])

_LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass
class Image:
    """A 3-channel raster, values in [0, 1], stored as float64 (3, H, W)."""

    data: np.ndarray
    id: str | None = None

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise DimensionError(f"expected (3, H, W) array, got shape {arr.shape}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise DimensionError(f"empty image: shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(
                f"image values outside [0, 1]: min={arr.min():.4g} max={arr.max():.4g}"
            )
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def require_multiple_of(self, multiple: int) -> "Image":
        """Networks downsample 4 times; their inputs must be divisible by 16."""
        if self.height % multiple or self.width % multiple:
            raise DimensionError(
                f"image size {self.height}x{self.width} not divisible by {multiple}"
            )
        return self

    def luminance(self) -> np.ndarray:
        return np.tensordot(_LUMA, self.data, axes=1)

    def tensor(self, dtype=None):
        """Return a (3, H, W) torch tensor (float32 unless dtype given)."""
        import torch

        return torch.from_numpy(self.data).to(dtype or torch.float32)

    @staticmethod
    def from_array(arr: np.ndarray, id: str | None = None, clamp: bool = False) -> "Image":
        arr = np.asarray(arr, dtype=np.float64)
        if clamp:
            arr = np.clip(arr, 0.0, 1.0)
        return Image(arr, id=id)

    @staticmethod
    def from_tensor(t, id: str | None = None, clamp: bool = True) -> "Image":
        arr = t.detach().cpu().double().numpy()
        if arr.ndim == 4:
            if arr.shape[0] != 1:
                raise DimensionError("from_tensor expects a single image, got a batch")
            arr = arr[0]
        return Image.from_array(arr, id=id, clamp=clamp)


@dataclass
class MetricReport:
    """Scalar similarity summary for one image pair or an averaged set."""

    psnr_db: float
    ssim: float
    cx: float = float("nan")
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"psnr_db": self.psnr_db, "ssim": self.ssim, "cx": self.cx}
        out.update(self.extra)
        return out


def _paired(a: Image, b: Image) -> tuple[np.ndarray, np.ndarray]:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a.data, b.data


def psnr(a: Image, b: Image) -> float:
    """10*log10(1/MSE) in dB, MSE floored at 1e-10 (caps identical pairs at 100)."""
    da, db = _paired(a, b)
    mse = float(np.mean((da - db) ** 2))
    return 10.0 * math.log10(1.0 / max(mse, MSE_FLOOR))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r**2) / (2.0 * sigma**2))
    return w / w.sum()


def ssim(a: Image, b: Image, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean structural similarity over all valid Gaussian windows and channels."""
    da, db = _paired(a, b)
    if a.height < window or a.width < window:
        raise DimensionError(
            f"image {a.height}x{a.width} smaller than SSIM window {window}"
        )
    w1d = _gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    half = window // 2

    def filt(x):
        y = correlate1d(x, w1d, axis=0, mode="constant")
        y = correlate1d(y, w1d, axis=1, mode="constant")
        return y[half:-half, half:-half]

    vals = []
    for c in range(3):
        x, y = da[c], db[c]
        mu_x = filt(x)
        mu_y = filt(y)
        mu_xx = filt(x * x)
        mu_yy = filt(y * y)
        mu_xy = filt(x * y)
        var_x = mu_xx - mu_x**2
        var_y = mu_yy - mu_y**2
        cov = mu_xy - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        vals.append(num / den)
    return float(np.mean(vals))


def sharpness(a: Image) -> float:
    """Variance of the 4-neighbour Laplacian of the luminance (interior pixels)."""
    luma = a.luminance()
    if a.height < 3 or a.width < 3:
        return 0.0
    lap = (
        luma[:-2, 1:-1] + luma[2:, 1:-1] + luma[1:-1, :-2] + luma[1:-1, 2:]
        - 4.0 * luma[1:-1, 1:-1]
    )
    return float(np.var(lap))


def contextual_similarity(a: Image, b: Image, extractor=None,
                          layer: int = 3, bandwidth: float = 0.5) -> float:
    """Feature-matching dissimilarity between two images; lower = more similar.

    Feature vectors are taken from one mid-depth stage of the frozen
    extractor, L2-normalized, and matched by normalized cosine distance:
    affinities exp((1 - d/d_min)/h) are row-softmaxed and the score is
    -log(mean over target positions of the best affinity).
    """
    import torch

    from .losses import default_feature_extractor

    _paired(a, b)
    if extractor is None:
        extractor = default_feature_extractor()
    with torch.no_grad():
        fa = extractor.stage_features(a.tensor().unsqueeze(0))[layer - 1][0]
        fb = extractor.stage_features(b.tensor().unsqueeze(0))[layer - 1][0]
    va = fa.reshape(fa.shape[0], -1).T.double().numpy()
    vb = fb.reshape(fb.shape[0], -1).T.double().numpy()
    return cx_from_features(va, vb, bandwidth=bandwidth)


def cx_from_features(feats_a: np.ndarray, feats_b: np.ndarray,
                     bandwidth: float = 0.5, eps: float = 1e-5) -> float:
    """CX score from raw (N, C) feature sets; exposed for the brute-force oracle."""
    va = feats_a / np.maximum(np.linalg.norm(feats_a, axis=1, keepdims=True), 1e-12)
    vb = feats_b / np.maximum(np.linalg.norm(feats_b, axis=1, keepdims=True), 1e-12)
    # cosine distance matrix, rows = features of a, cols = features of b
    d = 1.0 - va @ vb.T
    d = np.maximum(d, 0.0)
    d_norm = d / (d.min(axis=1, keepdims=True) + eps)
    w = np.exp((1.0 - d_norm) / bandwidth)
    cx_ij = w / w.sum(axis=1, keepdims=True)
    score = float(np.mean(cx_ij.max(axis=0)))
    return -math.log(max(score, 1e-12))


def count_macs(config, input_h: int, input_w: int) -> int:
    """Analytic multiply-accumulate count of the deblurring inference path.

    Counts every convolution actually executed when running the degradation
    encoder followed by one stacked generator (including injection branches)
    on a (3, input_h, input_w) input.
    """
    import torch

    from .encoder import DegradationEncoder, EncoderConfig
    from .msdi import Generator

    torch.manual_seed(0)
    enc = DegradationEncoder(EncoderConfig(latent_channels=config.degradation_channels))
    gen = Generator(config)
    x = torch.zeros(1, 3, input_h, input_w)
    with torch.no_grad():
        deg = None
        if config.uses_degradation():
            deg = enc(x)[1]
        total = count_module_macs(enc, x) if config.uses_degradation() else 0
        total += count_module_macs(gen, x, deg)
    return total


def count_module_macs(module, *inputs) -> int:
    """MACs of all Conv2d layers fired by one forward pass of ``module``."""
    import torch

    counts = []

    def hook(mod, inp, out):
        k_h, k_w = mod.kernel_size
        out_c, out_h, out_w = out.shape[-3:]
        in_c = mod.in_channels // mod.groups
        counts.append(out_c * out_h * out_w * in_c * k_h * k_w)

    handles = [
        m.register_forward_hook(hook)
        for m in module.modules()
        if isinstance(m, torch.nn.Conv2d)
    ]
    try:
        with torch.no_grad():
            module(*inputs)
    finally:
        for h in handles:
            h.remove()
    return int(sum(counts))


def load_image(path, id: str | None = None) -> Image:
    """Load an 8- or 16-bit PNG as an Image (values scaled to [0, 1])."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ImageIOError(f"no such file: {path}")
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageIOError(f"could not decode image: {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageIOError(f"unsupported bit depth {raw.dtype} in {path}")
    if raw.ndim == 2:
        raw = np.stack([raw] * 3, axis=-1)
    if raw.shape[-1] == 4:
        raw = raw[..., :3]
    rgb = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    data = rgb.astype(np.float64).transpose(2, 0, 1) / scale
    return Image(data, id=id or os.path.splitext(os.path.basename(path))[0])


def save_image(image: Image, path, bit_depth: int = 8) -> None:
    """Quantize to 8- or 16-bit PNG; writes atomically (tmp file + rename)."""
    if bit_depth == 8:
        scale, dtype = 255.0, np.uint8
    elif bit_depth == 16:
        scale, dtype = 65535.0, np.uint16
    else:
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    path = os.fspath(path)
    hwc = np.round(image.data.transpose(1, 2, 0) * scale).astype(dtype)
    bgr = cv2.cvtColor(hwc, cv2.COLOR_RGB2BGR)
    ok, buf = cv2.imencode(".png", bgr)
    if not ok:
        raise ImageIOError(f"PNG encoding failed for {path}")
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".png.tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(buf.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
