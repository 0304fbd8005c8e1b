"""Image conditioning: adaptive homomorphic filtering, histogram equalization,
per-image and per-pixel normalization, plus shared bilinear geometry helpers.

Pipeline order is fixed: homomorphic filter, then histogram equalization;
at training time, per-image normalization followed by per-pixel statistics
fitted on the training split only.  Test images must reuse the training
PixelStats, never refit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import GrayImage

# Offset added before the log transform so black pixels stay finite.
LOG_DELTA = 1.0 / 255.0
PER_IMAGE_EPSILON = 1e-6


@dataclass(frozen=True)
class HomomorphicParams:
    """Gains for the illumination (low) and reflectance (high) log-domain
    bands; sigma_frac sets the Gaussian split radius as a fraction of the
    shorter image side, which is what makes the filter adapt to image size."""

    gamma_low: float = 0.5
    gamma_high: float = 1.5
    sigma_frac: float = 0.125

    def __post_init__(self):
        if self.gamma_low < 0 or self.gamma_high < 0:
            raise ValueError("gains must be non-negative")
        if not 0.0 < self.sigma_frac < 1.0:
            raise ValueError("sigma_frac must lie in (0,1)")


@dataclass(frozen=True, eq=False)
class PixelStats:
    """Per-pixel mean/std images fitted over a training set."""

    mean: np.ndarray
    std: np.ndarray
    epsilon: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape:
            raise ValueError(f"mean shape {mean.shape} != std shape {std.shape}")
        if np.any(std < 0):
            raise ValueError("std must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _blur_axis(px: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    padded = np.pad(px, pad, mode="edge")
    out = np.zeros_like(px)
    for t, kt in enumerate(kernel):
        if axis == 0:
            out += kt * padded[t : t + px.shape[0], :]
        else:
            out += kt * padded[:, t : t + px.shape[1]]
    return out


def gaussian_blur(px: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge replication (no dark halos at borders)."""
    if sigma <= 0:
        return px.copy()
    k = _gaussian_kernel(sigma)
    return _blur_axis(_blur_axis(px, k, 1), k, 0)


def _require_unit_range(px: np.ndarray, op: str) -> None:
    if px.min() < 0.0 or px.max() > 1.0:
        raise ValueError(f"{op} expects pixels in [0,1]")


def homomorphic_filter(img: GrayImage, params: HomomorphicParams) -> GrayImage:
    """Log-domain band split with independent gains, then rescale to [0,1].

    low = blur(log(img + delta)); out = exp(gl*low + gh*(log - low)), affinely
    rescaled so min maps to 0 and max to 1.  Constant images pass through.
    """
    px = img.pixels
    _require_unit_range(px, "homomorphic_filter")
    log_img = np.log(px + LOG_DELTA)
    sigma = params.sigma_frac * min(img.width, img.height)
    low = gaussian_blur(log_img, sigma)
    out = np.exp(params.gamma_low * low + params.gamma_high * (log_img - low))
    lo, hi = float(out.min()), float(out.max())
    if hi - lo <= 0.0:
        return img
    return GrayImage((out - lo) / (hi - lo))


def hist_equalize(img: GrayImage) -> GrayImage:
    """256-bin histogram equalization via the cumulative distribution.

    out = (cdf(bin) - cdf_min) / (1 - cdf_min); single-bin images (cdf_min = 1)
    are returned unchanged.
    """
    px = img.pixels
    _require_unit_range(px, "hist_equalize")
    bins = np.minimum((px * 256.0).astype(np.int64), 255)
    counts = np.bincount(bins.ravel(), minlength=256)
    cdf = np.cumsum(counts) / px.size
    cdf_min = float(cdf[np.nonzero(counts)[0][0]])
    if cdf_min >= 1.0:
        return img
    return GrayImage((cdf[bins] - cdf_min) / (1.0 - cdf_min))


def normalize_per_image(img: GrayImage) -> GrayImage:
    """Zero-mean, unit-std per image (population std, epsilon-guarded);
    constant images map to all zeros."""
    px = img.pixels
    if px.size < 2:
        raise ValueError("need at least 2 pixels")
    mu = float(px.mean())
    sd = float(px.std())
    return GrayImage((px - mu) / max(sd, PER_IMAGE_EPSILON))


def fit_pixel_stats(train: list[GrayImage], epsilon: float = PER_IMAGE_EPSILON) -> PixelStats:
    """Per-pixel mean and population std over a same-shape training set."""
    if len(train) < 2:
        raise ValueError("need at least 2 images")
    shape = train[0].pixels.shape
    for i, img in enumerate(train):
        if img.pixels.shape != shape:
            raise ValueError(f"image {i} has shape {img.pixels.shape}, expected {shape}")
    stack = np.stack([img.pixels for img in train])
    return PixelStats(stack.mean(axis=0), stack.std(axis=0), epsilon)


def apply_pixel_stats(img: GrayImage, stats: PixelStats) -> GrayImage:
    """out[p] = (img[p] - mean[p]) / max(std[p], epsilon)."""
    if img.pixels.shape != stats.mean.shape:
        raise ValueError(f"image shape {img.pixels.shape} != stats shape {stats.mean.shape}")
    return GrayImage((img.pixels - stats.mean) / np.maximum(stats.std, stats.epsilon))


def _bilinear_sample(px: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample px at fractional (ys, xs); coordinates clamp to the border,
    which doubles as edge-replicated fill for out-of-range points."""
    h, w = px.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    return (
        px[y0, x0] * (1 - fy) * (1 - fx)
        + px[y0, x1] * (1 - fy) * fx
        + px[y1, x0] * fy * (1 - fx)
        + px[y1, x1] * fy * fx
    )


def bilinear_resize(px: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center-aligned bilinear resize: src = (dst + 0.5) * scale - 0.5."""
    h, w = px.shape
    if out_h == h and out_w == w:
        return px.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    return _bilinear_sample(px, ys[:, None], xs[None, :])


def rotate_bilinear(px: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the image center, bilinear sampling, edge-replicated fill."""
    h, w = px.shape
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy -= cy
    xx -= cx
    src_y = c * yy - s * xx + cy
    src_x = s * yy + c * xx + cx
    return _bilinear_sample(px, src_y, src_x)
