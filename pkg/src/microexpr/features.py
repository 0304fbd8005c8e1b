"""Facial region extraction and handcrafted descriptors (LBP and HOG).

Region profile: eyes and mouth are the top and bottom floor(h/3) rows pooled
to 140x40, the whole face pooled to 200x200.  Descriptors concatenate in the
fixed order eyes, face, mouth with LBP before HOG per region.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .dataset import GrayImage

EYES_SIZE = (140, 40)  # width, height
FACE_SIZE = (200, 200)
MOUTH_SIZE = (140, 40)

# LBP neighbor order: start at the east neighbor, proceed counter-clockwise.
# (row, col) offsets within a 3x3 window whose center is (1,1).
LBP_OFFSETS = ((1, 2), (0, 2), (0, 1), (0, 0), (1, 0), (2, 0), (2, 1), (2, 2))

HOG_BLOCK_EPSILON = 1e-6


@dataclass(frozen=True, eq=False)
class RegionSet:
    eyes: GrayImage
    face: GrayImage
    mouth: GrayImage

    def __post_init__(self):
        for region, (w, h) in (
            (self.eyes, EYES_SIZE),
            (self.face, FACE_SIZE),
            (self.mouth, MOUTH_SIZE),
        ):
            if (region.width, region.height) != (w, h):
                raise ValueError(
                    f"region is {region.width}x{region.height}, expected {w}x{h}"
                )


@dataclass(frozen=True, eq=False)
class FeatureDescriptor:
    """Flat vector with a named segment layout: (name, offset, length) triples
    that are contiguous, non-overlapping and cover the whole vector."""

    values: np.ndarray
    layout: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        object.__setattr__(self, "values", values)
        expected = 0
        for name, offset, length in self.layout:
            if offset != expected or length < 0:
                raise ValueError(f"segment {name!r} breaks contiguous layout")
            expected += length
        if expected != values.size:
            raise ValueError(f"layout covers {expected} values, vector has {values.size}")

    def segment(self, name: str) -> np.ndarray:
        for seg_name, offset, length in self.layout:
            if seg_name == name:
                return self.values[offset : offset + length]
        raise KeyError(name)


@dataclass(frozen=True)
class FeatureConfig:
    """Grid/cell settings for the handcrafted descriptor.  Region order is
    fixed (eyes, face, mouth) and is not configurable."""

    eyes_lbp_grid: tuple[int, int] = (4, 2)  # cells across, cells down
    face_lbp_grid: tuple[int, int] = (5, 5)
    mouth_lbp_grid: tuple[int, int] = (4, 2)
    hog_cell: int = 10
    hog_bins: int = 9


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix mapping n_in samples to n_out area-averaged bins;
    W[i, y] is the fractional coverage of input cell y by output bin i."""
    scale = n_in / n_out
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = i * scale
        hi = (i + 1) * scale
        y0 = int(math.floor(lo))
        y1 = min(int(math.ceil(hi)), n_in)
        for y in range(y0, y1):
            weights[i, y] = min(hi, y + 1.0) - max(lo, float(y))
        weights[i] /= scale
    return weights


def avg_pool_resize(img: GrayImage, out_w: int, out_h: int) -> GrayImage:
    """Exact area-weighted average pooling; preserves the global mean."""
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be positive")
    if (out_w, out_h) == (img.width, img.height):
        return GrayImage(img.pixels.copy())
    rows = _area_weights(img.height, out_h)
    cols = _area_weights(img.width, out_w)
    return GrayImage(rows @ img.pixels @ cols.T)


def crop_regions(face: GrayImage) -> RegionSet:
    """Top third to eyes, bottom third to mouth, whole image to face, each
    pooled to its profile size."""
    if face.height < 3 or face.width < 3:
        raise ValueError(f"face image {face.width}x{face.height} too small to crop")
    third = face.height // 3
    eyes = GrayImage(face.pixels[:third])
    mouth = GrayImage(face.pixels[face.height - third :])
    return RegionSet(
        eyes=avg_pool_resize(eyes, *EYES_SIZE),
        face=avg_pool_resize(face, *FACE_SIZE),
        mouth=avg_pool_resize(mouth, *MOUTH_SIZE),
    )


def lbp_code(window: np.ndarray) -> int:
    """8-bit code of a 3x3 window: bit i set when neighbor i >= center."""
    w = np.asarray(window, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(w)):
        raise ValueError("window contains non-finite values")
    center = w[1, 1]
    code = 0
    for i, (r, c) in enumerate(LBP_OFFSETS):
        if w[r, c] >= center:
            code |= 1 << i
    return code


def _lbp_codes(px: np.ndarray) -> np.ndarray:
    """Vectorized lbp_code over every interior pixel; shape (h-2, w-2)."""
    h, w = px.shape
    center = px[1:-1, 1:-1]
    codes = np.zeros((h - 2, w - 2), dtype=np.int64)
    for i, (r, c) in enumerate(LBP_OFFSETS):
        codes |= (px[r : r + h - 2, c : c + w - 2] >= center).astype(np.int64) << i
    return codes


def _cell_bounds(extent: int, cells: int) -> list[tuple[int, int]]:
    # Equal split; the remainder goes to the last cell.
    base = extent // cells
    bounds = [(k * base, (k + 1) * base) for k in range(cells - 1)]
    bounds.append(((cells - 1) * base, extent))
    return bounds


def lbp_histogram(img: GrayImage, grid_w: int, grid_h: int) -> FeatureDescriptor:
    """Per-cell 256-bin histograms of LBP codes over the image interior,
    each normalized to sum 1 (empty cells stay all-zero), concatenated
    row-major."""
    if img.height < 3 or img.width < 3:
        raise ValueError("image must be at least 3x3")
    if grid_w < 1 or grid_h < 1:
        raise ValueError("grid must be at least 1x1")
    codes = _lbp_codes(img.pixels)
    row_bounds = _cell_bounds(codes.shape[0], grid_h)
    col_bounds = _cell_bounds(codes.shape[1], grid_w)
    parts: list[np.ndarray] = []
    layout: list[tuple[str, int, int]] = []
    offset = 0
    for r, (r0, r1) in enumerate(row_bounds):
        for c, (c0, c1) in enumerate(col_bounds):
            cell = codes[r0:r1, c0:c1]
            hist = np.bincount(cell.ravel(), minlength=256).astype(np.float64)
            if cell.size:
                hist /= cell.size
            parts.append(hist)
            layout.append((f"cell{r}_{c}", offset, 256))
            offset += 256
    return FeatureDescriptor(np.concatenate(parts), tuple(layout))


def gradients(img: GrayImage) -> tuple[np.ndarray, np.ndarray]:
    """Central differences with edge replication:
    gx = img(x+1,y) - img(x-1,y), gy = img(x,y+1) - img(x,y-1)."""
    if img.height < 3 or img.width < 3:
        raise ValueError("image must be at least 3x3")
    px = img.pixels
    padded_x = np.pad(px, ((0, 0), (1, 1)), mode="edge")
    padded_y = np.pad(px, ((1, 1), (0, 0)), mode="edge")
    gx = padded_x[:, 2:] - padded_x[:, :-2]
    gy = padded_y[2:, :] - padded_y[:-2, :]
    return gx, gy


def gradient_polar(gx: np.ndarray, gy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude q = sqrt(gx^2+gy^2) and unsigned direction theta in [0, pi);
    zero-gradient pixels get theta 0 (their magnitude contributes nothing)."""
    q = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    theta = np.where(theta >= np.pi, 0.0, theta)
    return q, np.where(q > 0, theta, 0.0)


def hog_descriptor(img: GrayImage, cell: int, bins: int) -> FeatureDescriptor:
    """Orientation histograms of gradient magnitude over cell x cell pixels
    (partial cells dropped), magnitudes linearly interpolated between the two
    nearest bin centers, 2x2-cell blocks L2-normalized with overlap stride 1.
    """
    if bins < 2:
        raise ValueError("need at least 2 orientation bins")
    if img.height < cell or img.width < cell:
        raise ValueError(f"image {img.width}x{img.height} smaller than one {cell}px cell")
    gx, gy = gradients(img)
    q, theta = gradient_polar(gx, gy)

    bin_width = np.pi / bins
    t = theta / bin_width - 0.5
    lower = np.floor(t).astype(np.int64)
    frac = t - lower
    lower_bin = np.mod(lower, bins)
    upper_bin = np.mod(lower + 1, bins)

    cells_y = img.height // cell
    cells_x = img.width // cell
    hists = np.zeros((cells_y, cells_x, bins))
    for cy in range(cells_y):
        for cx in range(cells_x):
            sl = (slice(cy * cell, (cy + 1) * cell), slice(cx * cell, (cx + 1) * cell))
            votes_lo = np.bincount(
                lower_bin[sl].ravel(), weights=(q[sl] * (1 - frac[sl])).ravel(), minlength=bins
            )
            votes_hi = np.bincount(
                upper_bin[sl].ravel(), weights=(q[sl] * frac[sl]).ravel(), minlength=bins
            )
            hists[cy, cx] = votes_lo + votes_hi

    blocks: list[np.ndarray] = []
    for by in range(cells_y - 1):
        for bx in range(cells_x - 1):
            v = hists[by : by + 2, bx : bx + 2].ravel()
            blocks.append(v / math.sqrt(float(v @ v) + HOG_BLOCK_EPSILON**2))
    flat = np.concatenate(blocks) if blocks else np.zeros(0)
    return FeatureDescriptor(flat, (("hog", 0, flat.size),))


def handcrafted_descriptor(regions: RegionSet, cfg: FeatureConfig) -> FeatureDescriptor:
    """LBP + HOG over eyes, face, mouth, concatenated in that fixed order."""
    parts: list[np.ndarray] = []
    layout: list[tuple[str, int, int]] = []
    offset = 0
    for name, region, grid in (
        ("eyes", regions.eyes, cfg.eyes_lbp_grid),
        ("face", regions.face, cfg.face_lbp_grid),
        ("mouth", regions.mouth, cfg.mouth_lbp_grid),
    ):
        lbp = lbp_histogram(region, *grid)
        hog = hog_descriptor(region, cfg.hog_cell, cfg.hog_bins)
        for kind, values in (("lbp", lbp.values), ("hog", hog.values)):
            parts.append(values)
            layout.append((f"{name}.{kind}", offset, values.size))
            offset += values.size
    return FeatureDescriptor(np.concatenate(parts), tuple(layout))


def write_descriptor_csv(
    path, descriptors: list[FeatureDescriptor], labels: list[str]
) -> None:
    """One row per sample; columns named segment.index plus a final label."""
    if len(descriptors) != len(labels):
        raise ValueError("descriptor/label count mismatch")
    if not descriptors:
        raise ValueError("nothing to write")
    layout = descriptors[0].layout
    header = [
        f"{name}.{i}" for name, _, length in layout for i in range(length)
    ] + ["label"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for desc, label in zip(descriptors, labels):
            if desc.layout != layout:
                raise ValueError("descriptors have differing layouts")
            writer.writerow([repr(float(v)) for v in desc.values] + [label])
