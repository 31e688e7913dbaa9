"""Block-based local image features and the coarse Lab signature.

An image is cut into a 10x10 grid of equal blocks (remainder pixels on the
right/bottom edges are dropped) and each block becomes one 23-dimensional
local feature vector:

* 9 color values  -- mean, standard deviation and skewness of each HSV
                     channel (channels normalized to [0, 1]).
* 8 edge values   -- normalized histogram over 8 bins of 45 degrees of the
                     Sobel gradient direction on luminance, counting only
                     pixels whose gradient magnitude clears a threshold.
* 6 texture values-- Shannon entropy of the squared-coefficient distribution
                     of each detail subband of a 2-level Haar decomposition
                     of luminance (LH, HL, HH per level).

The Lab signature cuts the image into a 4x4 grid and concatenates the mean
CIELAB triplet of each block (sRGB, D65), giving a 48-dimensional vector.

Binary PPM (P6, maxval 255) is the only decoded format; anything else is
expected to arrive as a precomputed feature file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .store import LocalFeatureSet

__all__ = [
    "RgbImage",
    "load_ppm",
    "save_ppm",
    "partition_blocks",
    "color_moments",
    "edge_direction_histogram",
    "wavelet_entropy",
    "extract_block_features",
    "lab_signature",
]

# Sobel row/column responses reach 4x the luminance range, so the largest
# possible gradient magnitude on [0, 1] luminance is 4 * sqrt(2).
_MAX_SOBEL_MAGNITUDE = 4.0 * math.sqrt(2.0)

_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65_WHITE = np.array([0.95047, 1.0, 1.08883])


@dataclass(frozen=True)
class RgbImage:
    """Immutable 8-bit RGB raster; also used for blocks of a larger image."""

    data: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"expected (h, w, 3) pixels, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if np.issubdtype(arr.dtype, np.integer) and arr.min() >= 0 and arr.max() <= 255:
                arr = arr.astype(np.uint8)
            else:
                raise ValueError("pixel values must be integers in [0, 255]")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_pixels(cls, width: int, height: int, pixels) -> "RgbImage":
        """Build from a row-major sequence of (r, g, b) triples."""
        arr = np.asarray(pixels, dtype=np.int64).reshape(height, width, 3)
        return cls(arr)

    @classmethod
    def constant(cls, width: int, height: int, rgb) -> "RgbImage":
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[:] = np.asarray(rgb, dtype=np.uint8)
        return cls(arr)


def load_ppm(path: str | Path) -> RgbImage:
    """Read a binary PPM (P6) with maxval 255."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    magic, width_s, height_s, maxval_s = tokens
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {magic!r})")
    width, height, maxval = int(width_s), int(height_s), int(maxval_s)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    expected = width * height * 3
    body = raw[pos : pos + expected]
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} pixel bytes, got {len(body)}")
    return RgbImage(np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3))


def save_ppm(image: RgbImage, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(image.data.tobytes())


def partition_blocks(image: RgbImage, grid_rows: int = 10, grid_cols: int = 10) -> list[RgbImage]:
    """Cut into grid_rows x grid_cols equal blocks, row-major.

    Block size is floor(W / cols) x floor(H / rows); remainder pixels on the
    right and bottom are discarded.
    """
    if grid_rows < 1 or grid_cols < 1:
        raise ValueError("grid must be at least 1x1")
    if image.width < grid_cols or image.height < grid_rows:
        raise ValueError(
            f"image {image.width}x{image.height} smaller than grid {grid_cols}x{grid_rows}"
        )
    bw = image.width // grid_cols
    bh = image.height // grid_rows
    blocks = []
    for r in range(grid_rows):
        for c in range(grid_cols):
            blocks.append(RgbImage(image.data[r * bh : (r + 1) * bh, c * bw : (c + 1) * bw]))
    return blocks


def _rgb_unit(image: RgbImage) -> np.ndarray:
    return image.data.astype(np.float64) / 255.0


def _hsv(image: RgbImage) -> np.ndarray:
    """(h, w, 3) HSV with all channels in [0, 1]; achromatic hue is 0."""
    rgb = _rgb_unit(image)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=2)
    minc = rgb.min(axis=2)
    value = maxc
    delta = maxc - minc
    with np.errstate(invalid="ignore", divide="ignore"):
        saturation = np.where(maxc > 0, delta / maxc, 0.0)
        hue = np.zeros_like(maxc)
        chroma = np.where(delta > 0, delta, 1.0)
        hue = np.where(maxc == r, ((g - b) / chroma) % 6.0, hue)
        hue = np.where((maxc == g) & (maxc != r), (b - r) / chroma + 2.0, hue)
        hue = np.where((maxc == b) & (maxc != r) & (maxc != g), (r - g) / chroma + 4.0, hue)
        hue = np.where(delta > 0, hue / 6.0, 0.0)
    return np.stack([hue, saturation, value], axis=2)


def _moments(channel: np.ndarray) -> tuple[float, float, float]:
    flat = channel.reshape(-1)
    if flat.min() == flat.max():  # constant channel: exact degenerate moments
        return float(flat[0]), 0.0, 0.0
    mean = float(flat.mean())
    centered = flat - mean
    variance = float((centered * centered).mean())
    std = math.sqrt(variance)
    if std == 0.0:
        return mean, 0.0, 0.0
    skew = float((centered * centered * centered).mean()) / std**3
    return mean, std, skew


def color_moments(block: RgbImage) -> tuple[float, ...]:
    """Mean, standard deviation and skewness per HSV channel (H, S, V order)."""
    hsv = _hsv(block)
    out: list[float] = []
    for c in range(3):
        out.extend(_moments(hsv[..., c]))
    return tuple(out)


def _luminance(image: RgbImage) -> np.ndarray:
    rgb = _rgb_unit(image)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def edge_direction_histogram(
    block: RgbImage, threshold_fraction: float = 0.1
) -> tuple[float, ...]:
    """Histogram over 8 direction bins of 45 degrees of Sobel gradients.

    Interior pixels vote when their gradient magnitude exceeds
    ``threshold_fraction`` of the largest magnitude the operator can produce;
    the histogram is normalized to sum 1, or stays all-zero when nothing
    clears the threshold.
    """
    if block.width < 3 or block.height < 3:
        raise ValueError(f"block {block.width}x{block.height} too small for a 3x3 gradient")
    lum = _luminance(block)
    # Right-column sum minus left-column sum keeps flat regions at exactly 0.
    gx = (
        (lum[:-2, 2:] + 2.0 * lum[1:-1, 2:] + lum[2:, 2:])
        - (lum[:-2, :-2] + 2.0 * lum[1:-1, :-2] + lum[2:, :-2])
    )
    gy = (
        (lum[2:, :-2] + 2.0 * lum[2:, 1:-1] + lum[2:, 2:])
        - (lum[:-2, :-2] + 2.0 * lum[:-2, 1:-1] + lum[:-2, 2:])
    )
    magnitude = np.sqrt(gx * gx + gy * gy)
    strong = magnitude > threshold_fraction * _MAX_SOBEL_MAGNITUDE
    if not strong.any():
        return (0.0,) * 8
    angles = np.degrees(np.arctan2(gy[strong], gx[strong])) % 360.0
    bins = (angles // 45.0).astype(np.int64) % 8
    hist = np.bincount(bins, minlength=8).astype(np.float64)
    hist /= hist.sum()
    return tuple(float(v) for v in hist)


def _haar_level(plane: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One orthonormal Haar step; odd trailing rows/columns are truncated."""
    h, w = plane.shape
    plane = plane[: h - h % 2, : w - w % 2]
    root2 = math.sqrt(2.0)
    low_cols = (plane[:, 0::2] + plane[:, 1::2]) / root2
    high_cols = (plane[:, 0::2] - plane[:, 1::2]) / root2
    ll = (low_cols[0::2, :] + low_cols[1::2, :]) / root2
    lh = (low_cols[0::2, :] - low_cols[1::2, :]) / root2
    hl = (high_cols[0::2, :] + high_cols[1::2, :]) / root2
    hh = (high_cols[0::2, :] - high_cols[1::2, :]) / root2
    return ll, lh, hl, hh


def _energy_entropy(subband: np.ndarray) -> float:
    energy = (subband * subband).reshape(-1)
    total = float(energy.sum())
    if total <= 0.0:
        return 0.0
    p = energy / total
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def wavelet_entropy(block: RgbImage) -> tuple[float, ...]:
    """Entropy of the normalized squared coefficients of the six detail
    subbands of a 2-level Haar decomposition of luminance (LH, HL, HH per
    level, level 1 first)."""
    if block.width < 4 or block.height < 4:
        raise ValueError(f"block {block.width}x{block.height} too small for 2 wavelet levels")
    lum = _luminance(block)
    ll, lh1, hl1, hh1 = _haar_level(lum)
    _, lh2, hl2, hh2 = _haar_level(ll)
    return tuple(_energy_entropy(s) for s in (lh1, hl1, hh1, lh2, hl2, hh2))


def extract_block_features(
    image: RgbImage, image_id: str, grid_rows: int = 10, grid_cols: int = 10
) -> LocalFeatureSet:
    """One 23-dimensional vector (9 color + 8 edge + 6 texture) per grid block,
    blocks in row-major order."""
    vectors = []
    for block in partition_blocks(image, grid_rows, grid_cols):
        vectors.append(
            color_moments(block) + edge_direction_histogram(block) + wavelet_entropy(block)
        )
    return LocalFeatureSet(image_id, tuple(vectors))


def _lab(image: RgbImage) -> np.ndarray:
    """(h, w, 3) CIELAB under D65 with the standard sRGB transfer curve."""
    srgb = _rgb_unit(image)
    linear = np.where(srgb <= 0.04045, srgb / 12.92, ((srgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _SRGB_TO_XYZ.T
    t = xyz / _D65_WHITE
    epsilon = (6.0 / 29.0) ** 3
    f = np.where(t > epsilon, np.cbrt(t), t / (3.0 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lightness = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([lightness, a, b], axis=2)


def lab_signature(image: RgbImage) -> tuple[float, ...]:
    """Mean Lab triplet of each cell of a 4x4 grid, raster order, 48 values."""
    out: list[float] = []
    for block in partition_blocks(image, 4, 4):
        lab = _lab(block)
        for c in range(3):
            out.append(float(lab[..., c].mean()))
    return tuple(out)
