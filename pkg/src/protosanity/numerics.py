"""Image-space primitives: interpolation, smoothing, pixel selection and masking.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every function
here is pure: inputs are never modified in place.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import EmptySelectionError, InvalidArgumentError

# Keys cubic convolution parameter (matches the usual image-resize convention).
CUBIC_A = -0.75
DEFAULT_SIGMA = 1.0


class Rng:
    """Seeded random source with independent keyed substreams.

    Streams are PCG64 generators built from a ``numpy.random.SeedSequence``
    whose spawn key is ``(crc32(tag), *indices)``. Two calls with the same seed,
    tag and indices return generators producing identical streams, whatever
    else has been drawn in between.

    Parameters
    ----------
    seed : int
        Unsigned 64-bit seed.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if seed < 0 or seed >= 2**64:
            raise InvalidArgumentError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed

    def stream(self, tag: str, *indices: int) -> np.random.Generator:
        key = (zlib.crc32(tag.encode("utf-8")),) + tuple(int(i) for i in indices)
        if any(k < 0 for k in key):
            raise InvalidArgumentError("stream indices must be non-negative")
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=key)))

    def __repr__(self):
        return f"Rng(seed={self.seed})"


@dataclass(frozen=True)
class PixelMask:
    """Boolean per-pixel mask; ``True`` marks a selected pixel."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise InvalidArgumentError(f"mask must be 2-D, got shape {bits.shape}")
        bits = bits.copy()
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def empty(cls, height: int, width: int) -> "PixelMask":
        return cls(np.zeros((height, width), dtype=bool))


def _as_map(values, name="map") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidArgumentError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    return arr


def cubic_kernel(t, a: float = CUBIC_A):
    """Keys cubic convolution kernel evaluated at offsets ``t``."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def cubic_weights(n_in: int, n_out: int, align_corners: bool = False, a: float = CUBIC_A) -> np.ndarray:
    """Interpolation matrix of shape ``(n_out, n_in)`` for one axis.

    Source indices outside ``[0, n_in - 1]`` are clamped to the edge, so each
    row sums to one.
    """
    dst = np.arange(n_out, dtype=np.float64)
    if align_corners:
        src = dst * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros_like(dst)
    else:
        src = (dst + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src)
    frac = src - base
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for offset in (-1, 0, 1, 2):
        idx = np.clip(base.astype(np.int64) + offset, 0, n_in - 1)
        np.add.at(mat, (rows, idx), cubic_kernel(frac - offset, a))
    return mat


def bicubic_upsample(values, target, align_corners: bool = False) -> np.ndarray:
    """Enlarge a 2-D map to ``target = (H0, W0)`` with bicubic interpolation.

    Parameters
    ----------
    values : array-like of shape (H, W)
        Map to enlarge.
    target : tuple of int
        Output size, each extent at least the input extent.
    align_corners : bool, default=False
        Sampling convention. ``False`` maps pixel centres
        (``src = (dst + 0.5) * H / H0 - 0.5``); ``True`` maps the corner samples
        onto each other.

    Returns
    -------
    ndarray of shape (H0, W0)
    """
    arr = _as_map(values)
    h0, w0 = (int(t) for t in target)
    if h0 <= 0 or w0 <= 0:
        raise InvalidArgumentError(f"target size must be positive, got {target}")
    h, w = arr.shape
    if h0 < h or w0 < w:
        raise InvalidArgumentError(f"target {target} is smaller than the map {arr.shape}")
    rows = cubic_weights(h, h0, align_corners)
    cols = cubic_weights(w, w0, align_corners)
    return rows @ arr @ cols.T


def gaussian_kernel(size: int = 5, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Normalised 2-D Gaussian kernel of shape ``(size, size)``."""
    if sigma <= 0:
        raise InvalidArgumentError("sigma must be positive")
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur_5x5(values, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Convolve with a normalised 5x5 Gaussian, replicating edge pixels."""
    arr = _as_map(values)
    kernel = gaussian_kernel(5, sigma)
    padded = np.pad(arr, 2, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (5, 5))
    return np.einsum("ijkl,kl->ij", windows, kernel)


def _check_fraction(fraction):
    if not (0 < fraction <= 1):
        raise InvalidArgumentError(f"fraction must lie in (0, 1], got {fraction}")


def n_selected(fraction: float, n_pixels: int) -> int:
    """Number of pixels kept by a top-fraction selection: ``ceil(fraction * n)``."""
    # Guard against 0.07 * 100 == 7.000000000000001 style products.
    return min(n_pixels, int(math.ceil(round(fraction * n_pixels, 9))))


def salience_order(values) -> np.ndarray:
    """Flat pixel indices sorted by decreasing value, ties in row-major order."""
    arr = _as_map(values)
    return np.argsort(-arr.ravel(), kind="stable")


def top_fraction_mask(values, fraction: float) -> PixelMask:
    """Keep the ``ceil(fraction * H * W)`` highest-valued pixels."""
    _check_fraction(fraction)
    arr = _as_map(values)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("map contains non-finite values")
    k = n_selected(fraction, arr.size)
    bits = np.zeros(arr.size, dtype=bool)
    bits[salience_order(arr)[:k]] = True
    return PixelMask(bits.reshape(arr.shape))


def percentile_threshold_mask(values, q: float, method: str = "linear") -> PixelMask:
    """Keep every pixel whose value reaches the ``q``-th percentile."""
    if not (0 < q < 100):
        raise InvalidArgumentError(f"percentile must lie in (0, 100), got {q}")
    arr = _as_map(values)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("map contains non-finite values")
    threshold = np.percentile(arr, q, method=method)
    return PixelMask(arr >= threshold)


def bounding_box(mask: PixelMask) -> tuple[int, int, int, int]:
    """Tightest box ``(top, left, bottom, right)`` around the selected pixels, inclusive."""
    bits = mask.bits if isinstance(mask, PixelMask) else np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(bits.any(axis=1))
    if rows.size == 0:
        raise EmptySelectionError("cannot take the bounding box of an empty mask")
    cols = np.flatnonzero(bits.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def apply_deletion(image, mask: PixelMask) -> np.ndarray:
    """Colour the masked pixels black in every channel.

    ``image`` is a raw ``(C, H, W)`` image in [0, 1], before any normalisation;
    here ``True`` in ``mask`` marks a pixel to delete.
    """
    x = np.asarray(image, dtype=np.float64)
    bits = mask.bits if isinstance(mask, PixelMask) else np.asarray(mask, dtype=bool)
    if x.ndim != 3 or x.shape[1:] != bits.shape:
        raise InvalidArgumentError(f"mask {bits.shape} does not match image {x.shape}")
    out = x.copy()
    out[:, bits] = 0.0
    return out
