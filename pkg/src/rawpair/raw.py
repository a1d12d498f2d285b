"""Raw Bayer pipeline: mosaic synthesis, packing/masking, sensor noise,
and image quality metrics.

Conventions used throughout the package:
  - RGB images are float arrays shaped (3, p, r) with values in [0, 1]
    (8-bit I/O scaled by 1/255), even dims.
  - The single supported color filter layout is RGGB with red at (0, 0);
    crops must start at even offsets to preserve the phase.
  - Raw synthesis samples sRGB intensities directly (no linearization).
  - Noise can push values above 1.0 and is kept there; only display and
    8/16-bit export clip to [0, 1]. Negative noise clamps to 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

RGGB = "RGGB"

#: finite stand-in for +inf dB when MSE is exactly zero
PSNR_EXACT_MATCH = math.inf


class RawPipelineError(ValueError):
    pass


@dataclass
class BayerMosaic:
    """Single-channel raw measurement with its color-filter tag."""

    values: np.ndarray  # (p, r), float, >= 0
    pattern: str = RGGB

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise RawPipelineError(f"mosaic must be 2-D, got shape {self.values.shape}")
        if self.pattern != RGGB:
            raise RawPipelineError(f"unsupported pattern {self.pattern!r}; only RGGB")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _plane(mosaic) -> np.ndarray:
    return mosaic.values if isinstance(mosaic, BayerMosaic) else np.asarray(mosaic)


def _require_even(h: int, w: int, what: str) -> None:
    if h % 2 or w % 2:
        raise RawPipelineError(f"{what} requires even dims, got {h}x{w}")


@lru_cache(maxsize=8)
def bayer_masks(height: int, width: int) -> np.ndarray:
    """(3, p, r) 0/1 float masks selecting the R, G, and B sites of RGGB."""
    ys, xs = np.mgrid[0:height, 0:width]
    even_y, even_x = (ys % 2 == 0), (xs % 2 == 0)
    masks = np.stack([
        even_y & even_x,              # R
        even_y ^ even_x,              # G (either green site)
        ~even_y & ~even_x,            # B
    ]).astype(np.float32)
    masks.setflags(write=False)
    return masks


def bayer_mosaic(image: np.ndarray, pattern: str = RGGB) -> BayerMosaic:
    """Sample an RGB image down to a single measurement per pixel.

    Pixel (y, x) keeps R when y and x are both even, B when both odd, and
    G otherwise. Pure sampling; no filtering.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise RawPipelineError(f"expected (3, p, r) image, got shape {image.shape}")
    _, p, r = image.shape
    _require_even(p, r, "bayer_mosaic")
    if pattern != RGGB:
        raise RawPipelineError(f"unsupported pattern {pattern!r}")
    masks = bayer_masks(p, r).astype(image.dtype)
    return BayerMosaic((image * masks).sum(axis=0), pattern)


def mask_mosaic(mosaic) -> np.ndarray:
    """Lift a mosaic to 3 channels, each sample in its own color channel.

    The three channels partition the mosaic: summing them reproduces it
    exactly.
    """
    plane = _plane(mosaic)
    p, r = plane.shape
    masks = bayer_masks(p, r).astype(plane.dtype)
    return plane[None] * masks


def pack_mosaic(mosaic) -> np.ndarray:
    """Rearrange each 2×2 cell into 4 half-resolution channels (R,G1,G2,B).

    Row-major cell order, i.e. channels are (m[0,0], m[0,1], m[1,0],
    m[1,1]) of each cell; `unpack_mosaic` is the exact inverse.
    """
    plane = _plane(mosaic)
    p, r = plane.shape
    _require_even(p, r, "pack_mosaic")
    return np.ascontiguousarray(
        plane.reshape(p // 2, 2, r // 2, 2).transpose(1, 3, 0, 2).reshape(4, p // 2, r // 2))


def unpack_mosaic(packed: np.ndarray) -> np.ndarray:
    """Inverse of `pack_mosaic`: (4, p/2, r/2) → (p, r)."""
    packed = np.asarray(packed)
    if packed.ndim != 3 or packed.shape[0] != 4:
        raise RawPipelineError(f"expected (4, p/2, r/2), got shape {packed.shape}")
    _, hp, wp = packed.shape
    return np.ascontiguousarray(
        packed.reshape(2, 2, hp, wp).transpose(2, 0, 3, 1).reshape(2 * hp, 2 * wp))


# -- sensor noise ---------------------------------------------------------

NOISE_KINDS = ("gaussian", "poisson", "poisson-gaussian")


@dataclass(frozen=True)
class NoiseModel:
    """Shot/read noise description.

    photons is the mean photon count at full scale (drives the Poisson
    component); sigma is the Gaussian std in normalized units.
    """

    kind: str = "poisson"
    photons: float = 10.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise RawPipelineError(f"unknown noise kind {self.kind!r}; one of {NOISE_KINDS}")
        if self.kind != "gaussian" and self.photons <= 0:
            raise RawPipelineError(f"photon count must be > 0, got {self.photons}")
        if self.sigma < 0:
            raise RawPipelineError(f"sigma must be >= 0, got {self.sigma}")

    @property
    def level(self) -> float:
        """Scalar effective noise level fed to the network's extra channel."""
        if self.kind == "gaussian":
            return self.sigma
        if self.kind == "poisson":
            return 1.0 / math.sqrt(self.photons)
        return math.sqrt(1.0 / self.photons + self.sigma ** 2)


def add_noise(clean, model: NoiseModel, seed) -> np.ndarray:
    """Corrupt a clean image/mosaic in [0, 1] with the given noise model.

    Poisson: y = Poisson(photons * x) / photons; Gaussian: y = x + N(0, σ²);
    the mixed model applies both. Negatives clamp to 0, values above 1 are
    retained. `seed` may be an int or a numpy Generator; a fixed seed gives
    bit-identical output.
    """
    values = _plane(clean)
    if values.size and (values.min() < 0 or values.max() > 1):
        raise RawPipelineError("add_noise expects clean values in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = values.astype(np.float64, copy=True)
    if model.kind in ("poisson", "poisson-gaussian"):
        out = rng.poisson(model.photons * out).astype(np.float64) / model.photons
    if model.kind in ("gaussian", "poisson-gaussian") and model.sigma > 0:
        out += rng.normal(0.0, model.sigma, size=out.shape)
    np.maximum(out, 0.0, out=out)
    return out.astype(values.dtype if values.dtype.kind == "f" else np.float32)


# -- metrics ---------------------------------------------------------------


def psnr(output: np.ndarray, reference: np.ndarray, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio, 10·log10(MAX²/MSE), in dB.

    Returns +inf when the MSE is exactly zero.
    """
    output = np.asarray(output)
    reference = np.asarray(reference)
    if output.shape != reference.shape:
        raise RawPipelineError(f"psnr: shape mismatch {output.shape} vs {reference.shape}")
    if max_value <= 0:
        raise RawPipelineError(f"psnr: max_value must be > 0, got {max_value}")
    diff = output.astype(np.float64) - reference.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_EXACT_MATCH
    return 10.0 * math.log10(max_value * max_value / mse)


# -- helpers shared by evaluation and the CLI -------------------------------


def crop_even(image: np.ndarray) -> np.ndarray:
    """Near-center crop to even dims with even (phase-preserving) offsets."""
    image = np.asarray(image)
    h, w = image.shape[-2:]
    h2, w2 = h - h % 2, w - w % 2
    oy = ((h - h2) // 2) & ~1
    ox = ((w - w2) // 2) & ~1
    return image[..., oy:oy + h2, ox:ox + w2]


def bilinear_demosaic(mosaic) -> np.ndarray:
    """Quick linear-interpolation demosaic for previews (not the network)."""
    plane = _plane(mosaic).astype(np.float32)
    p, r = plane.shape
    masks = bayer_masks(p, r)
    padded_m = np.pad(plane, 1, mode="reflect")
    padded_w = np.pad(masks, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    kernel = np.array([[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]], np.float32)
    out = np.empty((3, p, r), np.float32)
    for c in range(3):
        num = np.zeros((p, r), np.float32)
        den = np.zeros((p, r), np.float32)
        for dy in range(3):
            for dx in range(3):
                wgt = kernel[dy, dx]
                num += wgt * padded_m[dy:dy + p, dx:dx + r] * padded_w[c, dy:dy + p, dx:dx + r]
                den += wgt * padded_w[c, dy:dy + p, dx:dx + r]
        out[c] = num / np.maximum(den, 1e-8)
    return np.clip(out, 0.0, 1.0)
