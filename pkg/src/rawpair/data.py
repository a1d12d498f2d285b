"""Stereo dataset loading, disparity PNG codec, and a synthetic layered
toy dataset with exact dense disparity.

Supported on-disk layouts (documented in the README):
  kitti:          root/image_2/*.png, root/image_3/*.png, root/disp_occ_0/*.png
  drivingstereo:  root/left/*.png, root/right/*.png, root/disparity/*.png
Disparity PNGs are 16-bit grayscale, value = disparity * 256, stored 0
means invalid.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .warp import DisparityMap

KITTI_DIRS = ("image_2", "image_3", "disp_occ_0")
DRIVINGSTEREO_DIRS = ("left", "right", "disparity")


class DatasetError(ValueError):
    pass


@dataclass
class StereoSample:
    """One rectified pair: left/right RGB ground truth plus primary-frame
    disparity. The left image is the primary view."""

    id: str
    left: np.ndarray            # (3, p, r) float32 in [0, 1]
    right: np.ndarray           # (3, p, r)
    disparity: DisparityMap
    source: str = "toy"

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise DatasetError(
                f"sample {self.id}: left {self.left.shape} vs right {self.right.shape}")
        if self.disparity.shape != self.left.shape[1:]:
            raise DatasetError(
                f"sample {self.id}: disparity {self.disparity.shape} does not match "
                f"image {self.left.shape[1:]}")


# -- PNG I/O ----------------------------------------------------------------


def read_rgb_png(path) -> np.ndarray:
    """8-bit RGB PNG → (3, p, r) float32 in [0, 1] (exact value/255)."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)) / np.float32(255.0)


def write_rgb_png(path, image: np.ndarray) -> None:
    """(3, p, r) floats → 8-bit RGB PNG; values are clipped to [0, 1]."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def read_gray16_png(path) -> np.ndarray:
    """16-bit grayscale PNG → uint16 array; rejects 8-bit input."""
    with Image.open(path) as img:
        if img.mode == "L" or (img.mode == "P"):
            raise DatasetError(f"{path}: expected 16-bit grayscale, got 8-bit ({img.mode})")
        if img.mode not in ("I", "I;16", "I;16B"):
            raise DatasetError(f"{path}: unsupported PNG mode {img.mode}")
        arr = np.asarray(img)
    if arr.dtype == np.int32:
        arr = arr.astype(np.uint16)
    return arr.astype(np.uint16)


def write_gray16_png(path, values: np.ndarray) -> None:
    arr = np.asarray(values).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path, format="PNG")


def decode_disparity_png(raw: np.ndarray) -> DisparityMap:
    """Devkit-convention decode: disparity = stored/256, stored 0 invalid."""
    raw = np.asarray(raw)
    if raw.dtype == np.uint8:
        raise DatasetError("disparity PNG must be 16-bit, got 8-bit data")
    if raw.ndim != 2:
        raise DatasetError(f"disparity must be single-channel, got shape {raw.shape}")
    values = raw.astype(np.float32) / np.float32(256.0)
    return DisparityMap(values, raw != 0)


def encode_disparity_png(disparity: DisparityMap) -> np.ndarray:
    """Inverse of `decode_disparity_png`; invalid pixels store 0."""
    stored = np.round(disparity.values * 256.0).astype(np.uint16)
    stored[~disparity.valid] = 0
    return stored


# -- dataset loading ---------------------------------------------------------


def load_stereo_dataset(root, layout: str = "kitti",
                        disp_dir: str | None = None) -> list[StereoSample]:
    """Load every sample under `root`, sorted by id.

    `disp_dir` overrides the disparity folder (e.g. disp_noc_0 for the
    non-occluded KITTI ground truth). Missing counterpart files raise an
    error naming the sample id. Loading never mutates files.
    """
    root = Path(root)
    if layout == "kitti":
        left_dir, right_dir, default_disp = KITTI_DIRS
    elif layout == "drivingstereo":
        left_dir, right_dir, default_disp = DRIVINGSTEREO_DIRS
    else:
        raise DatasetError(f"unknown layout {layout!r}; use kitti or drivingstereo")
    disp_dir = disp_dir or default_disp

    left_root = root / left_dir
    if not left_root.is_dir():
        raise DatasetError(f"missing directory {left_root}")
    samples = []
    for left_path in sorted(left_root.glob("*.png")):
        sid = left_path.stem
        right_path = root / right_dir / left_path.name
        disp_path = root / disp_dir / left_path.name
        if not right_path.exists():
            raise DatasetError(f"sample {sid}: missing right image {right_path}")
        if not disp_path.exists():
            raise DatasetError(f"sample {sid}: missing disparity {disp_path}")
        left = read_rgb_png(left_path)
        right = read_rgb_png(right_path)
        disp = decode_disparity_png(read_gray16_png(disp_path))
        if disp.shape != left.shape[1:]:
            raise DatasetError(
                f"sample {sid}: disparity {disp.shape} vs image {left.shape[1:]}")
        # enforce the invariant that valid disparities stay inside the frame
        disp.valid &= disp.values < left.shape[2]
        samples.append(StereoSample(sid, left, right, disp,
                                    source="kitti" if layout == "kitti" else "drivingstereo"))
    if not samples:
        raise DatasetError(f"no samples found under {root} ({layout} layout)")
    return samples


def write_dataset(samples: list[StereoSample], root, layout: str = "kitti") -> None:
    """Persist samples in a loadable layout (used by the toy generator)."""
    root = Path(root)
    if layout == "kitti":
        left_dir, right_dir, disp_dir = KITTI_DIRS
    elif layout == "drivingstereo":
        left_dir, right_dir, disp_dir = DRIVINGSTEREO_DIRS
    else:
        raise DatasetError(f"unknown layout {layout!r}")
    for name in (left_dir, right_dir, disp_dir):
        (root / name).mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_rgb_png(root / left_dir / f"{s.id}.png", s.left)
        write_rgb_png(root / right_dir / f"{s.id}.png", s.right)
        write_gray16_png(root / disp_dir / f"{s.id}.png", encode_disparity_png(s.disparity))


# -- synthetic toy scenes ------------------------------------------------------


def _upsample_grid(rng: np.random.Generator, channels: int, height: int,
                   width: int, cell: int | tuple[int, int],
                   lo: float, hi: float) -> np.ndarray:
    """Random low-res noise, bilinearly upsampled to (channels, h, w)."""
    cy, cx = cell if isinstance(cell, tuple) else (cell, cell)
    gh = max(2, height // cy + 1)
    gw = max(2, width // cx + 1)
    grid = rng.uniform(lo, hi, size=(channels, gh, gw))
    ys = np.linspace(0, gh - 1, height)
    xs = np.linspace(0, gw - 1, width)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    return ((1 - fy) * (1 - fx) * grid[:, y0][:, :, x0]
            + (1 - fy) * fx * grid[:, y0][:, :, x1]
            + fy * (1 - fx) * grid[:, y1][:, :, x0]
            + fy * fx * grid[:, y1][:, :, x1])


def _smooth_texture(rng: np.random.Generator, height: int, width: int,
                    cell: int, lo: float, hi: float) -> np.ndarray:
    """Photo-like layer texture: fine luminance detail under a color cast
    that is smooth at the Bayer scale yet decorrelates under horizontal
    shifts of a few pixels. Quantized to the 8-bit grid so PNG
    round-trips are exact."""
    luma = _upsample_grid(rng, 1, height, width, cell, lo, hi)
    tint = _upsample_grid(rng, 3, height, width, (cell * 8, cell * 2), 0.4, 1.0)
    tex = np.clip(luma * tint, 0.0, 1.0)
    return (np.round(tex * 255.0) / 255.0).astype(np.float32)


def generate_toy_dataset(count: int, size: tuple[int, int] = (64, 128),
                         seed: int = 0, max_disp: int = 16) -> list[StereoSample]:
    """Layered scenes with exact dense disparity.

    Each scene is a smooth textured background plane at an even disparity
    plus 1-3 textured rectangles at larger (unique, even) disparities. The
    right image shifts each layer by its disparity with correct occlusion
    (nearer layer wins); the disparity map is dense in the primary frame
    with pixels occluded in (or displaced out of) the right view marked
    invalid. Even disparities keep the Bayer phase intact, so warping the
    right mosaic with this ground truth reproduces the left mosaic exactly
    on the valid mask. Deterministic per seed.
    """
    p, r = size
    if p % 2 or r % 2:
        raise DatasetError(f"size must be even, got {p}x{r}")
    if max_disp % 2 or not 4 <= max_disp < r / 4:
        raise DatasetError(f"max_disp must be even, >= 4, and < width/4, got {max_disp}")
    if count < 1:
        raise DatasetError(f"count must be >= 1, got {count}")

    samples = []
    ext = r + max_disp  # layer textures extend past the right edge
    for idx in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([0x746F79, seed, idx]))
        # keep every shift a sizable fraction of max_disp so the pair is
        # genuinely misaligned everywhere, as in real stereo rigs (unlike
        # burst captures, whose offsets are small)
        bg_lo = max(1, (5 * max_disp) // 8 // 2)
        bg_hi = max_disp // 2 - 1
        bg_disp = int(rng.integers(bg_lo, bg_hi + 1)) * 2
        choices = np.arange(bg_disp + 2, max_disp + 1, 2)
        n_rects = min(int(rng.integers(1, 4)), len(choices))
        rect_disps = sorted(rng.choice(choices, size=n_rects, replace=False).tolist())

        layers = [(bg_disp, None, _smooth_texture(rng, p, ext, cell=3, lo=0.05, hi=0.95))]
        for d in rect_disps:
            w = int(rng.integers(r // 6, r // 2 + 1))
            h = int(rng.integers(p // 4, 3 * p // 4))
            x0 = int(rng.integers(0, r - w))
            y0 = int(rng.integers(0, p - h))
            tex = _smooth_texture(rng, p, ext, cell=2, lo=0.0, hi=1.0)
            layers.append((int(d), (y0, y0 + h, x0, x0 + w), tex))

        left = np.zeros((3, p, r), np.float32)
        right = np.zeros((3, p, r), np.float32)
        disp_left = np.zeros((p, r), np.float32)
        disp_right = np.zeros((p, r), np.float32)  # winner depth in the right frame

        for d, extent, tex in layers:  # ascending disparity: nearest painted last
            if extent is None:
                # background plane: fills both frames (texture extends past
                # the left frame's right edge by max_disp columns)
                region = np.ones((p, r), dtype=bool)
                shifted = np.ones((p, r), dtype=bool)
            else:
                y0, y1, x0, x1 = extent
                region = np.zeros((p, r), dtype=bool)
                region[y0:y1, x0:x1] = True
                # a finite layer occupies columns xl - d of the right frame
                shifted = np.zeros((p, r), dtype=bool)
                shifted[:, : r - d] = region[:, d:]
            left[:, region] = tex[:, :, :r][:, region]
            disp_left[region] = d
            right_tex = tex[:, :, d:d + r]
            right[:, shifted] = right_tex[:, shifted]
            disp_right[shifted] = d

        # a left pixel is valid if its right-frame landing spot exists and
        # is won by the same layer (compare by unique disparity value)
        xs = np.arange(r)[None, :] - disp_left.astype(int)
        in_bounds = xs >= 0
        xs_c = np.clip(xs, 0, r - 1)
        rows = np.arange(p)[:, None]
        valid = in_bounds & (disp_right[rows, xs_c] == disp_left)

        samples.append(StereoSample(
            id=f"{idx:06d}", left=left, right=right,
            disparity=DisparityMap(disp_left, valid), source="toy"))
    return samples
