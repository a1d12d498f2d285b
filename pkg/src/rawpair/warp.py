"""Disparity-guided backward warping and a classical block-matching
disparity estimator.

Convention: the left image is the primary view M, the right is the
secondary S, rectified so x_left = x_right + d with d >= 0. Backward
warping therefore samples S at (y, x - D(y, x)) with linear interpolation
along x (rows are aligned in a rectified pair).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raw import BayerMosaic, _plane, pack_mosaic, unpack_mosaic


class WarpError(ValueError):
    pass


@dataclass
class DisparityMap:
    """Per-pixel horizontal disparity with a validity mask.

    Invalid pixels (e.g. sparse ground truth gaps) are excluded from all
    metrics and take the fill policy when warping.
    """

    values: np.ndarray          # (p, r) float, >= 0 where valid
    valid: np.ndarray           # (p, r) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise WarpError(
                f"disparity {self.values.shape} and mask {self.valid.shape} shapes differ")

    @classmethod
    def dense(cls, values: np.ndarray) -> "DisparityMap":
        values = np.asarray(values)
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class WarpResult:
    """Warped plane plus the mask of pixels that received a warped value."""

    values: np.ndarray
    coverage: np.ndarray
    fill: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _warp_plane(plane: np.ndarray, disp: np.ndarray, valid: np.ndarray):
    """Backward-sample one plane; returns (warped, coverage).

    Non-covered pixels are left at 0 for the caller's fill policy. Integer
    disparities reproduce source samples exactly (interpolation weight 0).
    """
    h, w = plane.shape
    xs = np.arange(w, dtype=np.float64)[None, :] - disp.astype(np.float64)
    coverage = valid & (xs >= 0.0) & (xs <= w - 1)
    x0 = np.floor(xs).astype(np.int64)
    frac = xs - x0
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    rows = np.arange(h)[:, None]
    warped = (1.0 - frac) * plane[rows, x0c] + frac * plane[rows, x1c]
    warped = np.where(coverage, warped, 0.0).astype(plane.dtype)
    return warped, coverage


def warp_backward(secondary, disparity: DisparityMap, mode: str = "raw",
                  fill: str = "primary", primary=None) -> WarpResult:
    """Warp the secondary mosaic onto the primary view.

    mode "raw" interpolates the flat mosaic directly; mode "packed" warps
    each of the 4 packed channels at half resolution with half the
    disparity (phase-preserving) and reassembles. Pixels that are invalid
    in the disparity map or sample out of bounds take the fill policy:
    "primary" copies the primary mosaic (required argument then), "zero"
    leaves zeros.
    """
    sec = _plane(secondary)
    if sec.shape != disparity.shape:
        raise WarpError(
            f"secondary {sec.shape} and disparity {disparity.shape} dims differ")
    if mode not in ("raw", "packed"):
        raise WarpError(f"unknown warp mode {mode!r}")
    if fill not in ("primary", "zero"):
        raise WarpError(f"unknown fill policy {fill!r}")
    if fill == "primary":
        if primary is None:
            raise WarpError("fill='primary' requires the primary mosaic")
        prim = _plane(primary)
        if prim.shape != sec.shape:
            raise WarpError(f"primary {prim.shape} and secondary {sec.shape} dims differ")

    if mode == "raw":
        warped, coverage = _warp_plane(sec, disparity.values, disparity.valid)
    else:
        packed = pack_mosaic(sec)
        out = np.empty_like(packed)
        cov = np.empty(packed.shape, dtype=bool)
        for ch, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            d_half = disparity.values[dy::2, dx::2] * 0.5
            v_half = disparity.valid[dy::2, dx::2]
            out[ch], cov[ch] = _warp_plane(packed[ch], d_half, v_half)
        warped = unpack_mosaic(out)
        coverage = unpack_mosaic(cov.astype(np.uint8)).astype(bool)

    if fill == "primary":
        warped = np.where(coverage, warped, prim).astype(sec.dtype)
    return WarpResult(values=warped, coverage=coverage, fill=fill)


def _box_sum(a: np.ndarray, radius: int) -> np.ndarray:
    """Sum over (2r+1)² windows via an integral image; borders are partial."""
    h, w = a.shape
    ii = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(np.cumsum(a, axis=0), axis=1, out=ii[1:, 1:])
    k = 2 * radius + 1
    padded = np.pad(ii, ((radius, radius + 1), (radius, radius + 1)), mode="edge")
    return (padded[k:h + k, k:w + k] - padded[k:h + k, :w] -
            padded[:h, k:w + k] + padded[:h, :w])


def estimate_disparity_blockmatch(left, right, max_disp: int,
                                  block: int = 9) -> DisparityMap:
    """SAD block matching on the packed green planes of a raw pair.

    Matching runs at half resolution on the mean of the two green
    channels; the winning offset is doubled and nearest-neighbor upsampled
    back to full resolution. Ties break toward the smallest disparity; a
    border of block//2 half-res pixels is marked invalid.
    """
    lp = _plane(left)
    rp = _plane(right)
    if lp.shape != rp.shape:
        raise WarpError(f"left {lp.shape} and right {rp.shape} dims differ")
    p, r = lp.shape
    if max_disp < 1:
        raise WarpError(f"max_disp must be >= 1, got {max_disp}")
    if max_disp >= r / 2:
        raise WarpError(f"max_disp {max_disp} too large for width {r}")
    if block < 3 or block % 2 == 0:
        raise WarpError(f"block must be odd and >= 3, got {block}")

    lpk = pack_mosaic(lp)
    rpk = pack_mosaic(rp)
    gl = 0.5 * (lpk[1] + lpk[2])
    gr = 0.5 * (rpk[1] + rpk[2])
    hh, hw = gl.shape
    half = block // 2

    cost = np.empty((max_disp + 1, hh, hw), dtype=np.float64)
    xs = np.arange(hw)[None, :]
    for d in range(max_disp + 1):
        diff = np.zeros_like(gl, dtype=np.float64)
        if d == 0:
            diff[:] = np.abs(gl - gr)
        else:
            diff[:, d:] = np.abs(gl[:, d:] - gr[:, :-d])
        sad = _box_sum(diff, half)
        if d > 0:
            # windows reaching into the unmatched strip are not comparable
            sad = np.where(xs >= d + half, sad, np.inf)
        cost[d] = sad

    best = np.argmin(cost, axis=0)  # first minimum → smallest disparity
    disp_half = best.astype(np.float32)

    valid_half = np.zeros((hh, hw), dtype=bool)
    if hh > 2 * half and hw > 2 * half:
        valid_half[half:hh - half, half:hw - half] = True

    disp_full = np.repeat(np.repeat(disp_half * 2.0, 2, axis=0), 2, axis=1)
    valid_full = np.repeat(np.repeat(valid_half, 2, axis=0), 2, axis=1)
    return DisparityMap(disp_full, valid_full)
