"""Differentiable image ops: convolution, batch norm, ReLU, sub-pixel
rearrangement, concatenation/slicing, masking, and the L2 loss.

All ops take and return `Tensor`s (see `tensor.py`) and work on
(batch, channels, height, width) arrays. Convolution is cross-correlation
(no kernel flip), so a plain quadruple-loop reference matches it directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import AutodiffError, Tensor, apply_op


# -- convolution --------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Lower padded input (B,C,Hp,Wp) to (B, C*k*k, oh*ow) patch columns."""
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, k, k, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return view.reshape(b, c * k * k, oh * ow)


def _corr2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int,
            want_cols: bool = False):
    """Raw cross-correlation; returns (out, cols or None)."""
    b, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    cols = _im2col(xp, k, stride, oh, ow)
    out = np.matmul(w.reshape(cout, -1), cols).reshape(b, cout, oh, ow)
    return out, (cols if want_cols else None)


def _dilate(g: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return g
    b, c, h, w = g.shape
    out = np.zeros((b, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=g.dtype)
    out[:, :, ::stride, ::stride] = g
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with bias.

    Shapes: x (B, C_in, H, W), weight (C_out, C_in, K, K), bias (C_out,).
    Output spatial dims are floor((H + 2*padding - K)/stride) + 1.
    Differentiable w.r.t. x, weight, and bias.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise AutodiffError(
            f"conv2d: expected 4-D input and weight, got {x.data.shape} and {weight.data.shape}")
    b, cin, h, wd = x.data.shape
    cout, wcin, k, k2 = weight.data.shape
    if k != k2:
        raise AutodiffError(f"conv2d: kernel must be square, got {k}x{k2}")
    if cin != wcin:
        raise AutodiffError(
            f"conv2d: input has {cin} channels but weight expects {wcin} "
            f"(input {x.data.shape}, weight {weight.data.shape})")
    if bias.data.shape != (cout,):
        raise AutodiffError(
            f"conv2d: bias shape {bias.data.shape} does not match {cout} output channels")
    if stride < 1 or padding < 0:
        raise AutodiffError(f"conv2d: invalid stride={stride} or padding={padding}")
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise AutodiffError(
            f"conv2d: kernel {k} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")

    out, cols = _corr2d(x.data, weight.data, stride, padding, want_cols=True)
    out += bias.data[:, None, None]
    oh, ow = out.shape[2:]

    def bw(g):
        gf = g.reshape(b, cout, oh * ow)
        db = gf.sum(axis=(0, 2))
        dw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.data.shape)
        # input gradient: correlate the dilated upstream grad with the
        # flipped, channel-transposed kernel, then drop the padding
        gd = _dilate(g, stride)
        gp = np.pad(gd, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        wt = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        core, _ = _corr2d(gp, wt, 1, 0)
        hp, wp = h + 2 * padding, wd + 2 * padding
        if core.shape[2:] != (hp, wp):
            full = np.zeros((b, cin, hp, wp), dtype=g.dtype)
            full[:, :, :core.shape[2], :core.shape[3]] = core
            core = full
        dx = core[:, :, padding:padding + h, padding:padding + wd]
        return dx, dw, db

    return apply_op("conv2d", out, (x, weight, bias), bw)


# -- batch normalization -------------------------------------------------


@dataclass
class BatchNormStats:
    """Running per-channel statistics for eval-mode normalization.

    The first recorded batch copies batch statistics verbatim; later
    batches blend with `momentum`. Variance is the biased estimator.
    """

    mean: np.ndarray
    var: np.ndarray
    count: int = 0

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormStats":
        return cls(mean=np.zeros(channels, dtype=dtype),
                   var=np.ones(channels, dtype=dtype), count=0)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                stats: BatchNormStats | None, training: bool,
                momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization with affine scale/shift.

    Train mode normalizes by the batch mean/variance over (B, H, W) and
    updates `stats`; eval mode normalizes by the running statistics. Eval
    before any batch has been recorded is an error.
    """
    if x.data.ndim != 4:
        raise AutodiffError(f"batchnorm2d: expected 4-D input, got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise AutodiffError(
            f"batchnorm2d: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match {c} channels")
    if eps <= 0:
        raise AutodiffError(f"batchnorm2d: eps must be > 0, got {eps}")

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if stats is not None:
            if stats.count == 0:
                stats.mean[:] = mu
                stats.var[:] = var
            else:
                stats.mean += momentum * (mu - stats.mean)
                stats.var += momentum * (var - stats.var)
            stats.count += 1
    else:
        if stats is None or stats.count == 0:
            raise AutodiffError("batchnorm2d: eval mode before any running stats recorded")
        mu = stats.mean.astype(x.data.dtype, copy=False)
        var = stats.var.astype(x.data.dtype, copy=False)

    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gg = g * gamma.data[None, :, None, None]
        if training:
            mean_gg = gg.mean(axis=(0, 2, 3), keepdims=True)
            mean_ggx = (gg * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = inv[None, :, None, None] * (gg - mean_gg - xhat * mean_ggx)
        else:
            dx = gg * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return apply_op("batchnorm2d", out, (x, gamma, beta), bw)


# -- activations and losses ----------------------------------------------


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); gradient passes only where x > 0."""
    mask = x.data > 0
    return apply_op("relu", np.where(mask, x.data, x.data.dtype.type(0)), (x,),
                    lambda g: (g * mask,))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every element.

    Averages over batch, channels, and pixels; the per-channel divisor is
    a constant factor relative to a pixels-only mean and is absorbed by
    the learning rate.
    """
    if pred.data.shape != target.data.shape:
        raise AutodiffError(
            f"mse_loss: shape mismatch {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).mean(dtype=diff.dtype))

    def bw(g):
        scale = g * diff.dtype.type(2.0 / n)
        d = scale * diff
        return d, -d

    return apply_op("mse_loss", out, (pred, target), bw)


# -- sub-pixel rearrangement ----------------------------------------------


def pixel_unshuffle(x: Tensor, factor: int = 2) -> Tensor:
    """(B,C,H,W) → (B,C*f²,H/f,W/f), row-major over each f×f cell.

    Output channel c*f² + dy*f + dx holds x[c, y*f+dy, x*f+dx]; a 2×2 cell
    [[a,b],[c,d]] becomes channels (a,b,c,d). Exact inverse of
    `pixel_shuffle`; a pure permutation, hence exactly differentiable.
    """
    b, c, h, w = _check_4d(x, "pixel_unshuffle")
    f = factor
    if h % f or w % f:
        raise AutodiffError(
            f"pixel_unshuffle: spatial dims {h}x{w} not divisible by factor {f}")
    out = (x.data.reshape(b, c, h // f, f, w // f, f)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(b, c * f * f, h // f, w // f))
    return apply_op("pixel_unshuffle", np.ascontiguousarray(out), (x,),
                    lambda g: (_shuffle_raw(g, f),))


def pixel_shuffle(x: Tensor, factor: int = 2) -> Tensor:
    """(B,C,H,W) → (B,C/f²,H*f,W*f); inverse of `pixel_unshuffle`."""
    b, c, h, w = _check_4d(x, "pixel_shuffle")
    f = factor
    if c % (f * f):
        raise AutodiffError(
            f"pixel_shuffle: channel count {c} not divisible by factor²={f * f}")
    return apply_op("pixel_shuffle", _shuffle_raw(x.data, f), (x,),
                    lambda g: (_unshuffle_raw(g, f),))


def _shuffle_raw(a: np.ndarray, f: int) -> np.ndarray:
    b, c, h, w = a.shape
    out = (a.reshape(b, c // (f * f), f, f, h, w)
           .transpose(0, 1, 4, 2, 5, 3)
           .reshape(b, c // (f * f), h * f, w * f))
    return np.ascontiguousarray(out)


def _unshuffle_raw(a: np.ndarray, f: int) -> np.ndarray:
    b, c, h, w = a.shape
    out = (a.reshape(b, c, h // f, f, w // f, f)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(b, c * f * f, h // f, w // f))
    return np.ascontiguousarray(out)


def _check_4d(x: Tensor, op: str) -> tuple[int, int, int, int]:
    if x.data.ndim != 4:
        raise AutodiffError(f"{op}: expected 4-D input, got shape {x.data.shape}")
    return x.data.shape


# -- structural ops --------------------------------------------------------


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along `axis`; gradient splits back to the inputs."""
    if not tensors:
        raise AutodiffError("concat: empty input list")
    dtype = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dtype:
            raise AutodiffError(f"concat: dtype mismatch {t.data.dtype} vs {dtype}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return apply_op("concat", out, tuple(tensors), bw)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Select channels [start, stop) of a 4-D tensor."""
    _, c, _, _ = _check_4d(x, "channel_slice")
    if not (0 <= start < stop <= c):
        raise AutodiffError(f"channel_slice: [{start}, {stop}) out of range for {c} channels")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def bw(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return apply_op("channel_slice", out, (x,), bw)


def mosaic_mask(x: Tensor, masks: np.ndarray) -> Tensor:
    """Spread a single-channel plane into per-mask channels.

    x is (B,1,H,W); masks is a constant (C,H,W) 0/1 array. Output channel
    c holds x * masks[c], so summing output channels recovers x wherever
    the masks partition the plane.
    """
    if x.data.ndim != 4 or x.data.shape[1] != 1:
        raise AutodiffError(f"mosaic_mask: expected (B,1,H,W) input, got {x.data.shape}")
    m = np.asarray(masks, dtype=x.data.dtype)
    if m.ndim != 3 or m.shape[1:] != x.data.shape[2:]:
        raise AutodiffError(
            f"mosaic_mask: masks {m.shape} do not match input plane {x.data.shape[2:]}")
    out = x.data * m[None]

    def bw(g):
        return ((g * m[None]).sum(axis=1, keepdims=True),)

    return apply_op("mosaic_mask", out, (x,), bw)
