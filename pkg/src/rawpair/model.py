"""The joint demosaick/denoise network, dual-port (stereo pair) or
single-port, sharing one implementation.

Layout for the dual-port build: both mosaics are packed to 4 half-res
channels each and stacked with a constant noise-level plane (9 channels
in). A stack of K×K low-res blocks (conv + batch norm + ReLU, 2W channels
each) feeds a 1×1 projection block down to 24 channels (12 per input).
Each 12-channel half is sub-pixel-shuffled up to 3 full-res feature
channels, interleaved with 3-channel masked copies of its raw input
(12 channels total), run through one full-res K×K block, and finished by
an affine 1×1 combination down to RGB. The single-port build halves every
per-input quantity (5 in, width W, 12 projected, 6 at full res).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import BatchNormStats, Tensor
from .raw import bayer_masks

#: reference parameter count for the full-scale configuration, kept for
#: comparison logging only (the architecture leaves room for variation,
#: so the built count is reported next to it, never asserted)
FULL_SCALE_PARAM_TARGET = 2_246_146


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    depth: number of low-res blocks; width: channels per input port
    (a dual-port model runs 2*width); kernel: conv footprint, odd so
    padding preserves dims; noise_channel: append the constant
    noise-level plane to the packed stack.
    """

    depth: int = 4
    width: int = 16
    kernel: int = 3
    ports: int = 2
    noise_channel: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ModelError(f"depth must be >= 1, got {self.depth}")
        if self.width < 4:
            raise ModelError(f"width must be >= 4, got {self.width}")
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise ModelError(f"kernel must be odd and >= 3, got {self.kernel}")
        if self.ports not in (1, 2):
            raise ModelError(f"ports must be 1 or 2, got {self.ports}")

    @property
    def block_width(self) -> int:
        return self.width * self.ports

    @property
    def in_channels(self) -> int:
        return 4 * self.ports + (1 if self.noise_channel else 0)

    @property
    def projected_channels(self) -> int:
        return 12 * self.ports

    @property
    def fullres_in_channels(self) -> int:
        return 6 * self.ports

    @property
    def channel_audit(self) -> list[int]:
        """Channel counts at the stage boundaries, input to output."""
        return [self.in_channels, self.block_width, self.projected_channels,
                self.fullres_in_channels, self.block_width, 3]

    def to_dict(self) -> dict:
        return {"depth": self.depth, "width": self.width, "kernel": self.kernel,
                "ports": self.ports, "noise_channel": self.noise_channel}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


FULL_SCALE_CONFIG = ModelConfig(depth=15, width=64, kernel=3, ports=2)


class DemosaicDenoiseNet:
    """Parameter container plus the forward pass.

    A model instance is exclusively owned during a training step; eval-mode
    forward is read-only and safe to share.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 bn_stats: dict[str, BatchNormStats], dtype=np.float32):
        self.config = config
        self.params = params
        self.bn = bn_stats
        self.dtype = np.dtype(dtype)
        self._mask_cache: dict[tuple[int, int], np.ndarray] = {}
        audit = _audit_from_params(config, params)
        if audit != config.channel_audit:
            raise ModelError(
                f"channel audit mismatch: built {audit}, expected {config.channel_audit}")

    # -- plumbing -----------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def _masks(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._mask_cache:
            self._mask_cache[key] = bayer_masks(h, w).astype(self.dtype)
        return self._mask_cache[key]

    def _as_port(self, value, name: str) -> Tensor:
        if isinstance(value, Tensor):
            t = value
        else:
            arr = np.asarray(value, dtype=self.dtype)
            if arr.ndim == 2:
                arr = arr[None, None]
            elif arr.ndim == 3:
                arr = arr[:, None]
            t = Tensor(arr)
        if t.data.ndim != 4 or t.data.shape[1] != 1:
            raise ModelError(f"{name}: expected (B,1,H,W) plane, got {t.data.shape}")
        if t.data.dtype != self.dtype:
            if t.requires_grad:
                raise ModelError(f"{name}: dtype {t.data.dtype} does not match model "
                                 f"{self.dtype} (cannot cast a gradient input)")
            t = Tensor(t.data.astype(self.dtype))
        h, w = t.data.shape[2:]
        if h % 2 or w % 2:
            raise ModelError(f"{name}: dims must be even, got {h}x{w}")
        return t

    def _block(self, x: Tensor, name: str, train: bool) -> Tensor:
        weight = self.params[f"{name}.conv.weight"]
        pad = weight.data.shape[-1] // 2
        x = nn.conv2d(x, weight,
                      self.params[f"{name}.conv.bias"], stride=1, padding=pad)
        x = nn.batchnorm2d(x, self.params[f"{name}.bn.gamma"],
                           self.params[f"{name}.bn.beta"],
                           self.bn[f"{name}.bn"], training=train)
        return nn.relu(x)

    # -- forward ------------------------------------------------------

    def forward(self, m, w=None, noise_level: float = 0.0, train: bool = False) -> Tensor:
        """Reconstruct RGB from the primary mosaic and the warped secondary.

        m, w: (B,H,W)/(H,W) arrays or (B,1,H,W) tensors. A dual-port model
        requires w; a single-port model forbids it. Returns a (B,3,H,W)
        tensor, differentiable end to end.
        """
        cfg = self.config
        mt = self._as_port(m, "primary")
        ports = [mt]
        if cfg.ports == 2:
            if w is None:
                raise ModelError("dual-port model requires the secondary plane")
            wt = self._as_port(w, "secondary")
            if wt.data.shape != mt.data.shape:
                raise ModelError(
                    f"port shapes differ: {mt.data.shape} vs {wt.data.shape}")
            ports.append(wt)
        elif w is not None:
            raise ModelError("single-port model takes no secondary plane")

        b, _, h, wd = mt.data.shape
        parts = [nn.pixel_unshuffle(p, 2) for p in ports]
        if cfg.noise_channel:
            plane = np.full((b, 1, h // 2, wd // 2), noise_level, dtype=self.dtype)
            parts.append(Tensor(plane))
        x = nn.concat(parts, axis=1) if len(parts) > 1 else parts[0]

        for i in range(cfg.depth):
            x = self._block(x, f"block{i}", train)
        x = self._block(x, "proj", train)

        masks = self._masks(h, wd)
        stack = []
        for k, port in enumerate(ports):
            feats = nn.pixel_shuffle(nn.channel_slice(x, 12 * k, 12 * (k + 1)), 2)
            stack.extend([nn.mosaic_mask(port, masks), feats])
        x = nn.concat(stack, axis=1)

        x = self._block(x, "full", train)
        return nn.conv2d(x, self.params["head.conv.weight"],
                         self.params["head.conv.bias"], stride=1, padding=0)

    def reconstruct(self, m, w=None, noise_level: float = 0.0) -> np.ndarray:
        """Eval-mode forward returning a clipped (B,3,H,W) or (3,H,W) array."""
        squeeze = np.asarray(m).ndim == 2 and not isinstance(m, Tensor)
        out = self.forward(m, w, noise_level=noise_level, train=False)
        rgb = np.clip(out.data, 0.0, 1.0)
        return rgb[0] if squeeze else rgb


def _audit_from_params(config: ModelConfig, params: dict[str, Tensor]) -> list[int]:
    first = params["block0.conv.weight"].data.shape
    block = params[f"block{config.depth - 1}.conv.weight"].data.shape
    proj = params["proj.conv.weight"].data.shape
    full = params["full.conv.weight"].data.shape
    head = params["head.conv.weight"].data.shape
    return [first[1], block[0], proj[0], full[1], full[0], head[0]]


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> DemosaicDenoiseNet:
    """Initialize all parameters deterministically from the seed.

    Conv weights are Kaiming-uniform (fan-in); biases, batch-norm shifts
    start at zero, batch-norm scales at one.
    """
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(np.random.SeedSequence([0x7261, int(seed)]))
    params: dict[str, Tensor] = {}
    stats: dict[str, BatchNormStats] = {}

    def conv(name: str, cin: int, cout: int, k: int) -> None:
        bound = math.sqrt(6.0 / (cin * k * k))
        weight = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
        params[f"{name}.weight"] = Tensor(weight, requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def norm(name: str, c: int) -> None:
        params[f"{name}.gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        params[f"{name}.beta"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        stats[name] = BatchNormStats.create(c, dtype=dtype)

    width = config.block_width
    cin = config.in_channels
    for i in range(config.depth):
        conv(f"block{i}.conv", cin if i == 0 else width, width, config.kernel)
        norm(f"block{i}.bn", width)
    conv("proj.conv", width, config.projected_channels, 1)
    norm("proj.bn", config.projected_channels)
    conv("full.conv", config.fullres_in_channels, width, config.kernel)
    norm("full.bn", width)
    conv("head.conv", width, 3, 1)

    return DemosaicDenoiseNet(config, params, stats, dtype=dtype)


def count_parameters(model: DemosaicDenoiseNet) -> int:
    """Trainable scalars: conv weights/biases and batch-norm scale/shift.

    Running statistics are state, not parameters, and are excluded.
    """
    return int(sum(p.data.size for p in model.params.values()))
