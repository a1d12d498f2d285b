"""Finite-difference verification of every differentiable op.

The numeric side perturbs raw arrays and re-runs the forward computation
(central differences), fully independent of the recorded backward passes
it checks. Run in 64-bit; 32-bit finite differences are unreliable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .tensor import Tensor

LAYER_TOL = 1e-5
MODEL_TOL = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.rel_err < self.tol

    def __str__(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return f"[{status}] {self.name}: rel_err={self.rel_err:.3e} (tol {self.tol:.0e})"


def finite_difference(loss_fn: Callable[[], float],
                      arrays: Sequence[np.ndarray],
                      h: float = STEP) -> list[np.ndarray]:
    """Central-difference gradient of loss_fn w.r.t. each array.

    Arrays are perturbed in place and restored; loss_fn must recompute the
    loss from their current contents on every call.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            gf[i] = (lp - lm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| normalized by max(1, max|a|, max|n|)."""
    scale = max(1.0, float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_gradients(forward: Callable[[], Tensor],
                    wrt: dict[str, Tensor],
                    h: float = STEP) -> float:
    """Compare backward grads of a scalar-valued forward against FD.

    Returns the worst relative error over all `wrt` tensors.
    """
    for t in wrt.values():
        t.zero_grad()
    loss = forward()
    loss.backward()
    analytic = {k: t.grad.copy() for k, t in wrt.items()}
    worst = 0.0
    for k, t in wrt.items():
        numeric = finite_difference(lambda: float(forward().data), [t.data], h=h)[0]
        worst = max(worst, relative_error(analytic[k], numeric))
    return worst


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape).astype(np.float64), requires_grad=True)


def run_layer_checks(seed: int = 0, h: float = STEP) -> list[CheckResult]:
    """FD checks for every layer type on small random tensors."""
    from .tensor import mul_const

    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def head(out):
        return mul_const(out, probe).sum()

    # conv2d, stride 1 and stride 2
    for stride, padding, tag in ((1, 1, "conv2d/s1p1"), (2, 0, "conv2d/s2p0")):
        x = _rand(rng, 2, 3, 6, 6)
        w = _rand(rng, 4, 3, 3, 3)
        b = _rand(rng, 4)
        oh = (6 + 2 * padding - 3) // stride + 1
        probe = rng.uniform(-1, 1, (2, 4, oh, oh))
        err = check_gradients(lambda: head(F.conv2d(x, w, b, stride, padding)),
                              {"x": x, "w": w, "b": b}, h=h)
        results.append(CheckResult(tag, err, LAYER_TOL))

    # batchnorm, train and eval
    for training in (True, False):
        x = _rand(rng, 3, 4, 5, 5)
        gamma = _rand(rng, 4, lo=0.5, hi=1.5)
        beta = _rand(rng, 4)
        stats = F.BatchNormStats.create(4, dtype=np.float64)
        if not training:  # record stats once so eval mode is defined
            F.batchnorm2d(x, gamma, beta, stats, training=True)
        probe = rng.uniform(-1, 1, x.data.shape)
        err = check_gradients(
            lambda: head(F.batchnorm2d(x, gamma, beta, stats if not training else None,
                                       training=training)),
            {"x": x, "gamma": gamma, "beta": beta}, h=h)
        results.append(CheckResult(f"batchnorm2d/{'train' if training else 'eval'}",
                                   err, LAYER_TOL))

    # relu, keeping inputs away from the kink
    x = _rand(rng, 2, 3, 4, 4)
    x.data[np.abs(x.data) < 1e-2] = 0.1
    probe = rng.uniform(-1, 1, x.data.shape)
    err = check_gradients(lambda: head(F.relu(x)), {"x": x}, h=h)
    results.append(CheckResult("relu", err, LAYER_TOL))

    # pixel unshuffle/shuffle composition (pure permutations)
    x = _rand(rng, 1, 2, 4, 6)
    probe = rng.uniform(-1, 1, x.data.shape)
    err = check_gradients(
        lambda: head(F.pixel_shuffle(F.pixel_unshuffle(x, 2), 2)), {"x": x}, h=h)
    results.append(CheckResult("pixel_shuffle∘unshuffle", err, LAYER_TOL))

    # mse loss (both sides)
    a = _rand(rng, 2, 3, 4, 4)
    t = _rand(rng, 2, 3, 4, 4)
    err = check_gradients(lambda: F.mse_loss(a, t), {"pred": a, "target": t}, h=h)
    results.append(CheckResult("mse_loss", err, LAYER_TOL))

    # concat + channel slice
    a = _rand(rng, 2, 2, 3, 3)
    b = _rand(rng, 2, 3, 3, 3)
    probe = rng.uniform(-1, 1, (2, 2, 3, 3))
    err = check_gradients(
        lambda: head(F.channel_slice(F.concat([a, b], axis=1), 1, 3)),
        {"a": a, "b": b}, h=h)
    results.append(CheckResult("concat+channel_slice", err, LAYER_TOL))

    # mosaic mask
    x = _rand(rng, 2, 1, 4, 4)
    masks = (rng.random((3, 4, 4)) > 0.5).astype(np.float64)
    probe = rng.uniform(-1, 1, (2, 3, 4, 4))
    err = check_gradients(lambda: head(F.mosaic_mask(x, masks)), {"x": x}, h=h)
    results.append(CheckResult("mosaic_mask", err, LAYER_TOL))

    return results


def run_model_check(seed: int = 0, h: float = STEP) -> CheckResult:
    """End-to-end FD over every parameter of a micro dual-port model.

    Uses an 8×16 mosaic pair in 64-bit; checks loss gradients w.r.t. all
    trainable parameters at once.
    """
    from ..model import ModelConfig, build_model

    rng = np.random.default_rng(seed)
    config = ModelConfig(depth=1, width=4, kernel=3, ports=2)
    model = build_model(config, seed=seed, dtype=np.float64)
    m = rng.uniform(0.1, 0.9, (1, 8, 16))
    w = rng.uniform(0.1, 0.9, (1, 8, 16))
    target = Tensor(rng.uniform(0.1, 0.9, (1, 3, 8, 16)))

    def forward():
        out = model.forward(m, w, noise_level=0.3, train=True)
        return F.mse_loss(out, target)

    err = check_gradients(forward, model.params, h=h)
    return CheckResult("model/end-to-end", err, MODEL_TOL)


def run_suite(seed: int = 0, verbose: bool = False) -> tuple[list[CheckResult], float]:
    """Full check suite; returns (results, elapsed seconds)."""
    start = time.perf_counter()
    results = run_layer_checks(seed=seed)
    results.append(run_model_check(seed=seed))
    elapsed = time.perf_counter() - start
    if verbose:
        for r in results:
            print(r)
    return results, elapsed
