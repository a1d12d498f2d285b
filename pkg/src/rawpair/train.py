"""Two-stage optimization, patch sampling, evaluation, and the ablation
harness.

Stage 1 feeds the secondary port an independently noised copy of the
primary mosaic (the zero-disparity surrogate); stage 2 swaps in the warped
secondary per the configured variant. Input variants:

  baseline-single   single-port model, primary mosaic only
  same-noise         stage-1 inputs kept through evaluation (upper bound)
  unwarped-pair      raw secondary fed directly, no warping
  warped-gt          secondary warped with ground-truth disparity
  warped-estimated   secondary warped with block-matched disparity

All randomness is keyed by (seed, epoch, step, index, role) so runs are
reproducible and checkpoint-resume is bit-exact in sequential mode. Fresh
noise is drawn for every patch of every epoch.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import (
    Checkpoint,
    adam_state_from_checkpoint,
    checkpoint_from_model,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .model import DemosaicDenoiseNet, ModelConfig, build_model
from .nn import Adam, AutodiffError, Tensor, mse_loss
from .raw import NoiseModel, add_noise, bayer_mosaic, crop_even, psnr
from .warp import DisparityMap, estimate_disparity_blockmatch, warp_backward

VARIANTS = ("baseline-single", "same-noise", "unwarped-pair",
            "warped-gt", "warped-estimated")

# seed-stream tags keep the patch plan, training noise, and eval noise
# in independent deterministic streams
_TAG_PLAN, _TAG_TRAIN, _TAG_EVAL = 0x706C, 0x7472, 0x6576


class TrainingError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries epoch/lr diagnostics."""


@dataclass
class ExperimentConfig:
    """Everything that defines one training run."""

    variant: str = "warped-gt"
    stage: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    patch: tuple[int, int] = (256, 512)
    batch: int = 8
    lr: float = 1e-4
    lr_decay_factor: float = 10.0
    lr_decay_period: int = 100
    lr_warmup_epochs: int = 0
    epochs: int = 100
    patience: int = 20
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0
    warp_mode: str = "raw"
    fill: str = "primary"
    split: str = "kitti-160-40"
    split_ratio: float = 0.8
    split_seed: int = 0
    steps_per_epoch: Optional[int] = None
    val_noise_seed: int = 9999
    val_max_samples: Optional[int] = None
    blockmatch_max_disp: int = 10
    blockmatch_block: int = 9
    init_from: Optional[str] = None
    allow_cold_start: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise TrainingError(f"unknown variant {self.variant!r}; one of {VARIANTS}")
        if self.stage not in (1, 2):
            raise TrainingError(f"stage must be 1 or 2, got {self.stage}")
        if self.patch[0] % 2 or self.patch[1] % 2:
            raise TrainingError(f"patch dims must be even, got {self.patch}")
        if self.batch < 1:
            raise TrainingError(f"batch must be >= 1, got {self.batch}")
        if self.lr <= 0:
            raise TrainingError(f"lr must be > 0, got {self.lr}")
        if self.variant == "baseline-single" and self.model.ports != 1:
            raise TrainingError("baseline-single requires a single-port model config")
        if self.variant != "baseline-single" and self.model.ports != 2:
            raise TrainingError(f"variant {self.variant} requires a dual-port model config")

    def to_dict(self) -> dict:
        d = {
            "variant": self.variant, "stage": self.stage,
            "model": self.model.to_dict(), "patch": list(self.patch),
            "batch": self.batch, "lr": self.lr,
            "lr_decay_factor": self.lr_decay_factor,
            "lr_decay_period": self.lr_decay_period,
            "lr_warmup_epochs": self.lr_warmup_epochs,
            "epochs": self.epochs, "patience": self.patience,
            "noise": {"kind": self.noise.kind, "photons": self.noise.photons,
                      "sigma": self.noise.sigma},
            "seed": self.seed, "warp_mode": self.warp_mode, "fill": self.fill,
            "split": self.split, "split_ratio": self.split_ratio,
            "split_seed": self.split_seed, "steps_per_epoch": self.steps_per_epoch,
            "val_noise_seed": self.val_noise_seed,
            "val_max_samples": self.val_max_samples,
            "blockmatch_max_disp": self.blockmatch_max_disp,
            "blockmatch_block": self.blockmatch_block,
            "init_from": self.init_from, "allow_cold_start": self.allow_cold_start,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        d["patch"] = tuple(d["patch"])
        d["noise"] = NoiseModel(**d["noise"])
        return cls(**d)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    val_psnr: float
    lr: float


@dataclass
class TrainReport:
    variant: str
    stage: int
    seed: int
    epochs: list[EpochStats]
    best_epoch: int
    best_psnr: float
    best_checkpoint_id: str
    wall_clock_s: float

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "stage": self.stage, "seed": self.seed,
            "best_epoch": self.best_epoch, "best_psnr": self.best_psnr,
            "best_checkpoint_id": self.best_checkpoint_id,
            "wall_clock_s": self.wall_clock_s,
            "epochs": [{"epoch": e.epoch, "loss": e.loss,
                        "val_psnr": e.val_psnr, "lr": e.lr} for e in self.epochs],
        }


# -- dataset splitting --------------------------------------------------------


def split_dataset(samples: Sequence, scheme: str = "kitti-160-40",
                  ratio: float = 0.8, seed: int = 0):
    """Disjoint, exhaustive, deterministic (train, test) split.

    "kitti-160-40" takes the first 160 samples by sorted id for training;
    "ratio" shuffles with the given seed and splits at the ratio.
    """
    samples = list(samples)
    if not samples:
        raise TrainingError("cannot split an empty dataset")
    if scheme == "kitti-160-40":
        ordered = sorted(samples, key=lambda s: s.id)
        if len(ordered) <= 160:
            raise TrainingError(
                f"kitti-160-40 needs more than 160 samples, got {len(ordered)}")
        return ordered[:160], ordered[160:]
    if scheme == "ratio":
        ordered = sorted(samples, key=lambda s: s.id)
        rng = np.random.default_rng(np.random.SeedSequence([_TAG_PLAN, seed]))
        perm = rng.permutation(len(ordered))
        cut = int(round(len(ordered) * ratio))
        if cut == 0 or cut == len(ordered):
            raise TrainingError(f"ratio {ratio} leaves an empty split")
        train = [ordered[i] for i in sorted(perm[:cut])]
        test = [ordered[i] for i in sorted(perm[cut:])]
        return train, test
    raise TrainingError(f"unknown split scheme {scheme!r}")


# -- patch sampling -------------------------------------------------------------


def _patch_plan(sizes: Sequence[tuple[int, int]], patch: tuple[int, int],
                batch: int, seed: int, epoch: int, step: int):
    ph, pw = patch
    for h, w in sizes:
        if ph > h or pw > w:
            raise TrainingError(f"image {h}x{w} smaller than patch {ph}x{pw}")
    rng = np.random.default_rng(np.random.SeedSequence([_TAG_PLAN, seed, epoch, step]))
    plan = []
    for _ in range(batch):
        idx = int(rng.integers(0, len(sizes)))
        h, w = sizes[idx]
        oy = 2 * int(rng.integers(0, (h - ph) // 2 + 1))
        ox = 2 * int(rng.integers(0, (w - pw) // 2 + 1))
        plan.append((idx, oy, ox))
    return plan


def sample_patch_batch(planesets: Sequence[dict], patch: tuple[int, int],
                       batch: int, seed: int, epoch: int, step: int = 0):
    """Crop congruent even-offset windows from full-size planes.

    planesets is a sequence of name → array mappings whose trailing two
    dims are the (shared) image size. Sample choice and top-left offsets
    are uniform per (seed, epoch, step); offsets are even so the Bayer
    phase is preserved. Returns (batch dict of stacked crops, plan) where
    plan lists the chosen (sample index, oy, ox) per element.
    """
    if not planesets:
        raise TrainingError("sample_patch_batch: empty planesets")
    keys = list(planesets[0].keys())
    if patch[0] % 2 or patch[1] % 2:
        raise TrainingError(f"patch dims must be even, got {patch}")
    sizes = [np.asarray(ps[keys[0]]).shape[-2:] for ps in planesets]
    for ps, size in zip(planesets, sizes):
        for k in keys:
            if np.asarray(ps[k]).shape[-2:] != size:
                raise TrainingError(f"plane {k!r} size differs from its sample's size")
    plan = _patch_plan(sizes, patch, batch, seed, epoch, step)
    ph, pw = patch
    out = {k: [] for k in keys}
    for idx, oy, ox in plan:
        for k in keys:
            plane = np.asarray(planesets[idx][k])
            out[k].append(plane[..., oy:oy + ph, ox:ox + pw])
    return {k: np.stack(v) for k, v in out.items()}, plan


# -- input construction ----------------------------------------------------------


@dataclass
class _Planes:
    """Clean per-sample planes cached once per training run."""

    mosaic_left: np.ndarray
    mosaic_right: np.ndarray
    disparity: DisparityMap
    rgb_left: np.ndarray


def _input_policy(variant: str, stage: int) -> str:
    if variant == "baseline-single":
        return "single"
    if stage == 1:
        return "same-noise"
    return variant


def _make_ports(planes: _Planes, policy: str, cfg: ExperimentConfig,
                rng_m: np.random.Generator, rng_s: np.random.Generator):
    """Noise the primary and build the secondary port per policy."""
    m_noisy = add_noise(planes.mosaic_left, cfg.noise, rng_m)
    if policy == "single":
        return m_noisy, None
    if policy == "same-noise":
        return m_noisy, add_noise(planes.mosaic_left, cfg.noise, rng_s)
    s_noisy = add_noise(planes.mosaic_right, cfg.noise, rng_s)
    if policy == "unwarped-pair":
        return m_noisy, s_noisy
    if policy == "warped-gt":
        disp = planes.disparity
    elif policy == "warped-estimated":
        disp = estimate_disparity_blockmatch(
            m_noisy, s_noisy, cfg.blockmatch_max_disp, cfg.blockmatch_block)
    else:
        raise TrainingError(f"unknown input policy {policy!r}")
    warped = warp_backward(s_noisy, disp, mode=cfg.warp_mode, fill=cfg.fill,
                           primary=m_noisy if cfg.fill == "primary" else None)
    return m_noisy, warped.values


def _training_batch(cache: list[_Planes], cfg: ExperimentConfig, policy: str,
                    epoch: int, step: int):
    sizes = [p.mosaic_left.shape for p in cache]
    plan = _patch_plan(sizes, cfg.patch, cfg.batch, cfg.seed, epoch, step)
    ph, pw = cfg.patch
    ms, ports, targets = [], [], []
    for i, (idx, oy, ox) in enumerate(plan):
        rng_m = np.random.default_rng(
            np.random.SeedSequence([_TAG_TRAIN, cfg.seed, epoch, step, i, 0]))
        rng_s = np.random.default_rng(
            np.random.SeedSequence([_TAG_TRAIN, cfg.seed, epoch, step, i, 1]))
        m_noisy, port2 = _make_ports(cache[idx], policy, cfg, rng_m, rng_s)
        ms.append(m_noisy[oy:oy + ph, ox:ox + pw])
        if port2 is not None:
            ports.append(port2[oy:oy + ph, ox:ox + pw])
        targets.append(cache[idx].rgb_left[:, oy:oy + ph, ox:ox + pw])
    return (np.stack(ms), np.stack(ports) if ports else None, np.stack(targets))


def _build_cache(samples) -> list[_Planes]:
    cache = []
    for s in samples:
        left = crop_even(s.left)
        right = crop_even(s.right)
        disp = DisparityMap(crop_even(s.disparity.values), crop_even(s.disparity.valid))
        cache.append(_Planes(
            mosaic_left=bayer_mosaic(left).values,
            mosaic_right=bayer_mosaic(right).values,
            disparity=disp,
            rgb_left=left.astype(np.float32)))
    return cache


# -- evaluation --------------------------------------------------------------------


@dataclass
class SampleScore:
    id: str
    psnr: float


@dataclass
class EvalResult:
    variant: str
    noise_seed: int
    mean_psnr: float
    rows: list[SampleScore]

    def to_dict(self) -> dict:
        return {"variant": self.variant, "noise_seed": self.noise_seed,
                "mean_psnr": self.mean_psnr,
                "rows": [{"id": r.id, "psnr": r.psnr} for r in self.rows]}


def evaluate(model: DemosaicDenoiseNet, samples, variant: str, noise_seed: int,
             cfg: ExperimentConfig | None = None,
             max_samples: Optional[int] = None) -> EvalResult:
    """Mean PSNR of eval-mode reconstructions on full (even-cropped) images.

    Deterministic given the noise seed; outputs are clipped to [0, 1] and
    compared against the left ground truth with MAX = 1.
    """
    if not samples:
        raise TrainingError("evaluate: empty dataset")
    cfg = cfg or ExperimentConfig(variant=variant, model=model.config)
    policy = _input_policy(variant, stage=2)
    if (policy == "single") != (model.config.ports == 1):
        raise TrainingError(
            f"variant {variant!r} does not match a {model.config.ports}-port model")
    rows = []
    subset = samples[:max_samples] if max_samples else samples
    for sidx, s in enumerate(subset):
        left = crop_even(s.left)
        right = crop_even(s.right)
        disp = DisparityMap(crop_even(s.disparity.values), crop_even(s.disparity.valid))
        planes = _Planes(bayer_mosaic(left).values, bayer_mosaic(right).values,
                         disp, left)
        rng_m = np.random.default_rng(
            np.random.SeedSequence([_TAG_EVAL, noise_seed, sidx, 0]))
        rng_s = np.random.default_rng(
            np.random.SeedSequence([_TAG_EVAL, noise_seed, sidx, 1]))
        m_noisy, port2 = _make_ports(planes, policy, cfg, rng_m, rng_s)
        out = model.reconstruct(m_noisy, port2, noise_level=cfg.noise.level)
        rows.append(SampleScore(s.id, psnr(out, left, max_value=1.0)))
    return EvalResult(variant, noise_seed, float(np.mean([r.psnr for r in rows])), rows)


# -- training loop -------------------------------------------------------------------


def _schedule_lr(cfg: ExperimentConfig, epoch: int) -> float:
    if epoch < cfg.lr_warmup_epochs:
        return cfg.lr * (epoch + 1) / (cfg.lr_warmup_epochs + 1)
    return cfg.lr / (cfg.lr_decay_factor ** (epoch // cfg.lr_decay_period))


def train(cfg: ExperimentConfig, samples, out_dir=None,
          init_model: DemosaicDenoiseNet | None = None,
          resume_from=None):
    """Run one training job; returns (best model, report).

    Stage 2 must start from a stage-1 checkpoint (`init_from`/`init_model`)
    unless `allow_cold_start` is set. When `out_dir` is given, `last.ckpt`
    (live state, resumable) and `best.ckpt` (best validation PSNR) are
    maintained there. `resume_from` continues a previous run from its
    last.ckpt bit-exactly.
    """
    start_time = time.perf_counter()
    train_samples, test_samples = split_dataset(
        samples, cfg.split, ratio=cfg.split_ratio, seed=cfg.split_seed)
    cache = _build_cache(train_samples)
    policy = _input_policy(cfg.variant, cfg.stage)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    best_psnr = -math.inf
    best_epoch = -1
    epochs_without_improve = 0
    history: list[EpochStats] = []
    best_snapshot: Checkpoint | None = None

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model = model_from_checkpoint(ckpt)
        adam = Adam(model.params, lr=cfg.lr)
        state = adam_state_from_checkpoint(ckpt)
        if state is not None:
            adam.load_state(state)
        meta = ckpt.metadata
        start_epoch = int(meta["next_epoch"])
        best_psnr = float(meta["best_psnr"])
        best_epoch = int(meta["best_epoch"])
        epochs_without_improve = int(meta["epochs_without_improve"])
        best_path = Path(resume_from).parent / "best.ckpt"
        if best_path.exists():
            best_snapshot = load_checkpoint(best_path)
    else:
        if init_model is not None:
            model = _clone_model(init_model)
        elif cfg.init_from is not None:
            model = model_from_checkpoint(load_checkpoint(cfg.init_from))
        elif cfg.stage == 2 and not cfg.allow_cold_start:
            raise TrainingError(
                "stage 2 requires a stage-1 checkpoint (init_from) or allow_cold_start")
        else:
            model = build_model(cfg.model, seed=cfg.seed)
        if model.config != cfg.model:
            raise TrainingError(
                f"initial model config {model.config} does not match requested {cfg.model}")
        adam = Adam(model.params, lr=cfg.lr)

    steps = cfg.steps_per_epoch or max(1, math.ceil(len(cache) / cfg.batch))

    for epoch in range(start_epoch, cfg.epochs):
        lr = _schedule_lr(cfg, epoch)
        losses = []
        for step in range(steps):
            m, port2, target = _training_batch(cache, cfg, policy, epoch, step)
            try:
                out = model.forward(m, port2, noise_level=cfg.noise.level, train=True)
                loss = mse_loss(out, Tensor(target.astype(model.dtype)))
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step} (lr={lr:g})")
                adam.zero_grad()
                loss.backward()
                adam.step(lr)
            except AutodiffError as exc:
                raise TrainingDiverged(
                    f"numerical failure at epoch {epoch} step {step} (lr={lr:g}): {exc}"
                ) from exc
            losses.append(value)

        val = evaluate(model, test_samples, cfg.variant if policy != "same-noise"
                       else "same-noise", cfg.val_noise_seed, cfg,
                       max_samples=cfg.val_max_samples)
        history.append(EpochStats(epoch, float(np.mean(losses)), val.mean_psnr, lr))

        if val.mean_psnr > best_psnr:
            best_psnr = val.mean_psnr
            best_epoch = epoch
            epochs_without_improve = 0
            best_snapshot = checkpoint_from_model(
                model, metadata={"epoch": epoch, "val_psnr": val.mean_psnr,
                                 "seed": cfg.seed, "variant": cfg.variant,
                                 "stage": cfg.stage})
            if out_dir is not None:
                save_checkpoint(out_dir / "best.ckpt", best_snapshot)
        else:
            epochs_without_improve += 1

        if out_dir is not None:
            live = checkpoint_from_model(model, optimizer=adam, metadata={
                "next_epoch": epoch + 1, "best_psnr": best_psnr,
                "best_epoch": best_epoch,
                "epochs_without_improve": epochs_without_improve,
                "seed": cfg.seed, "variant": cfg.variant, "stage": cfg.stage})
            save_checkpoint(out_dir / "last.ckpt", live)

        if cfg.patience and epochs_without_improve >= cfg.patience:
            break

    if best_snapshot is None:  # zero-epoch run: return the initial state
        best_snapshot = checkpoint_from_model(model, metadata={"epoch": -1})
    best_model = model_from_checkpoint(best_snapshot, dtype=model.dtype)
    report = TrainReport(
        variant=cfg.variant, stage=cfg.stage, seed=cfg.seed, epochs=history,
        best_epoch=best_epoch, best_psnr=best_psnr,
        best_checkpoint_id=f"epoch{best_epoch:04d}",
        wall_clock_s=time.perf_counter() - start_time)
    return best_model, report


def _clone_model(model: DemosaicDenoiseNet) -> DemosaicDenoiseNet:
    return model_from_checkpoint(checkpoint_from_model(model), dtype=model.dtype)


# -- ablation harness ------------------------------------------------------------------


@dataclass
class AblationRow:
    variant: str
    dataset: str
    mean_psnr: float
    delta_pct: float


@dataclass
class AblationReport:
    rows: list[AblationRow]
    metadata: dict

    def to_dict(self) -> dict:
        return {"rows": [{"variant": r.variant, "dataset": r.dataset,
                          "mean_psnr": r.mean_psnr, "delta_pct": r.delta_pct}
                         for r in self.rows],
                "metadata": self.metadata}


# desk-scale defaults, sized for the 64x128 toy dataset
DESK_MODEL = ModelConfig(depth=4, width=16, kernel=3, ports=2)
DESK_MODEL_SINGLE = ModelConfig(depth=4, width=16, kernel=3, ports=1)
DESK_PRESET = {
    "patch": (32, 64),
    "batch": 8,
    "lr": 2e-3,
    "lr_decay_factor": 10.0,
    "lr_decay_period": 12,
    "patience": 0,  # fixed budgets at desk scale
    "val_max_samples": 20,
    "epochs_stage1": 10,
    "epochs_stage2": 8,
}


def desk_config(variant: str, seed: int, stage: int, epochs: int,
                noise: NoiseModel | None = None, **overrides) -> ExperimentConfig:
    preset = {k: v for k, v in DESK_PRESET.items() if not k.startswith("epochs_")}
    preset.update(overrides)
    model = DESK_MODEL_SINGLE if variant == "baseline-single" else DESK_MODEL
    model = preset.pop("model", model)
    return ExperimentConfig(
        variant=variant, stage=stage, model=model, epochs=epochs,
        noise=noise or NoiseModel("poisson", photons=10.0), seed=seed, **preset)


def ablate(samples, dataset_name: str, seed: int, out_dir=None,
           epochs_stage1: int | None = None, epochs_stage2: int | None = None,
           eval_noise_seed: int = 4242, progress=None, **overrides) -> AblationReport:
    """Train and evaluate the four ablation variants under one seed.

    Shares a single stage-1 run between `warped-gt` and `same-noise`;
    `unwarped-pair` and `baseline-single` train cold for the combined
    budget so every row sees the same total number of epochs. Reported
    delta is 100*(v - baseline)/baseline, baseline row first.
    """
    e1 = epochs_stage1 or DESK_PRESET["epochs_stage1"]
    e2 = epochs_stage2 or DESK_PRESET["epochs_stage2"]
    log = progress or (lambda msg: None)

    def run(variant, stage, epochs, init=None, cold=False):
        cfg = desk_config(variant, seed, stage, epochs, **overrides)
        cfg = replace(cfg, allow_cold_start=cold)
        sub = None if out_dir is None else Path(out_dir) / variant.replace("-", "_")
        log(f"training {variant} (stage {stage}, {epochs} epochs)")
        return train(cfg, samples, out_dir=sub, init_model=init)

    stage1_model, _ = run("warped-gt", stage=1, epochs=e1)
    results: dict[str, float] = {}
    models = {}
    for variant, stage, epochs, init, cold in (
            ("baseline-single", 1, e1 + e2, None, False),
            ("unwarped-pair", 2, e1 + e2, None, True),
            ("warped-gt", 2, e2, stage1_model, False),
            ("same-noise", 2, e2, stage1_model, False)):
        model, _ = run(variant, stage, epochs, init=init, cold=cold)
        cfg = desk_config(variant, seed, stage, epochs, **overrides)
        ev = evaluate(model, split_dataset(samples, cfg.split, cfg.split_ratio,
                                           cfg.split_seed)[1],
                      variant, eval_noise_seed, cfg)
        results[variant] = ev.mean_psnr
        models[variant] = model
        log(f"{variant}: {ev.mean_psnr:.2f} dB")

    base = results["baseline-single"]
    rows = [AblationRow(v, dataset_name, results[v],
                        100.0 * (results[v] - base) / base)
            for v in ("baseline-single", "unwarped-pair", "warped-gt", "same-noise")]
    meta = {"seed": seed, "dataset": dataset_name,
            "epochs_stage1": e1, "epochs_stage2": e2,
            "eval_noise_seed": eval_noise_seed}
    return AblationReport(rows=rows, metadata=meta)
