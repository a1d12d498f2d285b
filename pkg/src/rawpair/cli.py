"""Batch command-line front end.

Subcommands: synth, warp, disparity, train, eval, ablate, toygen,
gradcheck. Every run writes a manifest.json with the fully resolved
configuration; re-running from a manifest reproduces the artifacts
bit-exactly in sequential mode (--threads 1), except recorded wall-clock
durations. Progress goes to stderr; machine-readable output goes to files
and stdout. Exit codes: 0 success, 1 usage error, 2 runtime failure.

This module stays import-light so --threads can pin the BLAS thread count
before numpy loads.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

_THREAD_ENV = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
               "NUMEXPR_NUM_THREADS")

DATA_ROOT_ENV = "RAWPAIR_DATA_ROOT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _apply_threads(argv: list[str]) -> None:
    if "--threads" not in argv:
        return
    try:
        n = int(argv[argv.index("--threads") + 1])
    except (IndexError, ValueError):
        raise UsageError("--threads requires an integer")
    if n < 1:
        raise UsageError("--threads must be >= 1")
    if "numpy" in sys.modules:
        _log("warning: numpy already imported; --threads cannot pin BLAS threads")
        return
    for var in _THREAD_ENV:
        os.environ[var] = str(n)


# -- config/manifest plumbing ---------------------------------------------------


def _load_config_file(path: str, command: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    if isinstance(doc, dict) and "config" in doc and "command" in doc:
        if doc["command"] != command:
            raise UsageError(
                f"manifest {path} was written by '{doc['command']}', not '{command}'")
        doc = doc["config"]
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return doc


def _resolve(args: argparse.Namespace, defaults: dict, command: str) -> dict:
    """defaults <- config file <- explicitly passed flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config, command)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        resolved.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _write_manifest(out_dir: Path, command: str, config: dict) -> None:
    doc = {"command": command, "config": config,
           "seeds": {k: v for k, v in config.items() if "seed" in k}}
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _out_dir(config: dict) -> Path:
    out = config.get("out")
    if not out:
        raise UsageError("--out is required")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _commit_id() -> str:
    import subprocess

    try:
        return subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                              capture_output=True, text=True, timeout=5,
                              cwd=Path(__file__).parent).stdout.strip() or "unknown"
    except OSError:
        return "unknown"


# -- dataset source ---------------------------------------------------------------


def _load_samples(config: dict):
    from .data import generate_toy_dataset, load_stereo_dataset

    dataset = config.get("dataset") or os.environ.get(DATA_ROOT_ENV)
    if not dataset:
        raise UsageError(f"--dataset is required (or set {DATA_ROOT_ENV})")
    if dataset == "toy":
        h, w = config["toy_size"]
        return generate_toy_dataset(config["toy_count"], size=(h, w),
                                    seed=config["toy_seed"],
                                    max_disp=config["toy_max_disp"]), "toy"
    return load_stereo_dataset(dataset, layout=config["layout"],
                               disp_dir=config.get("disp_dir")), dataset


_DATASET_DEFAULTS = {
    "dataset": None, "layout": "kitti", "disp_dir": None,
    "toy_count": 200, "toy_size": [64, 128], "toy_max_disp": 16, "toy_seed": 0,
}


def _add_dataset_flags(p: _Parser) -> None:
    p.add_argument("--dataset", help="dataset root, or 'toy' for the synthetic set")
    p.add_argument("--layout", choices=["kitti", "drivingstereo"])
    p.add_argument("--disp-dir", dest="disp_dir",
                   help="override the disparity folder (e.g. disp_noc_0)")
    p.add_argument("--toy-count", dest="toy_count", type=int)
    p.add_argument("--toy-size", dest="toy_size", type=_size)
    p.add_argument("--toy-max-disp", dest="toy_max_disp", type=int)
    p.add_argument("--toy-seed", dest="toy_seed", type=int)


def _size(text: str) -> list[int]:
    try:
        h, w = text.lower().split("x")
        return [int(h), int(w)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")


# -- noise/experiment flag groups ---------------------------------------------------


_NOISE_DEFAULTS = {"noise_kind": "poisson", "photons": 10.0, "sigma": 0.0}


def _add_noise_flags(p: _Parser) -> None:
    p.add_argument("--noise-kind", dest="noise_kind",
                   choices=["gaussian", "poisson", "poisson-gaussian"])
    p.add_argument("--photons", type=float)
    p.add_argument("--sigma", type=float)


def _noise_model(config: dict):
    from .raw import NoiseModel

    return NoiseModel(config["noise_kind"], photons=config["photons"],
                      sigma=config["sigma"])


# -- PNG helpers for raw mosaics -------------------------------------------------------


def _read_mosaic16(path: str):
    import numpy as np

    from .data import read_gray16_png

    return read_gray16_png(path).astype(np.float32) / np.float32(65535.0)


def _write_mosaic16(path, values) -> None:
    import numpy as np

    from .data import write_gray16_png

    clipped = np.clip(values, 0.0, 1.0)
    write_gray16_png(path, np.round(clipped * 65535.0).astype(np.uint16))


# -- subcommands ------------------------------------------------------------------------


_SYNTH_DEFAULTS = {**_DATASET_DEFAULTS, **_NOISE_DEFAULTS, "seed": 0,
                   "limit": None, "out": None}


def cmd_synth(config: dict) -> int:
    import numpy as np

    from .data import write_rgb_png
    from .raw import add_noise, bayer_mosaic, bilinear_demosaic, crop_even

    out = _out_dir(config)
    samples, _ = _load_samples(config)
    if config["limit"]:
        samples = samples[:config["limit"]]
    noise = _noise_model(config)
    for sidx, sample in enumerate(samples):
        rng_m = np.random.default_rng(
            np.random.SeedSequence([config["seed"], sidx, 0]))
        rng_s = np.random.default_rng(
            np.random.SeedSequence([config["seed"], sidx, 1]))
        primary = add_noise(bayer_mosaic(crop_even(sample.left)).values, noise, rng_m)
        secondary = add_noise(bayer_mosaic(crop_even(sample.right)).values, noise, rng_s)
        _write_mosaic16(out / f"{sample.id}_primary_raw.png", primary)
        _write_mosaic16(out / f"{sample.id}_secondary_raw.png", secondary)
        write_rgb_png(out / f"{sample.id}_preview.png", bilinear_demosaic(primary))
        _log(f"synth {sample.id}")
    _write_manifest(out, "synth", config)
    return 0


_WARP_DEFAULTS = {"secondary": None, "disparity": None, "primary": None,
                  "fill": "primary", "mode": "raw", "out": None}


def cmd_warp(config: dict) -> int:
    import numpy as np

    from .data import read_gray16_png, decode_disparity_png, write_rgb_png
    from .warp import warp_backward

    if not config["secondary"] or not config["disparity"]:
        raise UsageError("--secondary and --disparity are required")
    if config["fill"] == "primary" and not config["primary"]:
        raise UsageError("--fill primary requires --primary")
    out = _out_dir(config)
    secondary = _read_mosaic16(config["secondary"])
    disparity = decode_disparity_png(read_gray16_png(config["disparity"]))
    primary = _read_mosaic16(config["primary"]) if config["primary"] else None
    result = warp_backward(secondary, disparity, mode=config["mode"],
                           fill=config["fill"], primary=primary)
    _write_mosaic16(out / "warped.png", result.values)
    from PIL import Image

    Image.fromarray((result.coverage * np.uint8(255)), mode="L").save(
        out / "coverage.png", format="PNG")
    _write_manifest(out, "warp", config)
    _log(f"warped {config['secondary']} -> {out / 'warped.png'} "
         f"(coverage {result.coverage.mean():.1%})")
    return 0


_DISPARITY_DEFAULTS = {"left": None, "right": None, "max_disp": 10,
                       "block": 9, "out": None}


def cmd_disparity(config: dict) -> int:
    from .data import encode_disparity_png, write_gray16_png
    from .figures import save_disparity_preview
    from .warp import estimate_disparity_blockmatch

    if not config["left"] or not config["right"]:
        raise UsageError("--left and --right are required")
    out = _out_dir(config)
    left = _read_mosaic16(config["left"])
    right = _read_mosaic16(config["right"])
    disp = estimate_disparity_blockmatch(left, right, config["max_disp"],
                                         config["block"])
    write_gray16_png(out / "disparity.png", encode_disparity_png(disp))
    save_disparity_preview(disp, out / "disparity_preview.png")
    _write_manifest(out, "disparity", config)
    _log(f"estimated disparity -> {out / 'disparity.png'}")
    return 0


_MODEL_DEFAULTS = {"depth": 4, "width": 16, "kernel": 3}

_TRAIN_DEFAULTS = {
    **_DATASET_DEFAULTS, **_NOISE_DEFAULTS, **_MODEL_DEFAULTS,
    "variant": "warped-gt", "stage": 1, "epochs": 10, "batch": 8,
    "patch": [32, 64], "lr": 2e-3, "lr_decay_factor": 10.0,
    "lr_decay_period": 40, "patience": 0, "seed": 0,
    "warp_mode": "raw", "fill": "primary", "split": "kitti-160-40",
    "split_ratio": 0.8, "split_seed": 0, "steps_per_epoch": None,
    "val_noise_seed": 9999, "val_max_samples": 20,
    "bm_max_disp": 10, "bm_block": 9,
    "init_from": None, "cold_start": False, "resume": None, "out": None,
}


def _experiment_config(config: dict):
    from .model import ModelConfig
    from .train import ExperimentConfig

    ports = 1 if config["variant"] == "baseline-single" else 2
    model = ModelConfig(depth=config["depth"], width=config["width"],
                        kernel=config["kernel"], ports=ports)
    return ExperimentConfig(
        variant=config["variant"], stage=config["stage"], model=model,
        patch=tuple(config["patch"]), batch=config["batch"], lr=config["lr"],
        lr_decay_factor=config["lr_decay_factor"],
        lr_decay_period=config["lr_decay_period"], epochs=config["epochs"],
        patience=config["patience"], noise=_noise_model(config),
        seed=config["seed"], warp_mode=config["warp_mode"], fill=config["fill"],
        split=config["split"], split_ratio=config["split_ratio"],
        split_seed=config["split_seed"], steps_per_epoch=config["steps_per_epoch"],
        val_noise_seed=config["val_noise_seed"],
        val_max_samples=config["val_max_samples"],
        blockmatch_max_disp=config["bm_max_disp"],
        blockmatch_block=config["bm_block"], init_from=config["init_from"],
        allow_cold_start=config["cold_start"])


def _write_epochs_csv(report, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_psnr", "lr"])
        for e in report.epochs:
            writer.writerow([e.epoch, f"{e.loss:.8f}", f"{e.val_psnr:.6f}", f"{e.lr:g}"])


def cmd_train(config: dict) -> int:
    from .checkpoint import save_checkpoint, checkpoint_from_model
    from .figures import save_training_curves
    from .train import train

    out = _out_dir(config)
    samples, _ = _load_samples(config)
    cfg = _experiment_config(config)
    _log(f"training {cfg.variant} stage {cfg.stage} for {cfg.epochs} epochs")
    model, report = train(cfg, samples, out_dir=out, resume_from=config["resume"])
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    _write_epochs_csv(report, out / "epochs.csv")
    save_training_curves(report, out / "curves.png")
    _write_manifest(out, "train", config)
    _log(f"best validation PSNR {report.best_psnr:.2f} dB at epoch {report.best_epoch}")
    print(json.dumps({"best_psnr": report.best_psnr, "best_epoch": report.best_epoch}))
    return 0


_EVAL_DEFAULTS = {
    **_DATASET_DEFAULTS, **_NOISE_DEFAULTS,
    "checkpoint": None, "variant": "warped-gt", "noise_seed": 4242,
    "warp_mode": "raw", "fill": "primary", "bm_max_disp": 10, "bm_block": 9,
    "split": None, "split_ratio": 0.8, "split_seed": 0,
    "max_samples": None, "out": None,
    "depth": None, "width": None, "kernel": None,
}


def cmd_eval(config: dict) -> int:
    from .checkpoint import load_checkpoint, model_from_checkpoint
    from .figures import save_psnr_bars
    from .train import ExperimentConfig, evaluate, split_dataset

    if not config["checkpoint"]:
        raise UsageError("--checkpoint is required")
    out = _out_dir(config)
    ckpt = load_checkpoint(config["checkpoint"])
    diffs = []
    for key in ("depth", "width", "kernel"):
        wanted = config[key]
        actual = getattr(ckpt.config, key)
        if wanted is not None and wanted != actual:
            diffs.append(f"{key}: checkpoint has {actual}, flags ask {wanted}")
    if diffs:
        raise UsageError("checkpoint/config mismatch: " + "; ".join(diffs))
    model = model_from_checkpoint(ckpt)

    samples, _ = _load_samples(config)
    if config["split"]:
        samples = split_dataset(samples, config["split"], config["split_ratio"],
                                config["split_seed"])[1]
    cfg = ExperimentConfig(
        variant=config["variant"], stage=2, model=model.config,
        noise=_noise_model(config), warp_mode=config["warp_mode"],
        fill=config["fill"], blockmatch_max_disp=config["bm_max_disp"],
        blockmatch_block=config["bm_block"], allow_cold_start=True)
    result = evaluate(model, samples, config["variant"], config["noise_seed"],
                      cfg, max_samples=config["max_samples"])

    (out / "eval.json").write_text(json.dumps(result.to_dict(), indent=2))
    with open(out / "per_sample.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "psnr_db"])
        for row in result.rows:
            writer.writerow([row.id, f"{row.psnr:.6f}"])
    save_psnr_bars(result, out / "psnr.png")
    _write_manifest(out, "eval", config)
    _log(f"mean PSNR {result.mean_psnr:.2f} dB over {len(result.rows)} samples")
    print(json.dumps({"mean_psnr": result.mean_psnr, "samples": len(result.rows)}))
    return 0


_ABLATE_DEFAULTS = {
    **_DATASET_DEFAULTS, **_NOISE_DEFAULTS,
    "seed": 7, "epochs_stage1": None, "epochs_stage2": None,
    "eval_noise_seed": 4242, "out": None,
}


def cmd_ablate(config: dict) -> int:
    from .figures import save_ablation_chart
    from .train import ablate

    out = _out_dir(config)
    samples, dataset_name = _load_samples(config)
    noise = _noise_model(config)
    report = ablate(samples, dataset_name, seed=config["seed"], out_dir=out,
                    epochs_stage1=config["epochs_stage1"],
                    epochs_stage2=config["epochs_stage2"],
                    eval_noise_seed=config["eval_noise_seed"],
                    noise=noise, progress=_log)
    report.metadata["commit"] = _commit_id()
    report.metadata["noise"] = {"kind": noise.kind, "photons": noise.photons,
                                "sigma": noise.sigma}

    (out / "ablation.json").write_text(json.dumps(report.to_dict(), indent=2))
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "dataset", "mean_psnr_db", "delta_pct_vs_baseline"])
        for row in report.rows:
            writer.writerow([row.variant, row.dataset,
                             f"{row.mean_psnr:.6f}", f"{row.delta_pct:.4f}"])
    save_ablation_chart(report, out / "ablation.png")
    _write_manifest(out, "ablate", config)
    for row in report.rows:
        _log(f"{row.variant:18s} {row.mean_psnr:6.2f} dB ({row.delta_pct:+.2f}%)")
    print(json.dumps(report.to_dict()["rows"]))
    return 0


_TOYGEN_DEFAULTS = {"count": 200, "size": [64, 128], "max_disp": 16,
                    "seed": 0, "out": None}


def cmd_toygen(config: dict) -> int:
    from .data import generate_toy_dataset, write_dataset

    out = _out_dir(config)
    h, w = config["size"]
    samples = generate_toy_dataset(config["count"], size=(h, w),
                                   seed=config["seed"],
                                   max_disp=config["max_disp"])
    write_dataset(samples, out, layout="kitti")
    _write_manifest(out, "toygen", config)
    _log(f"wrote {len(samples)} toy samples to {out}")
    return 0


_GRADCHECK_DEFAULTS = {"seed": 0}


def cmd_gradcheck(config: dict) -> int:
    from .nn.gradcheck import run_suite

    results, elapsed = run_suite(seed=config["seed"])
    for r in results:
        print(r)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed "
          f"in {elapsed:.2f}s")
    return 2 if failed else 0


# -- parser wiring ----------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="rawpair",
                     description="dual-camera raw reconstruction toolkit")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread pin (1 = fully deterministic)")
    sub = parser.add_subparsers(dest="command")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config or manifest; flags override")
        p.add_argument("--threads", type=int, default=None, help=argparse.SUPPRESS)
        return p

    p = add("synth", "synthesize noisy raw mosaic pairs from a stereo dataset")
    _add_dataset_flags(p)
    _add_noise_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--limit", type=int)
    p.add_argument("--out")

    p = add("warp", "warp a secondary raw mosaic onto the primary view")
    p.add_argument("--secondary")
    p.add_argument("--disparity")
    p.add_argument("--primary")
    p.add_argument("--fill", choices=["primary", "zero"])
    p.add_argument("--mode", choices=["raw", "packed"])
    p.add_argument("--out")

    p = add("disparity", "estimate disparity from a raw pair (block matching)")
    p.add_argument("--left")
    p.add_argument("--right")
    p.add_argument("--max-disp", dest="max_disp", type=int)
    p.add_argument("--block", type=int)
    p.add_argument("--out")

    p = add("train", "train one experiment variant")
    _add_dataset_flags(p)
    _add_noise_flags(p)
    p.add_argument("--variant", choices=["baseline-single", "same-noise",
                                         "unwarped-pair", "warped-gt",
                                         "warped-estimated"])
    p.add_argument("--stage", type=int, choices=[1, 2])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--patch", type=_size, help="patch size HxW")
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay-factor", dest="lr_decay_factor", type=float)
    p.add_argument("--lr-decay-period", dest="lr_decay_period", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--warp-mode", dest="warp_mode", choices=["raw", "packed"])
    p.add_argument("--fill", choices=["primary", "zero"])
    p.add_argument("--split", choices=["kitti-160-40", "ratio"])
    p.add_argument("--split-ratio", dest="split_ratio", type=float)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--val-noise-seed", dest="val_noise_seed", type=int)
    p.add_argument("--val-max-samples", dest="val_max_samples", type=int)
    p.add_argument("--bm-max-disp", dest="bm_max_disp", type=int)
    p.add_argument("--bm-block", dest="bm_block", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--kernel", type=int)
    p.add_argument("--init-from", dest="init_from")
    p.add_argument("--cold-start", dest="cold_start", action="store_const", const=True)
    p.add_argument("--resume")
    p.add_argument("--out")

    p = add("eval", "evaluate a checkpoint on a dataset")
    _add_dataset_flags(p)
    _add_noise_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--variant", choices=["baseline-single", "same-noise",
                                         "unwarped-pair", "warped-gt",
                                         "warped-estimated"])
    p.add_argument("--noise-seed", dest="noise_seed", type=int)
    p.add_argument("--warp-mode", dest="warp_mode", choices=["raw", "packed"])
    p.add_argument("--fill", choices=["primary", "zero"])
    p.add_argument("--bm-max-disp", dest="bm_max_disp", type=int)
    p.add_argument("--bm-block", dest="bm_block", type=int)
    p.add_argument("--split", choices=["kitti-160-40", "ratio"],
                   help="evaluate only the test side of this split")
    p.add_argument("--split-ratio", dest="split_ratio", type=float)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--max-samples", dest="max_samples", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--kernel", type=int)
    p.add_argument("--out")

    p = add("ablate", "run the four ablation variants and report the table")
    _add_dataset_flags(p)
    _add_noise_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs-stage1", dest="epochs_stage1", type=int)
    p.add_argument("--epochs-stage2", dest="epochs_stage2", type=int)
    p.add_argument("--eval-noise-seed", dest="eval_noise_seed", type=int)
    p.add_argument("--out")

    p = add("toygen", "write a synthetic toy dataset in KITTI layout")
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=_size, help="image size HxW")
    p.add_argument("--max-disp", dest="max_disp", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("gradcheck", "run the finite-difference gradient suite")
    p.add_argument("--seed", type=int)

    return parser


_COMMANDS = {
    "synth": (cmd_synth, _SYNTH_DEFAULTS),
    "warp": (cmd_warp, _WARP_DEFAULTS),
    "disparity": (cmd_disparity, _DISPARITY_DEFAULTS),
    "train": (cmd_train, _TRAIN_DEFAULTS),
    "eval": (cmd_eval, _EVAL_DEFAULTS),
    "ablate": (cmd_ablate, _ABLATE_DEFAULTS),
    "toygen": (cmd_toygen, _TOYGEN_DEFAULTS),
    "gradcheck": (cmd_gradcheck, _GRADCHECK_DEFAULTS),
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        _apply_threads(argv)
        parser = _build_parser()
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return 1
        command, defaults = _COMMANDS[args.command]
        config = _resolve(args, defaults, args.command)
        return command(config)
    except UsageError as exc:
        _log(f"usage error: {exc}")
        return 1
    except KeyboardInterrupt:
        _log("interrupted")
        return 2
    except Exception as exc:  # runtime failures map to exit 2
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
