"""Matplotlib figure rendering for the CLI report paths.

Figures are written next to the delimited outputs (CSV/JSON) so a run
directory is self-describing. The Agg backend is forced and PNG metadata
is stripped so outputs are byte-reproducible.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    return plt


def save_training_curves(report, path) -> Path:
    """Loss and validation PSNR per epoch, twin axes."""
    plt = _pyplot()
    epochs = [e.epoch for e in report.epochs]
    losses = [e.loss for e in report.epochs]
    psnrs = [e.val_psnr for e in report.epochs]

    fig, ax_loss = plt.subplots(figsize=(7, 4))
    ax_loss.plot(epochs, losses, color="tab:red", label="training loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss", color="tab:red")
    ax_loss.set_yscale("log")
    ax_loss.tick_params(axis="y", labelcolor="tab:red")

    ax_psnr = ax_loss.twinx()
    ax_psnr.plot(epochs, psnrs, color="tab:blue", label="validation PSNR")
    ax_psnr.set_ylabel("validation PSNR (dB)", color="tab:blue")
    ax_psnr.tick_params(axis="y", labelcolor="tab:blue")

    ax_loss.set_title(f"{report.variant} (stage {report.stage}, seed {report.seed})")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def save_ablation_chart(report, path) -> Path:
    """Bar chart of per-variant mean PSNR with the percent deltas."""
    plt = _pyplot()
    variants = [r.variant for r in report.rows]
    values = [r.mean_psnr for r in report.rows]
    deltas = [r.delta_pct for r in report.rows]

    fig, ax = plt.subplots(figsize=(7, 4))
    bars = ax.bar(variants, values, color="tab:blue")
    for bar, value, delta in zip(bars, values, deltas):
        ax.annotate(f"{value:.2f}\n({delta:+.1f}%)",
                    (bar.get_x() + bar.get_width() / 2, value),
                    ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("mean PSNR (dB)")
    lo = min(values)
    hi = max(values)
    pad = max(0.5, 0.15 * (hi - lo))
    ax.set_ylim(max(0.0, lo - pad), hi + 3 * pad)
    ax.set_title(f"ablation on {report.rows[0].dataset} (seed {report.metadata.get('seed')})")
    plt.setp(ax.get_xticklabels(), rotation=15, ha="right")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def save_disparity_preview(disparity, path) -> Path:
    """Colormapped disparity with invalid pixels blanked."""
    plt = _pyplot()
    shown = np.where(disparity.valid, disparity.values, np.nan)
    fig, ax = plt.subplots(figsize=(7, 3.2))
    im = ax.imshow(shown, cmap="turbo")
    ax.set_axis_off()
    fig.colorbar(im, ax=ax, label="disparity (px)", shrink=0.85)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def save_psnr_bars(result, path) -> Path:
    """Per-sample PSNR bars for an evaluation run."""
    plt = _pyplot()
    ids = [r.id for r in result.rows]
    values = [min(r.psnr, 99.0) for r in result.rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.25 * len(ids)), 3.6))
    ax.bar(range(len(ids)), values, color="tab:green")
    ax.axhline(min(result.mean_psnr, 99.0), color="black", linestyle="--",
               linewidth=1, label=f"mean {result.mean_psnr:.2f} dB")
    ax.set_ylabel("PSNR (dB)")
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(ids, rotation=90, fontsize=6)
    ax.legend(loc="lower right", fontsize=8)
    ax.set_title(f"evaluation: {result.variant}")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path
