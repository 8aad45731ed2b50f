"""Plot emission from evaluation reports (CLI layer only).

The metrics module stays rendering-free; everything here consumes a
finished EvaluationReport. Each figure is written as both PNG and SVG.
"""

import os

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from ..evaluation import PSNR_INFINITE, EvaluationReport  # noqa: E402

#: display cap used when a PSNR is the infinite sentinel
PSNR_DISPLAY_CAP = 60.0


def _save(fig, out_dir, stem) -> list:
    paths = []
    for ext in ("png", "svg"):
        path = os.path.join(out_dir, f"{stem}.{ext}")
        fig.savefig(path, bbox_inches="tight", dpi=120)
        paths.append(path)
    plt.close(fig)
    return paths


def _psnr_value(value) -> float:
    return PSNR_DISPLAY_CAP if value == PSNR_INFINITE else min(value, PSNR_DISPLAY_CAP)


def plot_sweeps(report: EvaluationReport, out_dir) -> list:
    if not report.sweeps:
        return []
    paths = []
    families = sorted({c.attack_family for c in report.sweeps})
    for family in families:
        fig, ax = plt.subplots(figsize=(6, 4))
        for curve in report.sweeps:
            if curve.attack_family != family:
                continue
            iters = [p[0] for p in curve.points]
            accs = [100 * p[1] for p in curve.points]
            ax.plot(iters, accs, marker="o",
                    label=f"eps = {curve.epsilon * 255:.0f}/255")
        ax.set_xlabel("attack iterations")
        ax.set_ylabel("recovered accuracy (%)")
        ax.set_title(f"recovered accuracy vs {family} strength")
        ax.set_ylim(0, 100)
        ax.grid(alpha=0.3)
        ax.legend()
        paths += _save(fig, out_dir, f"sweep_{family}")
    return paths


def plot_fidelity(report: EvaluationReport, out_dir) -> list:
    if not report.fidelity:
        return []
    labels = list(report.fidelity)
    attacked_mae = [report.fidelity[a]["attacked_mae"] for a in labels]
    attacked_psnr = [_psnr_value(report.fidelity[a]["attacked_psnr"]) for a in labels]
    restored_mae, restored_psnr = [], []
    for a in labels:
        entry = next(iter(report.fidelity[a]["restored"].values()))
        restored_mae.append(entry["mae"])
        restored_psnr.append(_psnr_value(entry["psnr"]))

    x = np.arange(len(labels))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(12, 4))
    ax1.bar(x - 0.2, attacked_mae, width=0.4, label="attacked")
    ax1.bar(x + 0.2, restored_mae, width=0.4, label="restored")
    ax1.set_ylabel("MAE vs clean")
    ax2.bar(x - 0.2, attacked_psnr, width=0.4, label="attacked")
    ax2.bar(x + 0.2, restored_psnr, width=0.4, label="restored")
    ax2.set_ylabel(f"PSNR vs clean (dB, capped {PSNR_DISPLAY_CAP:.0f})")
    for ax in (ax1, ax2):
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.legend()
        ax.grid(alpha=0.3, axis="y")
    fig.suptitle("image fidelity before and after reconstruction")
    return _save(fig, out_dir, "mae_psnr")


def plot_triptychs(report: EvaluationReport, out_dir) -> list:
    """Per attack: 3 rows (clean / attacked / restored) of sample images."""
    paths = []
    for label, roles in report.samples.items():
        clean, attacked, restored = roles["clean"], roles["attacked"], roles["restored"]
        k = len(clean)
        fig, axes = plt.subplots(3, k, figsize=(1.4 * k, 4.4), squeeze=False)
        for row, (name, batch) in enumerate(
                [("clean", clean), ("attacked", attacked), ("restored", restored)]):
            for col in range(k):
                ax = axes[row][col]
                ax.imshow(np.clip(batch[col], 0, 1))
                ax.set_xticks([])
                ax.set_yticks([])
                if col == 0:
                    ax.set_ylabel(name, fontsize=9)
        fig.suptitle(f"{label}: clean / attacked / restored", fontsize=10)
        safe = label.replace("(", "_").replace(")", "")
        paths += _save(fig, out_dir, f"triptych_{safe}")
    return paths


def emit_plots(report: EvaluationReport, out_dir) -> list:
    """All figures the report supports; absent sections emit nothing."""
    os.makedirs(out_dir, exist_ok=True)
    return (plot_sweeps(report, out_dir) + plot_fidelity(report, out_dir)
            + plot_triptychs(report, out_dir))
