from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .simcluster import UtilizationSeries  # noqa: E402


def _steps(samples, column, total):
    ticks = [s[0] for s in samples]
    return ticks, [s[column] / total for s in samples]


def plot_utilization(series: UtilizationSeries, path: str | Path, *, title: str = "",
                     steady_window: tuple[int, int] | None = None) -> Path:
    """Step plot of busy cores (and GPUs, if any) as a fraction of capacity."""
    rows = 2 if series.total_gpus else 1
    fig, axes = plt.subplots(rows, 1, sharex=True, figsize=(8, 2.6 * rows), squeeze=False)
    panels = [("cores", 1, series.total_cores, series.core_fraction)]
    if series.total_gpus:
        panels.append(("GPUs", 2, series.total_gpus, series.gpu_fraction))
    for ax, (label, column, total, frac) in zip(axes[:, 0], panels):
        x, y = _steps(series.samples, column, total)
        ax.step(x, y, where="post", linewidth=1.0)
        ax.fill_between(x, y, step="post", alpha=0.25)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel(f"busy {label}")
        ax.text(0.99, 0.05, f"aggregate {frac:.3f}", transform=ax.transAxes, ha="right")
        if steady_window is not None:
            ax.axvspan(*steady_window, color="grey", alpha=0.1, linewidth=0)
    axes[-1, 0].set_xlabel("time")
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
