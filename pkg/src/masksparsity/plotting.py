"""Static figures written next to the JSON/CSV data (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .sparsity import GammaSnapshot, GradientNormLog, Histogram  # noqa: E402


def histogram_figure(hist: Histogram, path: str | Path, title: str = "") -> Path:
    """Bar chart of |gamma| counts; the overflow bin is drawn as a separate bar past the range."""
    edges = hist.edges
    width = edges[1] - edges[0]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(edges[:-1], hist.counts[:-1], width=width, align="edge", color="tab:blue")
    if hist.counts[-1]:
        ax.bar(edges[-1] + width, hist.counts[-1], width=width, align="edge", color="tab:gray",
               label=f"> {edges[-1]:g}")
        ax.legend()
    ax.set_xlabel("|gamma|")
    ax.set_ylabel("channels")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def snapshot_comparison(snapshots: dict[str, GammaSnapshot], path: str | Path,
                        num_bins: int = 50) -> Path:
    """Overlaid log-scale |gamma| distributions of several stages."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bins = np.logspace(-6, 1, num_bins + 1)
    for name, snap in snapshots.items():
        vals = np.clip(snap.all_values(), 1e-6, 10)
        ax.hist(vals, bins=bins, histtype="step", label=name)
    ax.set_xscale("log")
    ax.set_xlabel("|gamma|")
    ax.set_ylabel("channels")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def gradient_figure(glog: GradientNormLog, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for (layer, idx), series in glog.series.items():
        ax.plot(list(series), lw=0.8, label=f"{layer}[{idx}]")
    ax.set_xlabel("iteration")
    ax.set_ylabel("|dL/d gamma|")
    if len(glog.series) <= 8:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def curves_figure(epochs_by_stage: dict[str, list[dict]], path: str | Path) -> Path:
    """Test top-1 per epoch for each training stage."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for stage, recs in epochs_by_stage.items():
        if recs and recs[0].get("test_top1") is not None:
            ax.plot([r["epoch"] for r in recs], [r["test_top1"] for r in recs], label=stage)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test top-1 (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def render_run(result) -> list[Path]:
    """Figures for a finished pipeline run, written under its run directory."""
    from .sparsity import gamma_histogram

    out = result.out_dir
    written = []
    for sid, snap in result.snapshots.items():
        written.append(histogram_figure(gamma_histogram(snap), out / sid / "gamma_hist.png", sid))
    for sid, glog in result.grad_logs.items():
        written.append(gradient_figure(glog, out / sid / "gradnorm.png"))
    if result.snapshots:
        written.append(snapshot_comparison(result.snapshots, out / "gamma_stages.png"))
    curves = {sid: r.epochs for sid, r in result.records.items() if r.epochs}
    if curves:
        written.append(curves_figure(curves, out / "curves.png"))
    return written
