"""Figure rendering for the report paths.

Every report command writes PNG figures next to its CSV/JSON output:
outlier-fraction trajectories per site, per-channel mean-|x| trajectories,
training curves from a metrics stream, and the perplexity grid as an
annotated matrix.  Rendering is file-only (Agg backend, no display).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 150


def _save(fig, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return out_path


def outlier_fraction_figure(summary_rows, out_path) -> Path:
    """Outlier-channel fraction over training steps, one line per site/layer."""
    series: dict[tuple[str, int], list[tuple[int, float]]] = {}
    for row in summary_rows:
        series.setdefault((row["site"], row["layer"]), []).append(
            (row["step"], row["outlier_fraction"]))
    fig, ax = plt.subplots(figsize=(7, 4))
    for (site, layer), points in sorted(series.items()):
        points.sort()
        steps = [p[0] for p in points]
        fracs = [p[1] for p in points]
        ax.plot(steps, fracs, marker=".", label=f"{site} (layer {layer})")
    ax.set_xlabel("training step")
    ax.set_ylabel("outlier channel fraction")
    ax.set_title("Outlier channels over training")
    ax.legend(fontsize=7, ncol=2)
    ax.grid(alpha=0.3)
    return _save(fig, out_path)


def channel_trajectory_figure(channel_rows, site: str, layer: int, out_path,
                              top_k: int = 8) -> Path:
    """Mean |activation| per channel over steps for the largest channels."""
    rows = [r for r in channel_rows if r["site"] == site and r["layer"] == layer]
    if not rows:
        raise ValueError(f"no channel rows for site {site!r} layer {layer}")
    last_step = max(r["step"] for r in rows)
    final = sorted((r for r in rows if r["step"] == last_step),
                   key=lambda r: -r["mean_abs"])
    chosen = [r["channel"] for r in final[:top_k]]
    fig, ax = plt.subplots(figsize=(7, 4))
    for ch in chosen:
        pts = sorted((r["step"], r["mean_abs"]) for r in rows if r["channel"] == ch)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=f"ch {ch}")
    ax.set_xlabel("training step")
    ax.set_ylabel("mean |activation|")
    ax.set_title(f"{site} (layer {layer}): largest channels")
    ax.legend(fontsize=7, ncol=2)
    ax.grid(alpha=0.3)
    return _save(fig, out_path)


def training_curves_figure(metric_rows, out_path) -> Path:
    """Loss components and clip spread over a training run's metrics."""
    steps = [r["step"] for r in metric_rows]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].plot(steps, [r["ce_loss"] for r in metric_rows], label="cross entropy")
    kurt = [r.get("kurt_loss", 0.0) for r in metric_rows]
    if any(kurt):
        axes[0].plot(steps, kurt, label="kurtosis term")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss (nats)")
    axes[0].legend(fontsize=8)
    axes[0].grid(alpha=0.3)

    clips_present = any(r.get("clips") for r in metric_rows)
    if clips_present:
        keys = sorted(metric_rows[-1]["clips"])
        for key in keys:
            his = [r["clips"][key]["clip_hi"] for r in metric_rows if r.get("clips")]
            axes[1].plot(steps[: len(his)], his, lw=0.8)
        axes[1].set_ylabel("learned clip_hi")
    else:
        fracs = [(r["step"], r["outlier_fraction"]) for r in metric_rows
                 if r.get("outlier_fraction") is not None]
        if fracs:
            axes[1].plot([f[0] for f in fracs], [f[1] for f in fracs], marker=".")
        axes[1].set_ylabel("outlier fraction")
    axes[1].set_xlabel("step")
    axes[1].grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, out_path)


def grid_figure(row_labels, column_labels, ppl_matrix, out_path) -> Path:
    """Perplexity grid rendered as an annotated matrix (log color scale)."""
    data = np.asarray(ppl_matrix, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(1.6 * len(column_labels) + 2,
                                    0.7 * len(row_labels) + 1.5))
    shown = np.log10(np.maximum(data, 1e-9))
    im = ax.imshow(shown, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(column_labels)), column_labels, rotation=30,
                  ha="right", fontsize=8)
    ax.set_yticks(range(len(row_labels)), row_labels, fontsize=9)
    for i in range(data.shape[0]):
        for j in range(data.shape[1]):
            ax.text(j, i, f"{data[i, j]:.4g}", ha="center", va="center",
                    fontsize=8, color="white")
    fig.colorbar(im, ax=ax, label="log10 perplexity")
    ax.set_title("Perplexity by weight precision / quantizer")
    return _save(fig, out_path)
