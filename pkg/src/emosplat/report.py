"""Report figures rendered alongside the delimited outputs.

Every CLI report path (train, eval, bench) writes machine-readable JSON or
CSV plus the matching matplotlib figure files produced here. Headless Agg
backend; nothing interactive.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import VA_LABELS, VA_POINTS


def loss_curves(log_records: list, out_png) -> None:
    """Per-stage total-loss trajectories from the training log."""
    stages = []
    for rec in log_records:
        if rec["stage"] not in stages:
            stages.append(rec["stage"])
    fig, ax = plt.subplots(figsize=(7, 4))
    for stage in stages:
        steps = [r["step"] for r in log_records if r["stage"] == stage]
        totals = [r["total"] for r in log_records if r["stage"] == stage]
        ax.plot(steps, totals, label=stage, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("training loss by stage")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def psnr_curve(values: list, out_png, title: str = "per-frame PSNR") -> None:
    fig, ax = plt.subplots(figsize=(7, 3.2))
    finite = [v if np.isfinite(v) else np.nan for v in values]
    ax.plot(finite, marker="o", markersize=3, linewidth=1)
    ax.set_xlabel("frame")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def va_scatter(records: list, out_png) -> None:
    """Predicted vs target valence/arousal on the circumplex disc."""
    fig, ax = plt.subplots(figsize=(5, 5))
    th = np.linspace(0, 2 * np.pi, 200)
    ax.plot(np.cos(th), np.sin(th), color="0.8", linewidth=1)
    ax.plot(0.8 * np.cos(th), 0.8 * np.sin(th), color="0.85", linestyle="--", linewidth=1)
    for v, a in VA_POINTS:
        ax.scatter([v], [a], marker="x", color="0.4", s=30)
        ax.annotate(VA_LABELS[(v, a)], (v, a), fontsize=6, xytext=(3, 3), textcoords="offset points")
    if records:
        pred = np.array([r.pred for r in records])
        tgt = np.array([r.target for r in records])
        ax.scatter(pred[:, 0], pred[:, 1], s=14, color="tab:red", label="predicted")
        for p, t in zip(pred, tgt):
            ax.plot([t[0], p[0]], [t[1], p[1]], color="tab:red", alpha=0.25, linewidth=0.7)
        ax.legend(fontsize=8)
    ax.set_xlim(-1.1, 1.1)
    ax.set_ylim(-1.1, 1.1)
    ax.set_xlabel("valence")
    ax.set_ylabel("arousal")
    ax.set_aspect("equal")
    ax.set_title("valence/arousal protocol")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def bench_figure(bench: dict, out_png) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    stages = bench["stages"]
    ax1.bar(list(stages.keys()), list(stages.values()), color="tab:blue")
    ax1.set_ylabel("seconds (total)")
    ax1.set_title(f"stage timings ({bench['fps']:.2f} fps)")
    hist = bench["tile_histogram"]
    edges = hist["bin_edges"]
    centers = [(edges[i] + edges[i + 1]) / 2 for i in range(len(edges) - 1)]
    widths = [edges[i + 1] - edges[i] for i in range(len(edges) - 1)]
    ax2.bar(centers, hist["counts"], width=widths, color="tab:orange", edgecolor="none")
    ax2.set_xlabel("contributors per tile")
    ax2.set_ylabel("tiles")
    ax2.set_title("tile occupancy")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
