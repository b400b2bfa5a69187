"""Matplotlib renderings of evaluation artifacts.

Everything here draws to files through the Agg backend so the report
path works headless. Inputs are the plain records produced by the
evaluation module; nothing in here recomputes metrics.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .report import RocReport, SeparabilityStats

__all__ = ["render_roc", "render_separability", "render_map"]

_DPI = 120


def render_roc(report: RocReport, path) -> None:
    """Three-panel ROC figure: Pd vs Pf, Pd vs tau, Pf vs tau."""
    fig, axes = plt.subplots(1, 3, figsize=(12.0, 3.6))

    ax = axes[0]
    ax.plot(report.p_f, report.p_d, lw=1.2)
    ax.plot([0, 1], [0, 1], ls=":", lw=0.8, color="gray")
    ax.set_xlabel(r"$P_f$")
    ax.set_ylabel(r"$P_d$")
    ax.set_title(f"AUC = {report.auc_pf_pd:.5f}")

    ax = axes[1]
    ax.plot(report.tau, report.p_d, lw=1.2)
    ax.set_xlabel(r"$\tau$")
    ax.set_ylabel(r"$P_d$")
    ax.set_title(f"AUC = {report.auc_tau_pd:.5f}")

    ax = axes[2]
    ax.plot(report.tau, report.p_f, lw=1.2)
    ax.set_xlabel(r"$\tau$")
    ax.set_ylabel(r"$P_f$")
    ax.set_title(f"AUC = {report.auc_tau_pf:.5f}")

    for ax in axes:
        ax.set_xlim(-0.02, 1.02)
        ax.set_ylim(-0.02, 1.02)
        ax.grid(True, lw=0.3, alpha=0.5)
    snpr = "inf" if report.snpr_infinite else f"{report.auc_snpr:.5f}"
    fig.suptitle(f"OA = {report.auc_oa:.5f}   SNPR = {snpr}", fontsize=10)
    fig.tight_layout(rect=(0, 0, 1, 0.93))
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def render_separability(target: SeparabilityStats,
                        background: SeparabilityStats, path) -> None:
    """Box-whisker summary of score populations, whiskers at min/max."""
    boxes = []
    for label, s in (("background", background), ("target", target)):
        boxes.append({
            "label": label,
            "whislo": s.minimum, "q1": s.q1, "med": s.median,
            "q3": s.q3, "whishi": s.maximum, "fliers": [],
        })
    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    ax.bxp(boxes, showfliers=False)
    ax.set_ylabel("detection score")
    ax.set_ylim(-0.05, 1.05)
    ax.grid(True, axis="y", lw=0.3, alpha=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def render_map(scores: np.ndarray, path, truth: np.ndarray | None = None) -> None:
    """Grayscale detection map; optional truth mask drawn as an outline."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError("detection map must be 2-D")
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    im = ax.imshow(scores, cmap="gray", vmin=0.0, vmax=1.0,
                   interpolation="nearest")
    if truth is not None:
        ax.contour(np.asarray(truth, dtype=np.float64), levels=[0.5],
                   colors="red", linewidths=0.7)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
