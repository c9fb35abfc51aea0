"""Static density-map visualizations: ground truth vs prediction per video."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data import AnnotatedSequence, build_gt_density
from .model import CountResult


def density_curves(seq: AnnotatedSequence, result: CountResult):
    """Concatenated (time, gt, pred) arrays over the non-padded fine-view grid."""
    plan = result.plan
    times, gt_vals, pred_vals = [], [], []
    for indices, mask, pred in zip(plan.fine_views, plan.pad_mask_fine, result.view_densities):
        gt = build_gt_density(seq, indices, mask)
        times.append(np.asarray(indices)[mask])
        gt_vals.append(gt.values[mask])
        pred_vals.append(np.asarray(pred)[mask])
    return np.concatenate(times), np.concatenate(gt_vals), np.concatenate(pred_vals)


def plot_density(seq: AnnotatedSequence, result: CountResult, out_path) -> Path:
    """One PNG per video: predicted density curve over the ground truth,
    with cycle spans shaded."""
    t, gt, pred = density_curves(seq, result)
    fig, ax = plt.subplots(figsize=(10, 3))
    for s, e in seq.cycles:
        ax.axvspan(s, e, color="0.92", zorder=0)
    ax.plot(t, gt, label=f"ground truth (count={seq.count})", color="tab:blue")
    ax.plot(t, pred, label=f"prediction (count={result.count:.2f})", color="tab:red", alpha=0.8)
    ax.set_xlabel("raw frame")
    ax.set_ylabel("density")
    ax.set_title(seq.id)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
