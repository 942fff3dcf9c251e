"""Matplotlib figure output for training reports and rendered views.

Everything draws through the Agg backend into files; no interactive state.
Figures are deterministic for fixed inputs (fixed dpi, no timestamps), so
report directories diff cleanly between runs.
"""
from __future__ import annotations

import os

import numpy as np
import matplotlib

matplotlib.use("Agg")

from matplotlib.figure import Figure
from matplotlib import image as mpl_image

DPI = 120
DEPTH_CMAP = "turbo"


def _save(fig: Figure, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    return path


def loss_curves_figure(curves: dict, path: str) -> str:
    """One panel per stage, log-scale loss against step."""
    stages = [s for s, c in curves.items() if c]
    fig = Figure(figsize=(5 * max(len(stages), 1), 3.4))
    axes = fig.subplots(1, max(len(stages), 1), squeeze=False)[0]
    for ax, stage in zip(axes, stages):
        rows = curves[stage]
        steps = [r["step"] for r in rows]
        for key in rows[0]:
            if key in ("step", "lambda_depth"):
                continue
            vals = [r.get(key, float("nan")) for r in rows]
            if any(v > 0 for v in vals if not np.isnan(v)):
                ax.semilogy(steps, vals, label=key, linewidth=1.2)
        ax.set_title(stage)
        ax.set_xlabel("step")
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
    if not stages:
        axes[0].set_axis_off()
        axes[0].text(0.5, 0.5, "no curves", ha="center")
    return _save(fig, path)


def pose_track_figure(pose_track: list, path: str) -> str:
    """Depth-pose error against ground truth over stage-3 steps."""
    fig = Figure(figsize=(6, 3.4))
    ax = fig.subplots()
    if pose_track:
        steps = [r["step"] for r in pose_track]
        ax.plot(steps, [r["trans_m"] for r in pose_track], "-o", ms=3,
                color="tab:blue", label="translation [m]")
        ax2 = ax.twinx()
        ax2.plot(steps, [r["rot_deg"] for r in pose_track], "-s", ms=3,
                 color="tab:red", label="rotation [deg]")
        ax2.set_ylabel("rotation error [deg]", color="tab:red")
        lines, labels = ax.get_legend_handles_labels()
        l2, lb2 = ax2.get_legend_handles_labels()
        ax.legend(lines + l2, labels + lb2, fontsize=8)
    ax.set_xlabel("step")
    ax.set_ylabel("translation error [m]", color="tab:blue")
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def trajectory_figure(gt_poses: list, est_poses: list | None, path: str,
                      title: str = "trajectory (top view)") -> str:
    """Top-down xy plot of the ground-truth track and an estimate."""
    fig = Figure(figsize=(5.5, 5.5))
    ax = fig.subplots()
    gt = np.stack([p.x for p in gt_poses])
    ax.plot(gt[:, 0], gt[:, 1], "-", color="0.4", linewidth=1.0, label="ground truth")
    ax.plot(gt[0, 0], gt[0, 1], "k^", ms=8, label="start")
    if est_poses is not None:
        est = np.stack([p.x for p in est_poses])
        ax.plot(est[:, 0], est[:, 1], ".", color="tab:orange", ms=3, label="estimate")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def save_color_png(path: str, img: np.ndarray) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    mpl_image.imsave(path, np.clip(img, 0.0, 1.0))
    return path


def save_depth_png(path: str, depth: np.ndarray, vmax: float | None = None) -> str:
    """Colorized depth; zeros (misses) render black."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    d = np.asarray(depth, dtype=np.float64)
    if vmax is None:
        vmax = float(d.max()) or 1.0
    cmap = matplotlib.colormaps[DEPTH_CMAP]
    rgba = cmap(np.clip(d / vmax, 0.0, 1.0))
    rgba[d <= 0] = (0.0, 0.0, 0.0, 1.0)
    mpl_image.imsave(path, rgba)
    return path


def view_pair_pngs(outdir: str, name: str, color: np.ndarray, depth: np.ndarray,
                   vmax: float | None = None) -> tuple:
    """The render subcommand's PNG pair for one view."""
    c = save_color_png(os.path.join(outdir, f"{name}_rgb.png"), color)
    d = save_depth_png(os.path.join(outdir, f"{name}_depth.png"), depth, vmax)
    return c, d


def depth_comparison_figure(pred: np.ndarray, gt: np.ndarray, path: str,
                            vmax: float | None = None) -> str:
    """Predicted vs ground-truth depth with an absolute-error panel."""
    if vmax is None:
        vmax = float(max(pred.max(), gt.max())) or 1.0
    fig = Figure(figsize=(10.5, 3.4))
    axes = fig.subplots(1, 3)
    for ax, (img, title) in zip(axes, [(pred, "rendered"), (gt, "sensor")]):
        im = ax.imshow(img, cmap=DEPTH_CMAP, vmin=0, vmax=vmax)
        ax.set_title(title)
        ax.set_axis_off()
        fig.colorbar(im, ax=ax, fraction=0.046)
    err = np.abs(pred - gt)
    err[gt <= 0] = 0.0
    im = axes[2].imshow(err, cmap="magma", vmin=0)
    axes[2].set_title("|error|")
    axes[2].set_axis_off()
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    return _save(fig, path)
