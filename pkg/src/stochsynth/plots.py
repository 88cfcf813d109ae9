"""Figure rendering for run artifacts (partition maps, precision curves,
action counts, cumulative time, input regions).  Everything writes straight
to files; no interactive backend is required."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.collections import PatchCollection
from matplotlib.patches import Rectangle

plt.rcParams.update({
    "figure.figsize": (6.0, 4.5),
    "axes.linewidth": 0.6,
    "font.size": 9,
})


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def partition_map(cells, values, path, title="", cmap="viridis", vmin=0.0, vmax=1.0):
    """Color the 2-D partition by a per-cell scalar (probability bound, score,
    suboptimality...)."""
    fig, ax = plt.subplots()
    patches = []
    for cell in cells:
        patches.append(Rectangle(cell.lo, cell.hi[0] - cell.lo[0], cell.hi[1] - cell.lo[1]))
    col = PatchCollection(patches, cmap=cmap, edgecolor="k", linewidth=0.15)
    col.set_array(np.asarray(values, dtype=float))
    col.set_clim(vmin, vmax)
    ax.add_collection(col)
    lo = np.min([c.lo for c in cells], axis=0)
    hi = np.max([c.hi for c in cells], axis=0)
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.colorbar(col, ax=ax, shrink=0.85)
    return _save(fig, path)


def classification_map(cells, p_min, p_max, threshold, path, title=""):
    """Three-way verdict per cell: guaranteed above the threshold (green),
    impossible (red), or undecided at the current precision (yellow)."""
    fig, ax = plt.subplots()
    for cell, lo, hi in zip(cells, p_min, p_max):
        if lo > threshold:
            color = "#2e8b57"
        elif hi < threshold:
            color = "#c0392b"
        else:
            color = "#f1c40f"
        ax.add_patch(Rectangle(cell.lo, cell.hi[0] - cell.lo[0], cell.hi[1] - cell.lo[1],
                               facecolor=color, edgecolor="k", linewidth=0.15))
    lo = np.min([c.lo for c in cells], axis=0)
    hi = np.max([c.hi for c in cells], axis=0)
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])
    ax.set_aspect("equal")
    ax.set_title(title or f"satisfaction vs threshold {threshold}")
    return _save(fig, path)


def precision_curves(history, path):
    fig, ax = plt.subplots()
    it = [r.iteration for r in history]
    ax.plot(it, [r.eps_max for r in history], "o-", label="greatest factor")
    ax.plot(it, [r.mean_eps for r in history], "s-", label="mean factor")
    ax.plot(it, [r.frac_above for r in history], "^-", label="fraction above target")
    ax.set_xlabel("refinement step")
    ax.set_ylabel("suboptimality")
    ax.legend()
    return _save(fig, path)


def action_count_curve(history, path):
    fig, ax = plt.subplots()
    it = [r.iteration for r in history]
    ax.plot(it, [r.mean_actions for r in history], "o-", label="volume-weighted")
    ax.plot(it, [r.mean_actions_flat for r in history], "s--", label="per state")
    ax.set_xlabel("refinement step")
    ax.set_ylabel("mean actions left")
    ax.legend()
    return _save(fig, path)


def cumulative_time_curve(history, path):
    fig, ax = plt.subplots()
    ax.plot([r.iteration for r in history], [r.wall_seconds for r in history], "o-")
    ax.set_xlabel("refinement step")
    ax.set_ylabel("cumulative wall time [s]")
    return _save(fig, path)


def input_region_plot(boxes, input_box, path, title=""):
    """Retained input sub-boxes of one product state inside the full box."""
    fig, ax = plt.subplots()
    ax.add_patch(Rectangle(input_box.lo, input_box.hi[0] - input_box.lo[0],
                           input_box.hi[1] - input_box.lo[1],
                           facecolor="#dddddd", edgecolor="k", linewidth=0.4))
    for box in boxes:
        ax.add_patch(Rectangle(box.lo, box.hi[0] - box.lo[0], box.hi[1] - box.lo[1],
                               facecolor="#3478b5", edgecolor="k", linewidth=0.3))
    pad = 0.1 * max(input_box.hi[0] - input_box.lo[0], input_box.hi[1] - input_box.lo[1])
    ax.set_xlim(input_box.lo[0] - pad, input_box.hi[0] + pad)
    ax.set_ylim(input_box.lo[1] - pad, input_box.hi[1] + pad)
    ax.set_aspect("equal")
    ax.set_title(title)
    return _save(fig, path)
