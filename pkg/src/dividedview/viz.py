"""Vector-graphic diagnostics: BEV wedge layout and attention heatmaps."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .geom import TWO_PI
from .model import ForwardResult, ModelParams
from .partition import ViewPartition, shift_schedule


def wedge_plot(params: ModelParams, layer: int, path: str, radius: float | None = None) -> None:
    """BEV view of the layer's partition: wedge edges + reference points."""
    cfg = params.cfg
    pcfg = cfg.partition_config()
    theta_s = shift_schedule(layer, pcfg)
    V = pcfg.num_views
    refs = params.ref_points.data.astype(float)
    r = radius or cfg.cylinder_radius

    from .partition import group_indices

    groups = group_indices(refs, pcfg, theta_s)
    fig, ax = plt.subplots(figsize=(7, 7))
    cmap = plt.get_cmap("tab10")
    for v in range(V):
        edge = TWO_PI * v / V - theta_s
        ax.plot([0, r * np.cos(edge)], [0, r * np.sin(edge)], color="gray", lw=0.8, ls="--")
        mid = TWO_PI * (v + 0.5) / V - theta_s
        ax.text(0.82 * r * np.cos(mid), 0.82 * r * np.sin(mid), f"v{v}",
                ha="center", va="center", fontsize=9, color=cmap(v % 10))
    for v in range(V):
        sel = groups == v
        ax.scatter(refs[sel, 0], refs[sel, 1], s=6, color=cmap(v % 10), alpha=0.7)
    ax.add_patch(plt.Circle((0, 0), r, fill=False, color="gray", lw=0.8))
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"layer {layer}: V={V}, shift={np.rad2deg(theta_s):.1f} deg")
    fig.savefig(path)
    plt.close(fig)


def attention_heatmap(result: ForwardResult, layer: int, query: int, head: int,
                      num_views: int, h_feat: int, w_feat: int, path: str) -> None:
    """Per-view heatmap of one query's attention over image tokens."""
    if result.attention is None:
        raise ValueError("forward pass was run without attention capture")
    part_q, part_k = result.partitions[layer]
    weights = result.attention[layer]            # [kept_wedges, heads, Lq, Lk]
    q_sizes = np.array([g.size for g in part_q.groups])
    k_sizes = np.array([g.size for g in part_k.groups])
    keep = np.flatnonzero((q_sizes > 0) & (k_sizes > 0))

    v = int(part_q.group_of_item[query])
    grid = np.zeros(num_views * h_feat * w_feat)
    rows = np.where(keep == v)[0]
    if rows.size:
        row = int(rows[0])
        slot = int(np.where(part_q.groups[v] == query)[0][0])
        w = weights[row, head, slot, : part_k.groups[v].size]
        grid[part_k.groups[v]] = w

    grid = grid.reshape(num_views, h_feat, w_feat)
    fig, axes = plt.subplots(1, num_views, figsize=(2.2 * num_views, 2.6))
    if num_views == 1:
        axes = [axes]
    vmax = max(grid.max(), 1e-9)
    for i, ax in enumerate(axes):
        ax.imshow(grid[i], vmin=0.0, vmax=vmax, cmap="viridis")
        ax.set_title(f"view {i}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(f"query {query}, layer {layer}, head {head} (wedge {v})")
    fig.savefig(path)
    plt.close(fig)


def ensure_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)
