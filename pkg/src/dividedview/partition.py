"""Angular division of BEV space into frustum-shaped wedges.

A point with BEV angle ``phi = atan2(y, x)`` (mapped to [0, 2pi)) lands in

    group(p) = floor(V * (phi + theta_s) / 2pi) mod V

so the shift angle ``theta_s`` rotates the whole partition.  Each wedge v
carries the rotation ``theta_v`` that maps its angular bisector onto the
+x axis of the shared virtual frame:

    theta_v = -(2pi * (v + 0.5) / V - theta_s)

Half-open wedge intervals make boundary assignment deterministic (a point
exactly on an edge belongs to the higher-index wedge).  Points at the BEV
origin have no angle; they go to group 0 and bump the
``partition.origin_points`` diagnostic counter.

The gather/pad/scatter layout turns per-wedge variable-length item lists
into a dense [V, L_max, C] batch plus validity mask for parallel
attention, and back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diagnostics
from .geom import TWO_PI

ORIGIN_EPS = 0.0  # exact zero only; angles are defined everywhere else


@dataclass(frozen=True)
class PartitionConfig:
    num_views: int
    theta_start: float = 0.0
    shift_step: float = np.deg2rad(20.0)

    def __post_init__(self):
        if self.num_views < 1:
            raise ValueError("need at least one view")
        if self.shift_step < 0:
            raise ValueError("shift step must be non-negative")


def shift_schedule(layer: int, cfg: PartitionConfig) -> float:
    """Shift angle for a decoder layer, wrapped to [0, 2pi)."""
    if layer < 0:
        raise ValueError("layer index must be non-negative")
    return float(np.mod(cfg.theta_start + layer * cfg.shift_step, TWO_PI))


def group_index(p, cfg: PartitionConfig, theta_s: float | None = None) -> int:
    """Wedge index of a single 3D point at the given shift angle."""
    theta = cfg.theta_start if theta_s is None else theta_s
    x, y = float(p[0]), float(p[1])
    if x == 0.0 and y == 0.0:
        diagnostics.bump("partition.origin_points")
        return 0
    phi = np.mod(np.arctan2(y, x), TWO_PI)
    return int(np.floor(cfg.num_views * (phi + theta) / TWO_PI)) % cfg.num_views


def group_indices(points: np.ndarray, cfg: PartitionConfig, theta_s: float) -> np.ndarray:
    """Vectorized ``group_index`` over [n, 3] points."""
    pts = np.asarray(points, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    at_origin = (x == 0.0) & (y == 0.0)
    if at_origin.any():
        diagnostics.bump("partition.origin_points", int(at_origin.sum()))
    phi = np.mod(np.arctan2(y, x), TWO_PI)
    g = np.floor(cfg.num_views * (phi + theta_s) / TWO_PI).astype(np.intp) % cfg.num_views
    g[at_origin] = 0
    return g


@dataclass
class ViewPartition:
    """Grouping of n items into V wedges with a common padded layout."""

    group_of_item: np.ndarray            # [n] wedge index per item
    groups: list[np.ndarray]             # per wedge, item indices in original order
    pad_len: int                         # L_max = max wedge size
    mask: np.ndarray                     # [V, L_max] validity
    theta_v: np.ndarray                  # [V] rotation to the virtual frame
    theta_s: float

    @property
    def num_views(self) -> int:
        return len(self.groups)

    @property
    def num_items(self) -> int:
        return self.group_of_item.shape[0]

    def padded_index(self) -> np.ndarray:
        """[V, L_max] source index per slot; invalid slots point at item 0."""
        idx = np.zeros((self.num_views, self.pad_len), dtype=np.intp)
        for v, g in enumerate(self.groups):
            idx[v, : g.size] = g
        return idx


def partition_items(points: np.ndarray, cfg: PartitionConfig, layer: int = 0) -> ViewPartition:
    """Group items by the BEV angle of their points at this layer's shift."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError(f"expected [n, 3] points, got {pts.shape}")
    theta_s = shift_schedule(layer, cfg)
    gidx = group_indices(pts, cfg, theta_s)
    V = cfg.num_views
    groups = [np.flatnonzero(gidx == v) for v in range(V)]
    pad_len = max(1, max(g.size for g in groups))
    mask = np.zeros((V, pad_len), dtype=bool)
    for v, g in enumerate(groups):
        mask[v, : g.size] = True
    theta_v = -(TWO_PI * (np.arange(V) + 0.5) / V - theta_s)
    return ViewPartition(group_of_item=gidx, groups=groups, pad_len=pad_len,
                         mask=mask, theta_v=theta_v, theta_s=theta_s)


def gather_pad(items: np.ndarray, part: ViewPartition, fill: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Arrange [n, ...] items into [V, L_max, ...]; invalid slots carry ``fill``.

    Returns (padded, mask).  Item order within each wedge follows the
    original item order.
    """
    items = np.asarray(items)
    if items.shape[0] != part.num_items:
        raise ValueError(f"item count {items.shape[0]} does not match partition ({part.num_items})")
    out_shape = (part.num_views, part.pad_len) + items.shape[1:]
    padded = np.full(out_shape, fill, dtype=items.dtype)
    for v, g in enumerate(part.groups):
        padded[v, : g.size] = items[g]
    return padded, part.mask.copy()


def scatter_unpad(padded: np.ndarray, part: ViewPartition) -> np.ndarray:
    """Exact inverse of ``gather_pad`` on the valid slots."""
    padded = np.asarray(padded)
    if padded.shape[:2] != (part.num_views, part.pad_len):
        raise ValueError(f"padded shape {padded.shape[:2]} does not match partition "
                         f"({part.num_views}, {part.pad_len})")
    out = np.empty((part.num_items,) + padded.shape[2:], dtype=padded.dtype)
    for v, g in enumerate(part.groups):
        out[g] = padded[v, : g.size]
    return out
