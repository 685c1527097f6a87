"""Object-centric temporal memory with ego-motion compensation.

Each processed frame contributes two kinds of cached entries: top-scoring
decoder embeddings and encoded 2D RoI proposals.  Entries carry the 3D
point (in the ego frame of their source timestamp), the source ego
transform (world -> ego), and the timestamp.  ``ego_compensate``
re-expresses every cached point in the current ego frame,

    p_now = (ego_now @ inv(ego_src)) p_src,

and emits the per-entry motion features (time delta plus the flattened
relative transform) that the model turns into a motion embedding.
Entries are stored detached: gradients never flow into past frames.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import diagnostics
from .autodiff import MlpParams, Tensor
from .geom import CameraModel, apply_homogeneous, check_homogeneous, invert_homogeneous

DEPTH_FLOOR = 0.5  # meters; RoI point depth is clamped here when non-positive


@dataclass
class MemoryEntry:
    kind: str                 # "decoder" | "roi"
    embedding: np.ndarray     # [C]
    point: np.ndarray         # [3], ego frame at source time
    timestamp: float
    ego: np.ndarray           # [4, 4] world -> ego at source time

    def __post_init__(self):
        if self.kind not in ("decoder", "roi"):
            raise ValueError(f"unknown entry kind {self.kind!r}")
        self.point = np.asarray(self.point, dtype=float)
        if not np.all(np.isfinite(self.point)):
            raise ValueError("memory entry point must be finite")
        self.embedding = np.asarray(self.embedding)
        self.ego = np.asarray(self.ego, dtype=float)


class MemoryQueue:
    """FIFO ring of per-frame entry sets, at most ``capacity`` frames."""

    def __init__(self, capacity: int = 4, max_decoder: int = 256, max_roi: int = 128):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.max_decoder = max_decoder
        self.max_roi = max_roi
        self.frames: deque[list[MemoryEntry]] = deque()

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def num_entries(self) -> int:
        return sum(len(f) for f in self.frames)

    def clear(self) -> None:
        self.frames.clear()


def topk_select(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties go to the lower index."""
    if k < 0:
        raise ValueError("k must be non-negative")
    scores = np.asarray(scores)
    order = np.argsort(-scores, kind="stable")
    return order[: min(k, scores.size)]


def push_frame(queue: MemoryQueue, decoder_entries: list[MemoryEntry],
               roi_entries: list[MemoryEntry], ego: np.ndarray, timestamp: float) -> None:
    """Append one frame's entries, evicting the oldest beyond capacity.

    Entry lists arrive score-ordered; per-kind counts are capped at the
    queue's configured top-k.
    """
    check_homogeneous(ego)
    frame = list(decoder_entries[: queue.max_decoder]) + list(roi_entries[: queue.max_roi])
    for e in frame:
        e.ego = np.asarray(ego, dtype=float)
        e.timestamp = float(timestamp)
    queue.frames.append(frame)
    while len(queue.frames) > queue.capacity:
        queue.frames.popleft()


@dataclass
class MemoryView:
    """Cached entries re-expressed in the current ego frame (read-only)."""

    embeddings: np.ndarray     # [K, C]
    points: np.ndarray         # [K, 3], current ego frame
    motion_feats: np.ndarray   # [K, 13] = (dt, flattened R|t of relative ego transform)
    kinds: list[str]

    @property
    def num_entries(self) -> int:
        return self.points.shape[0]


def ego_compensate(queue: MemoryQueue, ego_now: np.ndarray, t_now: float) -> MemoryView:
    """Re-express all cached points in the current ego frame (Eq.-10 style).

    Newest frame first; embeddings are untouched.  The motion features per
    entry are (t_now - t_src) followed by the 12 rotation+translation
    entries of the relative transform.
    """
    check_homogeneous(ego_now)
    embeddings, points, feats, kinds = [], [], [], []
    for frame in reversed(queue.frames):
        for e in frame:
            rel = ego_now @ invert_homogeneous(e.ego)
            points.append(apply_homogeneous(rel, e.point))
            feats.append(np.concatenate([[t_now - e.timestamp], rel[:3, :].reshape(-1)]))
            embeddings.append(e.embedding)
            kinds.append(e.kind)
    if not points:
        C = 0
        return MemoryView(embeddings=np.zeros((0, C)), points=np.zeros((0, 3)),
                          motion_feats=np.zeros((0, 13)), kinds=[])
    return MemoryView(embeddings=np.stack(embeddings), points=np.stack(points),
                      motion_feats=np.stack(feats), kinds=kinds)


@dataclass
class RoiParams:
    """Learned encoders turning a 2D proposal into a memory entry.

    ``reduce`` replaces the RoI convolution (the simulator hands us a
    feature vector, not a patch); ``embed`` maps [reduced; class scores]
    to the embedding; ``point`` maps [reduced; normalized intrinsics] to
    (u_norm, v_norm, depth) which is unprojected and taken to the ego
    frame through the inverse camera extrinsic.
    """

    reduce: MlpParams
    embed: MlpParams
    point: MlpParams


def init_roi(feat_dim: int, num_classes: int, embed_dim: int,
             rng: np.random.Generator, dtype=np.float32) -> RoiParams:
    reduced = embed_dim
    return RoiParams(
        reduce=ad.init_mlp([feat_dim, reduced], rng, dtype, name="roi.reduce"),
        embed=ad.init_mlp([reduced + num_classes, embed_dim, embed_dim], rng, dtype, name="roi.embed"),
        point=ad.init_mlp([reduced + 4, embed_dim, 3], rng, dtype, name="roi.point"),
    )


def roi_param_list(params: RoiParams) -> list[Tensor]:
    return (ad.mlp_params_list(params.reduce) + ad.mlp_params_list(params.embed)
            + ad.mlp_params_list(params.point))


def encode_roi(roi_feat: np.ndarray, class_scores: np.ndarray, cam: CameraModel,
               params: RoiParams) -> tuple[np.ndarray, np.ndarray]:
    """Encode one 2D proposal into (embedding [C], ego-frame point [3]).

    The point head emits (u_norm, v_norm, depth) on the camera's token
    grid; non-positive depths clamp to the 0.5 m floor and bump the
    ``memory.roi_depth_clamped`` counter.
    """
    dtype = params.reduce.weights[0].dtype
    feat = ad.tensor(np.asarray(roi_feat, dtype=dtype).reshape(1, -1))
    reduced = ad.mlp_apply(params.reduce, feat)
    scores = ad.tensor(np.asarray(class_scores, dtype=dtype).reshape(1, -1))
    emb = ad.mlp_apply(params.embed, ad.concat([reduced, scores], axis=1))

    intr = np.array([cam.fx / cam.w_feat, cam.fy / cam.h_feat,
                     cam.cx / cam.w_feat, cam.cy / cam.h_feat], dtype=dtype)
    raw = ad.mlp_apply(params.point, ad.concat([reduced, ad.tensor(intr.reshape(1, 4))], axis=1))
    u_norm, v_norm, depth = (float(x) for x in raw.data[0])
    if depth <= 0.0:
        diagnostics.bump("memory.roi_depth_clamped")
        depth = DEPTH_FLOOR
    frustum = cam.unproject(u_norm * cam.w_feat, v_norm * cam.h_feat, depth)
    point = apply_homogeneous(invert_homogeneous(cam.extrinsic), frustum)
    return emb.data[0].copy(), point
