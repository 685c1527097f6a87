"""Synthetic multi-camera scenes, oracle 2D proposals, detection metrics,
and the divided-vs-global attention cost benchmark.

The scene generator stands in for the dataset: boxes live in a static
world frame and drift with their velocity; the ego vehicle follows a
smooth random trajectory; a 6-camera ring (80 deg FOV at 60 deg spacing,
so adjacent views overlap) observes everything at 2 Hz.  The feature
renderer stands in for the CNN backbone: a token's feature is the sum,
over boxes visible in its view, of an angular-proximity kernel times a
class/size/range signature, plus optional Gaussian noise.  The signature
is a function of camera-relative geometry only, which keeps the whole
input pipeline rotation-equivariant.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import init_attn_block, oracle_global_attention, visibility_cross_attention
from . import autodiff as ad
from .geom import (CameraModel, apply_homogeneous, default_depth_bins, discretize_rig,
                   invert_homogeneous, make_camera, make_homogeneous, make_rotation_z,
                   wrap_angle)
from .model import WorldBox
from .partition import PartitionConfig, partition_items

AP_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_ERROR_THRESHOLD = 2.0

# per-class canonical (length, width, height); classes are abstract
CLASS_SIZES = np.array([
    [4.5, 1.9, 1.6],
    [2.0, 0.8, 1.6],
    [7.5, 2.6, 3.0],
    [0.8, 0.8, 1.8],
])


@dataclass
class SceneConfig:
    num_cams: int = 6
    fov_deg: float = 80.0
    h_feat: int = 16
    w_feat: int = 16
    num_depths: int = 8
    depth_near: float = 1.0
    depth_far: float = 60.0
    cam_height: float = 1.6
    num_classes: int = 4
    min_boxes: int = 3
    max_boxes: int = 8
    r_min: float = 5.0
    r_max: float = 32.0
    z_min: float = -0.5
    z_max: float = 1.0
    max_speed: float = 8.0
    frames: int = 1
    dt: float = 0.5
    ego_max_speed: float = 6.0
    ego_max_yaw_rate: float = 0.15
    feature_noise: float = 0.0
    kernel_sigma_px: float = 0.7

    @property
    def feat_dim(self) -> int:
        # class one-hot, log-size(3), range sincos(4), camera-frame velocity(2),
        # sub-token center offsets(2)
        return self.num_classes + 11


@dataclass
class GTBox:
    center: np.ndarray     # [3]
    size: np.ndarray       # [3]
    yaw: float
    velocity: np.ndarray   # [2]
    label: int


@dataclass
class FrameGT:
    timestamp: float
    ego: np.ndarray                # [4,4] world -> ego
    boxes: list[GTBox]


@dataclass
class Scene:
    cams: list[CameraModel]        # extrinsics in the ego frame (rig-fixed)
    frames: list[FrameGT]
    cfg: SceneConfig

    def gt_in_ego(self, frame: int) -> list[GTBox]:
        """Ground truth of one frame expressed in that frame's ego coordinates."""
        f = self.frames[frame]
        R = f.ego[:3, :3]
        out = []
        ego_yaw = np.arctan2(R[1, 0], R[0, 0])
        for b in f.boxes:
            out.append(GTBox(center=apply_homogeneous(f.ego, b.center),
                             size=b.size.copy(), yaw=wrap_angle(b.yaw + ego_yaw),
                             velocity=R[:2, :2] @ b.velocity, label=b.label))
        return out


def default_rig(cfg: SceneConfig) -> list[CameraModel]:
    depths = default_depth_bins(cfg.num_depths, cfg.depth_near, cfg.depth_far)
    yaws = [2.0 * np.pi * i / cfg.num_cams for i in range(cfg.num_cams)]
    return [make_camera(yaw, (0.0, 0.0, cfg.cam_height), cfg.fov_deg,
                        cfg.h_feat, cfg.w_feat, depths) for yaw in yaws]


def generate_scene(rng: np.random.Generator, cfg: SceneConfig) -> Scene:
    """Random multi-frame scene; boxes drift with velocity, ego drives."""
    n = int(rng.integers(cfg.min_boxes, cfg.max_boxes + 1))
    boxes0 = []
    for _ in range(n):
        ang = rng.uniform(0, 2 * np.pi)
        r = rng.uniform(cfg.r_min, cfg.r_max)
        center = np.array([r * np.cos(ang), r * np.sin(ang),
                           rng.uniform(cfg.z_min, cfg.z_max)])
        label = int(rng.integers(cfg.num_classes))
        size = CLASS_SIZES[label % len(CLASS_SIZES)] * rng.uniform(0.85, 1.15, size=3)
        speed = rng.uniform(0.0, cfg.max_speed)
        heading = rng.uniform(0, 2 * np.pi)
        vel = speed * np.array([np.cos(heading), np.sin(heading)])
        boxes0.append(GTBox(center=center, size=size, yaw=rng.uniform(-np.pi, np.pi),
                            velocity=vel, label=label))

    ego_speed = rng.uniform(0.0, cfg.ego_max_speed)
    yaw_rate = rng.uniform(-cfg.ego_max_yaw_rate, cfg.ego_max_yaw_rate)
    frames = []
    pos = np.zeros(3)
    yaw = 0.0
    for t in range(cfg.frames):
        pose = make_homogeneous(make_rotation_z(yaw), pos)      # ego -> world
        ego = invert_homogeneous(pose)                          # world -> ego
        boxes = [GTBox(center=b.center + t * cfg.dt * np.array([*b.velocity, 0.0]),
                       size=b.size.copy(), yaw=b.yaw, velocity=b.velocity.copy(),
                       label=b.label) for b in boxes0]
        frames.append(FrameGT(timestamp=t * cfg.dt, ego=ego, boxes=boxes))
        heading = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        pos = pos + ego_speed * cfg.dt * heading
        yaw = yaw + yaw_rate * cfg.dt
    return Scene(cams=default_rig(cfg), frames=frames, cfg=cfg)


# ---------------------------------------------------------------------------
# feature rendering (backbone substitute)
# ---------------------------------------------------------------------------

def _box_signature(cfg: SceneConfig, box: GTBox, cam_frame_center: np.ndarray,
                   cam_frame_vel: np.ndarray, du: float = 0.0, dv: float = 0.0) -> np.ndarray:
    """Camera-relative descriptor of a box; independent of world pose."""
    sig = np.zeros(cfg.feat_dim)
    sig[box.label] = 2.0
    k = cfg.num_classes
    sig[k: k + 3] = np.log(box.size)
    dist = np.linalg.norm(cam_frame_center)
    ds = 2.0 * np.pi * dist / cfg.depth_far
    sig[k + 3: k + 7] = [np.sin(ds), np.cos(ds), np.sin(2 * ds), np.cos(2 * ds)]
    sig[k + 7: k + 9] = cam_frame_vel / max(1.0, cfg.max_speed)
    sig[k + 9: k + 11] = [du, dv]
    return sig


def _visible_boxes(scene: Scene, view: int, frame: int):
    """Boxes of a frame in the camera frame, with their pixel projection."""
    cam = scene.cams[view]
    out = []
    for b in scene.gt_in_ego(frame):
        pc = apply_homogeneous(cam.extrinsic, b.center)
        if pc[0] < 0.5:
            continue
        u, v, _ = cam.project(pc[None, :])
        u, v = float(u[0]), float(v[0])
        if not (-1.0 <= u <= cam.w_feat + 1.0 and -1.0 <= v <= cam.h_feat + 1.0):
            continue
        R = cam.extrinsic[:2, :2]
        out.append((b, pc, u, v, R @ b.velocity))
    return out


def render_features(scene: Scene, view: int, frame: int,
                    rng: np.random.Generator | None = None,
                    noise_sigma: float | None = None) -> np.ndarray:
    """Token features of one view: [h_feat, w_feat, feat_dim]."""
    cfg = scene.cfg
    cam = scene.cams[view]
    sigma = cfg.feature_noise if noise_sigma is None else noise_sigma
    feats = np.zeros((cam.h_feat, cam.w_feat, cfg.feat_dim))
    us, vs = cam.token_centers()
    us = us.reshape(cam.h_feat, cam.w_feat)
    vs = vs.reshape(cam.h_feat, cam.w_feat)
    for b, pc, u, v, cam_vel in _visible_boxes(scene, view, frame):
        d2 = (us - u) ** 2 + (vs - v) ** 2
        kernel = np.exp(-d2 / (2.0 * cfg.kernel_sigma_px**2))
        base = _box_signature(cfg, b, pc, cam_vel)
        feats += kernel[:, :, None] * base[None, None, :]
        # sub-token offsets ride on the same kernel
        k = cfg.num_classes
        feats[:, :, k + 9] += kernel * (u - us)
        feats[:, :, k + 10] += kernel * (v - vs)
    if sigma > 0:
        if rng is None:
            raise ValueError("noise rendering needs an rng")
        feats = feats + rng.normal(0.0, sigma, size=feats.shape)
    return feats


def render_all_features(scene: Scene, frame: int, rng: np.random.Generator | None = None,
                        noise_sigma: float | None = None) -> np.ndarray:
    """All views stacked in ray-grid token order: [N*h*w, feat_dim]."""
    per_view = [render_features(scene, i, frame, rng, noise_sigma).reshape(-1, scene.cfg.feat_dim)
                for i in range(len(scene.cams))]
    return np.concatenate(per_view, axis=0)


# ---------------------------------------------------------------------------
# oracle 2D proposals (2D detector substitute)
# ---------------------------------------------------------------------------

@dataclass
class Proposal:
    box2d: np.ndarray          # [4] = (u0, v0, u1, v1) in token pixels
    feature: np.ndarray        # [feat_dim]
    class_scores: np.ndarray   # [num_classes]
    view: int


def _corners(box: GTBox) -> np.ndarray:
    l, w, h = box.size
    dx = np.array([l, l, l, l, -l, -l, -l, -l]) / 2
    dy = np.array([w, -w, w, -w, w, -w, w, -w]) / 2
    dz = np.array([h, h, -h, -h, h, h, -h, -h]) / 2
    R = make_rotation_z(box.yaw)
    return box.center[None, :] + (R @ np.stack([dx, dy, dz])).T


def oracle_2d_proposals(scene: Scene, view: int, frame: int,
                        rng: np.random.Generator | None = None,
                        jitter_px: float = 0.0, fp_rate: float = 0.0,
                        fn_rate: float = 0.0, confusion: float = 0.0) -> list[Proposal]:
    """Project visible GT boxes to 2D rectangles with controllable noise."""
    cfg = scene.cfg
    cam = scene.cams[view]
    if (jitter_px or fp_rate or fn_rate or confusion) and rng is None:
        raise ValueError("noisy proposals need an rng")
    ego_yaw_boxes = scene.gt_in_ego(frame)
    props: list[Proposal] = []
    for b in ego_yaw_boxes:
        pc = apply_homogeneous(cam.extrinsic, b.center)
        if pc[0] < 0.5:
            continue
        corners = apply_homogeneous(cam.extrinsic, _corners(b))
        corners = corners[corners[:, 0] > 0.25]
        if corners.shape[0] < 4:
            continue
        u, v, _ = cam.project(corners)
        rect = np.array([u.min(), v.min(), u.max(), v.max()])
        if rect[2] < 0 or rect[0] > cam.w_feat or rect[3] < 0 or rect[1] > cam.h_feat:
            continue
        if fn_rate and rng.uniform() < fn_rate:
            continue
        if jitter_px:
            rect = rect + rng.normal(0.0, jitter_px, size=4)
        R = cam.extrinsic[:2, :2]
        feat = _box_signature(cfg, b, pc, R @ b.velocity)
        if jitter_px:
            feat = feat + rng.normal(0.0, 0.05, size=feat.shape)
        scores = np.full(cfg.num_classes, confusion / max(1, cfg.num_classes - 1))
        scores[b.label] = 1.0 - confusion
        props.append(Proposal(box2d=rect, feature=feat, class_scores=scores, view=view))
        if fp_rate and rng.uniform() < fp_rate:
            fake = np.sort(rng.uniform(0, cam.w_feat, size=2))
            fake_v = np.sort(rng.uniform(0, cam.h_feat, size=2))
            label = int(rng.integers(cfg.num_classes))
            fp_scores = np.full(cfg.num_classes, confusion / max(1, cfg.num_classes - 1))
            fp_scores[label] = rng.uniform(0.3, 0.7)
            props.append(Proposal(box2d=np.array([fake[0], fake_v[0], fake[1], fake_v[1]]),
                                  feature=rng.normal(0.0, 1.0, size=cfg.feat_dim),
                                  class_scores=fp_scores, view=view))
    return props


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    mean_ap: float
    ap_per_threshold: dict[float, float]
    ap_per_class: dict[int, float]
    mate: float
    maoe: float
    mave: float
    num_gts: int
    num_preds: int

    def lines(self) -> list[str]:
        out = [f"mAP = {self.mean_ap:.6f}"]
        for thr, ap in sorted(self.ap_per_threshold.items()):
            out.append(f"AP@{thr:g}m = {ap:.6f}")
        for cls, ap in sorted(self.ap_per_class.items()):
            out.append(f"AP[class {cls}] = {ap:.6f}")
        out.append(f"mATE = {self.mate:.6f}")
        out.append(f"mAOE = {self.maoe:.6f}")
        out.append(f"mAVE = {self.mave:.6f}")
        out.append(f"gts = {self.num_gts}")
        out.append(f"preds = {self.num_preds}")
        return out


def _average_precision(scores: np.ndarray, tp_flags: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from score-ranked TP/FP flags."""
    if num_gt == 0:
        return float("nan")
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tp_flags[order].astype(float)
    fp = 1.0 - tp
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def _match_frame(preds: list[WorldBox], gts: list[GTBox], label: int, thr: float):
    """Greedy score-ordered BEV center-distance matching within one frame."""
    gt_idx = [i for i, g in enumerate(gts) if g.label == label]
    taken: set[int] = set()
    rows = []
    for p in sorted([p for p in preds if p.label == label], key=lambda p: -p.score):
        best, best_d = None, thr
        for i in gt_idx:
            if i in taken:
                continue
            d = float(np.linalg.norm(p.center[:2] - gts[i].center[:2]))
            if d <= best_d:
                best, best_d = i, d
        if best is not None:
            taken.add(best)
            rows.append((p, gts[best], best_d, True))
        else:
            rows.append((p, None, None, False))
    return rows


def evaluate(predictions: list[list[WorldBox]], gts: list[list[GTBox]]) -> MetricsReport:
    """Center-distance AP over the threshold set, plus TP error metrics.

    ``predictions[f]`` and ``gts[f]`` pair up frame-wise.  AP averages over
    classes that have ground truth; error metrics average over true
    positives at the 2 m threshold.
    """
    if len(predictions) != len(gts):
        raise ValueError("prediction/gt frame counts differ")
    labels = sorted({g.label for frame in gts for g in frame})
    ap_thr: dict[float, list[float]] = {t: [] for t in AP_THRESHOLDS}
    ap_cls: dict[int, list[float]] = {c: [] for c in labels}
    ate, aoe, ave = [], [], []

    for label in labels:
        num_gt = sum(1 for frame in gts for g in frame if g.label == label)
        for thr in AP_THRESHOLDS:
            scores, flags = [], []
            for preds_f, gts_f in zip(predictions, gts):
                for p, g, d, is_tp in _match_frame(preds_f, gts_f, label, thr):
                    scores.append(p.score)
                    flags.append(is_tp)
                    if is_tp and thr == TP_ERROR_THRESHOLD:
                        ate.append(d)
                        aoe.append(abs(wrap_angle(p.yaw - g.yaw)))
                        ave.append(float(np.linalg.norm(p.velocity - g.velocity[:2])))
            ap = _average_precision(np.array(scores), np.array(flags, dtype=bool), num_gt)
            if not np.isnan(ap):
                ap_thr[thr].append(ap)
                ap_cls[label].append(ap)

    per_thr = {t: float(np.mean(v)) if v else 0.0 for t, v in ap_thr.items()}
    per_cls = {c: float(np.mean(v)) if v else 0.0 for c, v in ap_cls.items()}
    mean_ap = float(np.mean([a for v in ap_thr.values() for a in v])) if labels else 0.0
    return MetricsReport(
        mean_ap=mean_ap, ap_per_threshold=per_thr, ap_per_class=per_cls,
        mate=float(np.mean(ate)) if ate else 0.0,
        maoe=float(np.mean(aoe)) if aoe else 0.0,
        mave=float(np.mean(ave)) if ave else 0.0,
        num_gts=sum(len(f) for f in gts), num_preds=sum(len(f) for f in predictions))


# ---------------------------------------------------------------------------
# attention cost benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    num_views: int
    num_tokens: int
    num_queries: int
    global_interactions: int
    divided_interactions: int
    mean_interactions_per_query: float
    padding_ratio: float
    time_global_s: float
    time_divided_s: float


def interaction_counts(part_q, part_k) -> np.ndarray:
    """Valid-key count seen by each query under the divided scheme."""
    k_sizes = np.array([g.size for g in part_k.groups])
    return k_sizes[part_q.group_of_item]


def bench_attention(view_counts: list[int], num_tokens: int, num_queries: int,
                    trials: int, rng: np.random.Generator,
                    embed_dim: int = 32, heads: int = 4) -> list[BenchRow]:
    """Exact interaction counts plus wall time for both attention paths."""
    rows = []
    for V in view_counts:
        pcfg = PartitionConfig(V, 0.0, 0.0)
        block = init_attn_block(embed_dim, heads, rng, np.float32, ffn_mult=2)
        g_int = d_int = 0
        pad = valid = 0
        t_g = t_d = 0.0
        for _ in range(trials):
            q_pts = np.column_stack([rng.normal(size=(num_queries, 2)) * 20,
                                     rng.uniform(-2, 2, size=num_queries)])
            k_pts = np.column_stack([rng.normal(size=(num_tokens, 2)) * 20,
                                     rng.uniform(-2, 2, size=num_tokens)])
            part_q = partition_items(q_pts, pcfg)
            part_k = partition_items(k_pts, pcfg)
            counts = interaction_counts(part_q, part_k)
            d_int += int(counts.sum())
            g_int += num_queries * num_tokens
            pad += part_k.num_views * part_k.pad_len
            valid += num_tokens

            q = ad.tensor(rng.normal(size=(num_queries, embed_dim)).astype(np.float32))
            f = ad.tensor(rng.normal(size=(num_tokens, embed_dim)).astype(np.float32))
            qpe = ad.tensor(np.zeros((V, part_q.pad_len, embed_dim), dtype=np.float32))
            kpe = ad.tensor(np.zeros((V, part_k.pad_len, embed_dim), dtype=np.float32))
            t0 = time.perf_counter()
            visibility_cross_attention(q, f, part_q, part_k, qpe, kpe, block)
            t_d += time.perf_counter() - t0

            member = part_q.group_of_item[:, None] == part_k.group_of_item[None, :]
            qpe_f = ad.tensor(np.zeros((num_queries, embed_dim), dtype=np.float32))
            kpe_f = ad.tensor(np.zeros((num_tokens, embed_dim), dtype=np.float32))
            t0 = time.perf_counter()
            oracle_global_attention(q, f, member, qpe_f, kpe_f, block)
            t_g += time.perf_counter() - t0
        n = trials * num_queries
        rows.append(BenchRow(num_views=V, num_tokens=num_tokens, num_queries=num_queries,
                             global_interactions=g_int, divided_interactions=d_int,
                             mean_interactions_per_query=d_int / n,
                             padding_ratio=pad / valid,
                             time_global_s=t_g, time_divided_s=t_d))
    return rows


def bench_report(rows: list[BenchRow]) -> str:
    cols = ["num_views", "num_tokens", "num_queries", "global_interactions",
            "divided_interactions", "mean_interactions_per_query", "padding_ratio",
            "time_global_s", "time_divided_s"]
    buf = io.StringIO()
    buf.write("\t".join(cols) + "\n")
    for r in rows:
        buf.write("\t".join(repr(getattr(r, c)) for c in cols) + "\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# scene file round trip
# ---------------------------------------------------------------------------

def scene_to_text(scene: Scene) -> str:
    """Plain-text scene serialization; floats via repr (lossless)."""
    w = io.StringIO()
    w.write("dividedview-scene 1\n")
    cfg = scene.cfg
    w.write(f"config {repr(cfg.fov_deg)} {cfg.num_classes} {repr(cfg.depth_far)} "
            f"{repr(cfg.max_speed)} {repr(cfg.kernel_sigma_px)} {repr(cfg.feature_noise)}\n")
    w.write(f"cameras {len(scene.cams)}\n")
    for c in scene.cams:
        w.write(f"camera {repr(c.fx)} {repr(c.fy)} {repr(c.cx)} {repr(c.cy)} {c.h_feat} {c.w_feat}\n")
        w.write("extrinsic " + " ".join(repr(x) for x in c.extrinsic.reshape(-1)) + "\n")
        w.write("depths " + " ".join(repr(x) for x in c.depths) + "\n")
    w.write(f"frames {len(scene.frames)}\n")
    for f in scene.frames:
        w.write(f"frame {repr(f.timestamp)} {len(f.boxes)}\n")
        w.write("ego " + " ".join(repr(x) for x in f.ego.reshape(-1)) + "\n")
        for b in f.boxes:
            vals = [*b.center, *b.size, b.yaw, *b.velocity]
            w.write("box " + " ".join(repr(float(x)) for x in vals) + f" {b.label}\n")
    return w.getvalue()


def scene_from_text(text: str) -> Scene:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    it = iter(lines)

    def expect(tag: str) -> list[str]:
        parts = next(it).split()
        if parts[0] != tag:
            raise ValueError(f"scene file: expected {tag!r}, got {parts[0]!r}")
        return parts[1:]

    head = next(it).split()
    if head[0] != "dividedview-scene" or head[1] != "1":
        raise ValueError("not a dividedview scene file (or unsupported version)")
    c = expect("config")
    ncams = int(expect("cameras")[0])
    cams = []
    for _ in range(ncams):
        cam = expect("camera")
        extr = np.array([float(x) for x in expect("extrinsic")]).reshape(4, 4)
        depths = np.array([float(x) for x in expect("depths")])
        cams.append(CameraModel(fx=float(cam[0]), fy=float(cam[1]), cx=float(cam[2]),
                                cy=float(cam[3]), extrinsic=extr, h_feat=int(cam[4]),
                                w_feat=int(cam[5]), depths=depths))
    cfg = SceneConfig(num_cams=ncams, fov_deg=float(c[0]), num_classes=int(c[1]),
                      depth_far=float(c[2]), max_speed=float(c[3]),
                      kernel_sigma_px=float(c[4]), feature_noise=float(c[5]),
                      h_feat=cams[0].h_feat, w_feat=cams[0].w_feat,
                      num_depths=cams[0].depths.size)
    nframes = int(expect("frames")[0])
    frames = []
    for _ in range(nframes):
        fhead = expect("frame")
        ts, nboxes = float(fhead[0]), int(fhead[1])
        ego = np.array([float(x) for x in expect("ego")]).reshape(4, 4)
        boxes = []
        for _ in range(nboxes):
            b = expect("box")
            vals = [float(x) for x in b[:-1]]
            boxes.append(GTBox(center=np.array(vals[0:3]), size=np.array(vals[3:6]),
                               yaw=vals[6], velocity=np.array(vals[7:9]), label=int(b[-1])))
        frames.append(FrameGT(timestamp=ts, ego=ego, boxes=boxes))
    return Scene(cams=cams, frames=frames, cfg=cfg)


def rays_for_scene(scene: Scene):
    return discretize_rig(scene.cams)
