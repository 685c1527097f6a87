"""The full decoder: query initialization, stacked temporal + visibility
attention layers, the local prediction head, and the local-to-world
back-transform.

Per layer, queries first exchange information with themselves and the
temporal memory, then the world is re-partitioned at that layer's shift
angle, queries and image tokens move to their wedge's virtual frame, and
cross-attention runs independently per wedge.  The head predicts boxes in
the virtual frame; centers, yaws, and velocities come back to the world
frame through the inverse wedge rotation:

    c = P_q + Rz(-theta_v) c_hat,   alpha = alpha_hat - theta_v,
    v = Rz(-theta_v) v_hat.

Every layer emits a full prediction set (deep supervision).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import (AttnBlockParams, attn_block_param_list, init_attn_block,
                        temporal_attention, visibility_cross_attention)
from .autodiff import MlpParams, Tensor
from .dvpe import (DvpeParams, NormRange, dvpe_param_list, encode_key_pe,
                   encode_query_pe, init_dvpe, rotate_grouped, rotation_stack)
from .geom import RayGrid, make_rotation_z, wrap_angle
from .memory import (MemoryEntry, MemoryQueue, MemoryView, RoiParams, encode_roi,
                     init_roi, push_frame, roi_param_list, topk_select)
from .partition import PartitionConfig, ViewPartition, gather_pad, partition_items

# reg head output columns: center offset, log-size, yaw (sin, cos), velocity
REG_DIM = 10


@dataclass
class ModelConfig:
    embed_dim: int = 256
    heads: int = 8
    layers: int = 6
    num_queries: int = 900
    extra_groups: int = 0
    extra_queries: int = 900
    num_classes: int = 4
    num_views: int = 6
    theta_start: float = 0.0
    shift_step: float = float(np.deg2rad(20.0))
    query_pe_freqs: int = 64
    ffn_mult: int = 4
    feat_dim: int = 15
    roi_feat_dim: int = 15
    num_depths: int = 8
    cylinder_radius: float = 55.0
    cylinder_z_min: float = -5.0
    cylinder_z_max: float = 3.0
    norm: NormRange = field(default_factory=NormRange)
    use_dvm: bool = True           # off: single global wedge, unrotated PE
    use_temporal: bool = True      # off: skip the temporal attention stage
    use_memory: bool = True        # off: temporal stage is pure self-attention
    mem_frames: int = 4
    mem_topk_decoder: int = 256
    mem_topk_roi: int = 128
    dtype: str = "float32"

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def total_queries(self) -> int:
        return self.num_queries + self.extra_groups * self.extra_queries

    def partition_config(self) -> PartitionConfig:
        if self.use_dvm:
            return PartitionConfig(self.num_views, self.theta_start, self.shift_step)
        return PartitionConfig(1, 0.0, 0.0)

    def make_memory_queue(self) -> MemoryQueue:
        return MemoryQueue(self.mem_frames, self.mem_topk_decoder, self.mem_topk_roi)


@dataclass
class LayerParams:
    temporal: AttnBlockParams
    cross: AttnBlockParams


@dataclass
class ModelParams:
    cfg: ModelConfig
    query_embed: Tensor
    ref_points: Tensor
    feat_w: Tensor
    feat_b: Tensor
    feat_ln_g: Tensor
    feat_ln_b: Tensor
    dvpe: DvpeParams
    psi_world: MlpParams
    motion: MlpParams
    roi: RoiParams
    layers: list[LayerParams]
    head_ln_g: Tensor
    head_ln_b: Tensor
    reg_head: MlpParams
    cls_head: MlpParams

    def named(self) -> dict[str, Tensor]:
        """Deterministically ordered name -> tensor map (checkpoint order)."""
        out: dict[str, Tensor] = {
            "query_embed": self.query_embed,
            "ref_points": self.ref_points,
            "feat.w": self.feat_w,
            "feat.b": self.feat_b,
            "feat.ln.g": self.feat_ln_g,
            "feat.ln.b": self.feat_ln_b,
        }

        def mlp(prefix: str, m: MlpParams):
            for i, (w, b) in enumerate(zip(m.weights, m.biases)):
                out[f"{prefix}.w{i}"] = w
                out[f"{prefix}.b{i}"] = b

        mlp("dvpe.psi", self.dvpe.psi)
        mlp("dvpe.xi", self.dvpe.xi)
        mlp("psi_world", self.psi_world)
        mlp("motion", self.motion)
        mlp("roi.reduce", self.roi.reduce)
        mlp("roi.embed", self.roi.embed)
        mlp("roi.point", self.roi.point)
        for li, layer in enumerate(self.layers):
            for tag, block in (("temporal", layer.temporal), ("cross", layer.cross)):
                p = f"layer{li}.{tag}"
                m = block.mha
                out[f"{p}.wq"], out[f"{p}.bq"] = m.wq, m.bq
                out[f"{p}.wk"], out[f"{p}.bk"] = m.wk, m.bk
                out[f"{p}.wv"], out[f"{p}.bv"] = m.wv, m.bv
                out[f"{p}.wo"], out[f"{p}.bo"] = m.wo, m.bo
                out[f"{p}.ln_q.g"], out[f"{p}.ln_q.b"] = block.ln_q_gamma, block.ln_q_beta
                out[f"{p}.ln_f.g"], out[f"{p}.ln_f.b"] = block.ln_f_gamma, block.ln_f_beta
                mlp(f"{p}.ffn", block.ffn)
        out["head.ln.g"] = self.head_ln_g
        out["head.ln.b"] = self.head_ln_b
        mlp("head.reg", self.reg_head)
        mlp("head.cls", self.cls_head)
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())


def init_reference_points(num: int, radius: float, z_min: float, z_max: float,
                          rng: np.random.Generator) -> np.ndarray:
    """Uniform samples over a cylinder volume (area-uniform in the disk)."""
    if radius <= 0:
        raise ValueError("cylinder radius must be positive")
    angle = rng.uniform(0.0, 2.0 * np.pi, size=num)
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, size=num))
    z = rng.uniform(z_min, z_max, size=num)
    return np.stack([r * np.cos(angle), r * np.sin(angle), z], axis=1)


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    dt = cfg.np_dtype
    C = cfg.embed_dim
    M = cfg.total_queries
    bound = 1.0 / np.sqrt(C)
    refs = init_reference_points(M, cfg.cylinder_radius, cfg.cylinder_z_min,
                                 cfg.cylinder_z_max, rng)
    fb = 1.0 / np.sqrt(cfg.feat_dim)
    return ModelParams(
        cfg=cfg,
        query_embed=ad.param(rng.uniform(-bound, bound, size=(M, C)).astype(dt), name="query_embed"),
        ref_points=ad.param(refs.astype(dt), name="ref_points"),
        feat_w=ad.param(rng.uniform(-fb, fb, size=(cfg.feat_dim, C)).astype(dt), name="feat.w"),
        feat_b=ad.param(rng.uniform(-fb, fb, size=(C,)).astype(dt), name="feat.b"),
        feat_ln_g=ad.param(np.ones(C, dtype=dt), name="feat.ln.g"),
        feat_ln_b=ad.param(np.zeros(C, dtype=dt), name="feat.ln.b"),
        dvpe=init_dvpe(C, cfg.query_pe_freqs, cfg.num_depths, rng, dt, cfg.norm),
        psi_world=ad.init_mlp([3 * 2 * cfg.query_pe_freqs, C, C], rng, dt, name="psi_world"),
        motion=ad.init_mlp([13, C, C], rng, dt, name="motion"),
        roi=init_roi(cfg.roi_feat_dim, cfg.num_classes, C, rng, dt),
        layers=[LayerParams(temporal=init_attn_block(C, cfg.heads, rng, dt, cfg.ffn_mult,
                                                     name=f"layer{i}.temporal"),
                            cross=init_attn_block(C, cfg.heads, rng, dt, cfg.ffn_mult,
                                                  name=f"layer{i}.cross"))
                for i in range(cfg.layers)],
        head_ln_g=ad.param(np.ones(C, dtype=dt), name="head.ln.g"),
        head_ln_b=ad.param(np.zeros(C, dtype=dt), name="head.ln.b"),
        reg_head=ad.init_mlp([C, C, REG_DIM], rng, dt, name="head.reg"),
        cls_head=ad.init_mlp([C, C, cfg.num_classes], rng, dt, name="head.cls"),
    )


# ---------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------

@dataclass
class LocalBox:
    """Head output in a wedge's virtual frame."""

    center_offset: np.ndarray   # [3] meters, relative to the rotated reference point
    log_size: np.ndarray        # [3]
    yaw: float                  # radians, virtual frame
    velocity: np.ndarray        # [2] m/s, virtual frame
    class_logits: np.ndarray


@dataclass
class WorldBox:
    center: np.ndarray
    size: np.ndarray
    yaw: float
    velocity: np.ndarray
    class_probs: np.ndarray
    score: float
    label: int


def local_to_world(box: LocalBox, ref_point: np.ndarray, theta_v: float) -> WorldBox:
    """Bring a virtual-frame prediction back to the world frame.

    Algebraically ``c = R_v^-1 (R_v P_q + c_hat)`` collapses to
    ``P_q + R_v^-1 c_hat``; yaw subtracts ``theta_v`` (the wedge rotation
    adds it), and velocity rotates like the center offset.
    """
    if not np.isfinite(theta_v):
        raise ValueError("theta_v must be finite")
    rot_inv = make_rotation_z(-theta_v)
    center = np.asarray(ref_point, dtype=float) + rot_inv @ np.asarray(box.center_offset, dtype=float)
    vel = rot_inv[:2, :2] @ np.asarray(box.velocity, dtype=float)
    probs = 1.0 / (1.0 + np.exp(-np.asarray(box.class_logits, dtype=float)))
    return WorldBox(center=center, size=np.exp(np.asarray(box.log_size, dtype=float)),
                    yaw=wrap_angle(box.yaw - theta_v), velocity=vel, class_probs=probs,
                    score=float(probs.max()), label=int(probs.argmax()))


def world_to_local(box: WorldBox, ref_point: np.ndarray, theta_v: float) -> LocalBox:
    """Inverse of ``local_to_world`` (used by round-trip oracles)."""
    rot = make_rotation_z(theta_v)
    offset = rot @ (np.asarray(box.center, dtype=float) - np.asarray(ref_point, dtype=float))
    logits = np.asarray(box.class_probs, dtype=float)
    logits = np.log(logits) - np.log1p(-logits)
    return LocalBox(center_offset=offset, log_size=np.log(np.asarray(box.size, dtype=float)),
                    yaw=wrap_angle(box.yaw + theta_v),
                    velocity=rot[:2, :2] @ np.asarray(box.velocity, dtype=float),
                    class_logits=logits)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

@dataclass
class LayerPrediction:
    """World-frame box tensors of one decoder layer (deep supervision)."""

    center: Tensor        # [M, 3]
    log_size: Tensor      # [M, 3]
    yaw_sincos: Tensor    # [M, 2] world-frame (sin, cos), unnormalized
    velocity: Tensor      # [M, 2]
    class_logits: Tensor  # [M, K]
    theta_v: np.ndarray   # [M] wedge rotation used per query
    groups: np.ndarray    # [M] wedge index per query


@dataclass
class ForwardResult:
    layer_preds: list[LayerPrediction]
    final_embeddings: Tensor
    group_rows: list[np.ndarray]          # query rows per assignment group
    partitions: list[tuple[ViewPartition, ViewPartition]]
    attention: list | None = None


def encode_world_pe(points: Tensor, psi: MlpParams, num_freqs: int, norm: NormRange) -> Tensor:
    """Global-frame position encoding (no wedge rotation)."""
    from .dvpe import normalize_points

    x = ad.scale(normalize_points(points, norm), 2.0 * np.pi)
    return ad.mlp_apply(psi, ad.sincos_encode(x, num_freqs))


def head_apply(params: ModelParams, emb: Tensor) -> tuple[Tensor, Tensor]:
    """Shared prediction head: [M, C] -> (reg [M, 10], logits [M, K])."""
    e = ad.layernorm(emb, params.head_ln_g, params.head_ln_b)
    return ad.mlp_apply(params.reg_head, e), ad.mlp_apply(params.cls_head, e)


def local_head(params: ModelParams, embedding) -> LocalBox:
    """Head output of a single query embedding as a LocalBox."""
    emb = embedding if isinstance(embedding, Tensor) else ad.tensor(
        np.asarray(embedding, dtype=params.cfg.np_dtype))
    reg, logits = head_apply(params, ad.reshape(emb, (1, emb.data.size)))
    r = reg.data[0].astype(float)
    return LocalBox(center_offset=r[0:3], log_size=r[3:6],
                    yaw=float(np.arctan2(r[6], r[7])), velocity=r[8:10],
                    class_logits=logits.data[0].astype(float))


def _columns(t: Tensor, lo: int, hi: int) -> Tensor:
    """Differentiable column slice via a constant selection matrix."""
    sel = np.zeros((t.shape[1], hi - lo), dtype=t.dtype)
    sel[lo:hi] = np.eye(hi - lo, dtype=t.dtype)
    return ad.matmul(t, ad.tensor(sel))


def _rotate_rows(vectors: Tensor, mats: np.ndarray) -> Tensor:
    """Apply per-row constant rotation: [M, k] rows through [M, k, k] mats."""
    M, k = vectors.shape
    rows = ad.reshape(vectors, (M, 1, k))
    out = ad.matmul(rows, ad.tensor(np.swapaxes(mats, 1, 2).astype(vectors.dtype)))
    return ad.reshape(out, (M, k))


def _local_to_world_tensors(reg: Tensor, ref: Tensor, theta_v: np.ndarray):
    """Vectorized Eq.-7 back-transform over all queries."""
    M = reg.shape[0]
    c_hat = _columns(reg, 0, 3)
    log_size = _columns(reg, 3, 6)
    yaw_sc = _columns(reg, 6, 8)
    vel = _columns(reg, 8, 10)

    rot3 = np.stack([make_rotation_z(-t) for t in theta_v])            # [M,3,3]
    center = ad.add(ref, _rotate_rows(c_hat, rot3))
    vel_w = _rotate_rows(vel, rot3[:, :2, :2])
    # (sin, cos) pairs transform by Rz2(+theta) under alpha -> alpha - theta
    c, s = np.cos(theta_v), np.sin(theta_v)
    rot_sc = np.stack([np.stack([c, -s], axis=1), np.stack([s, c], axis=1)], axis=1)
    yaw_w = _rotate_rows(yaw_sc, rot_sc)
    return center, log_size, yaw_w, vel_w


def decoder_forward(params: ModelParams, features: np.ndarray, rays: RayGrid,
                    mem_view: MemoryView | None = None, training: bool = False,
                    capture: dict | None = None) -> ForwardResult:
    """Run the decoder over one frame.

    ``features`` is [tokens, feat_dim] in the ray grid's token order.
    ``mem_view`` carries ego-compensated memory (None or empty acts as the
    first frame).  At inference only the default query group is active.
    """
    cfg = params.cfg
    dt = cfg.np_dtype
    C = cfg.embed_dim
    M = cfg.total_queries if training else cfg.num_queries
    if features.shape != (rays.num_tokens, cfg.feat_dim):
        raise ValueError(f"features {features.shape} do not match "
                         f"({rays.num_tokens}, {cfg.feat_dim})")

    rows = np.arange(M, dtype=np.intp)
    q = ad.take_rows(params.query_embed, rows)
    ref_t = ad.take_rows(params.ref_points, rows)
    ref_np = ref_t.data.astype(float)
    tags = np.zeros(M, dtype=np.intp)
    group_rows = [np.arange(cfg.num_queries, dtype=np.intp)]
    for g in range(cfg.extra_groups if training else 0):
        lo = cfg.num_queries + g * cfg.extra_queries
        tags[lo: lo + cfg.extra_queries] = g + 1
        group_rows.append(np.arange(lo, lo + cfg.extra_queries, dtype=np.intp))

    feats = ad.tensor(np.asarray(features, dtype=dt))
    tokens = ad.layernorm(ad.add(ad.matmul(feats, params.feat_w), params.feat_b),
                          params.feat_ln_g, params.feat_ln_b)

    q_world_pe = None
    mem_emb_t = mem_pe_t = None
    if cfg.use_temporal:
        q_world_pe = encode_world_pe(ref_t, params.psi_world, cfg.query_pe_freqs, cfg.norm)
        if cfg.use_memory and mem_view is not None and mem_view.num_entries:
            mem_emb_t = ad.tensor(mem_view.embeddings.astype(dt))
            mem_points = ad.tensor(mem_view.points.astype(dt))
            mem_pe_t = ad.add(
                encode_world_pe(mem_points, params.psi_world, cfg.query_pe_freqs, cfg.norm),
                ad.mlp_apply(params.motion, ad.tensor(mem_view.motion_feats.astype(dt))))

    pcfg = cfg.partition_config()
    preds: list[LayerPrediction] = []
    parts: list[tuple[ViewPartition, ViewPartition]] = []
    attn_capture: list | None = [] if capture is not None else None

    for li, layer in enumerate(params.layers):
        if cfg.use_temporal:
            q = temporal_attention(q, q_world_pe, mem_emb_t, mem_pe_t, tags,
                                   layer.temporal)

        part_q = partition_items(ref_np, pcfg, li)
        part_k = partition_items(rays.far_points, pcfg, li)
        if not cfg.use_dvm:
            part_q.theta_v[:] = 0.0
            part_k.theta_v[:] = 0.0
        parts.append((part_q, part_k))

        V, Lq = part_q.num_views, part_q.pad_len
        q_pts = ad.reshape(ad.take_rows(ref_t, part_q.padded_index().reshape(-1)), (V, Lq, 3))
        q_pe = encode_query_pe(rotate_grouped(part_q, q_pts), part_q.mask, params.dvpe)

        rays_pad, _ = gather_pad(rays.ray_points, part_k)
        virtual_rays = np.einsum("vij,vldj->vldi", rotation_stack(part_k), rays_pad)
        k_pe = encode_key_pe(ad.tensor(virtual_rays.astype(dt)), part_k.mask, params.dvpe)

        q = visibility_cross_attention(q, tokens, part_q, part_k, q_pe, k_pe,
                                       layer.cross, attn_capture)

        reg, logits = head_apply(params, q)
        theta_q = part_q.theta_v[part_q.group_of_item]
        center, log_size, yaw_w, vel_w = _local_to_world_tensors(reg, ref_t, theta_q)
        preds.append(LayerPrediction(center=center, log_size=log_size, yaw_sincos=yaw_w,
                                     velocity=vel_w, class_logits=logits,
                                     theta_v=theta_q, groups=part_q.group_of_item.copy()))

    if capture is not None:
        capture["attention"] = attn_capture
        capture["partitions"] = parts
    return ForwardResult(layer_preds=preds, final_embeddings=q, group_rows=group_rows,
                         partitions=parts, attention=attn_capture)


def world_boxes(pred: LayerPrediction, rows: np.ndarray | None = None) -> list[WorldBox]:
    """Decode a layer's tensors into WorldBox values (default group rows)."""
    M = pred.center.shape[0]
    if rows is None:
        rows = np.arange(M)
    probs = 1.0 / (1.0 + np.exp(-pred.class_logits.data[rows].astype(float)))
    centers = pred.center.data[rows].astype(float)
    sizes = np.exp(pred.log_size.data[rows].astype(float))
    yaws = np.arctan2(pred.yaw_sincos.data[rows, 0], pred.yaw_sincos.data[rows, 1]).astype(float)
    vels = pred.velocity.data[rows].astype(float)
    out = []
    for i in range(rows.size):
        p = probs[i]
        out.append(WorldBox(center=centers[i], size=sizes[i], yaw=float(yaws[i]),
                            velocity=vels[i], class_probs=p, score=float(p.max()),
                            label=int(p.argmax())))
    return out


def update_memory(params: ModelParams, queue: MemoryQueue, result: ForwardResult,
                  roi_inputs: list[tuple[np.ndarray, np.ndarray, int]],
                  cams, ego: np.ndarray, timestamp: float) -> None:
    """Push this frame's top-k decoder embeddings and encoded RoIs.

    ``roi_inputs`` holds (feature, class_scores, view) triples from the 2D
    proposal source.  Everything is stored detached; only default-group
    queries are eligible.
    """
    cfg = params.cfg
    final = result.layer_preds[-1]
    rows = result.group_rows[0]
    scores = 1.0 / (1.0 + np.exp(-final.class_logits.data[rows].astype(float)))
    scores = scores.max(axis=1)
    keep = topk_select(scores, queue.max_decoder)
    emb = result.final_embeddings.data
    dec_entries = [MemoryEntry(kind="decoder", embedding=emb[rows[i]].copy(),
                               point=final.center.data[rows[i]].astype(float).copy(),
                               timestamp=timestamp, ego=ego) for i in keep]

    roi_scored = []
    for feat, cls_scores, view in roi_inputs:
        roi_scored.append((float(np.max(cls_scores)), feat, cls_scores, view))
    order = topk_select(np.array([s for s, *_ in roi_scored]) if roi_scored else np.zeros(0),
                        queue.max_roi)
    roi_entries = []
    for i in order:
        _, feat, cls_scores, view = roi_scored[i]
        o_e, p_e = encode_roi(feat, cls_scores, cams[view], params.roi)
        roi_entries.append(MemoryEntry(kind="roi", embedding=o_e, point=p_e,
                                       timestamp=timestamp, ego=ego))
    push_frame(queue, dec_entries, roi_entries, ego, timestamp)
