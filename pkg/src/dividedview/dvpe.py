"""Divided-view position embedding.

Reference points and camera-ray points are gathered per wedge, rotated by
the wedge's ``theta_v`` into the shared virtual frame, normalized to the
perception range, and encoded:

* queries: sine-cosine features of the virtual 3D point, then an MLP;
* keys: the flattened virtual ray (all depth bins of a token), then an
  MLP.

Because every wedge is rotated onto the same canonical frame, two points
related by a whole-wedge rotation produce identical embeddings; that is
what makes the embedding independent of which camera saw the point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import MlpParams, Tensor
from .geom import make_rotation_z
from .partition import ViewPartition


@dataclass(frozen=True)
class NormRange:
    """Perception volume mapped onto [0, 1] per axis before encoding."""

    x_min: float = -61.2
    x_max: float = 61.2
    y_min: float = -61.2
    y_max: float = 61.2
    z_min: float = -10.0
    z_max: float = 10.0

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def span(self) -> np.ndarray:
        return np.array([self.x_max - self.x_min, self.y_max - self.y_min,
                         self.z_max - self.z_min])


@dataclass
class DvpeParams:
    """Query (psi) and key (xi) position encoders, output dim C each."""

    psi: MlpParams
    xi: MlpParams
    num_freqs: int
    norm: NormRange = field(default_factory=NormRange)

    def __post_init__(self):
        if self.psi.out_dim != self.xi.out_dim:
            raise ValueError("query and key encoders must share the output dim")

    @property
    def embed_dim(self) -> int:
        return self.psi.out_dim


def init_dvpe(embed_dim: int, num_freqs: int, num_depths: int,
              rng: np.random.Generator, dtype=np.float32,
              norm: NormRange | None = None) -> DvpeParams:
    psi = ad.init_mlp([3 * 2 * num_freqs, embed_dim, embed_dim], rng, dtype, name="dvpe.psi")
    xi = ad.init_mlp([num_depths * 3, 4 * embed_dim, embed_dim], rng, dtype, name="dvpe.xi")
    return DvpeParams(psi=psi, xi=xi, num_freqs=num_freqs, norm=norm or NormRange())


@dataclass
class VirtualCoords:
    """Per-wedge rotated points with validity masks (double precision)."""

    query_points: np.ndarray   # [V, Lq, 3]
    ray_points: np.ndarray     # [V, Lk, D, 3]
    query_mask: np.ndarray     # [V, Lq]
    key_mask: np.ndarray       # [V, Lk]


def rotation_stack(part: ViewPartition) -> np.ndarray:
    """[V, 3, 3] rotation by each wedge's ``theta_v``."""
    return np.stack([make_rotation_z(t) for t in part.theta_v], axis=0)


def to_virtual(part_q: ViewPartition, ref_points: np.ndarray,
               part_k: ViewPartition, ray_points: np.ndarray) -> VirtualCoords:
    """Gather, pad, and rotate reference/ray points into the virtual frame.

    Masked slots are zero.  ``ref_points`` is [n_q, 3]; ``ray_points`` is
    [n_k, D, 3].
    """
    from .partition import gather_pad

    q_pad, q_mask = gather_pad(np.asarray(ref_points, dtype=float), part_q)
    k_pad, k_mask = gather_pad(np.asarray(ray_points, dtype=float), part_k)
    rot_q = rotation_stack(part_q)
    rot_k = rotation_stack(part_k)
    vq = np.einsum("vij,vlj->vli", rot_q, q_pad)
    vk = np.einsum("vij,vldj->vldi", rot_k, k_pad)
    vq[~q_mask] = 0.0
    vk[~k_mask] = 0.0
    return VirtualCoords(query_points=vq, ray_points=vk, query_mask=q_mask, key_mask=k_mask)


def rotate_grouped(part: ViewPartition, grouped: Tensor) -> Tensor:
    """Differentiable rotation of gathered points [V, L, 3] by theta_v."""
    rot = rotation_stack(part).astype(grouped.dtype)
    # row-vector form: (R p)^T = p^T R^T
    return ad.matmul(grouped, ad.tensor(np.swapaxes(rot, 1, 2)))


def normalize_points(points: Tensor, norm: NormRange) -> Tensor:
    """Map the perception range onto [0, 1] per axis (exact at corners)."""
    lo = norm.lo.astype(points.dtype)
    inv_span = (1.0 / norm.span).astype(points.dtype)
    return ad.mul(ad.sub(points, ad.tensor(lo)), ad.tensor(inv_span))


def encode_query_pe(virtual_points: Tensor, mask: np.ndarray, params: DvpeParams) -> Tensor:
    """psi(R_v p): sincos features of the normalized virtual point -> MLP.

    ``virtual_points`` is [V, Lq, 3]; output [V, Lq, C] with masked slots
    zeroed.
    """
    V, L, _ = virtual_points.shape
    x = normalize_points(virtual_points, params.norm)
    x = ad.scale(ad.reshape(x, (V * L, 3)), 2.0 * np.pi)
    enc = ad.sincos_encode(x, params.num_freqs)
    pe = ad.mlp_apply(params.psi, enc)
    pe = ad.reshape(pe, (V, L, params.embed_dim))
    gate = mask.astype(pe.dtype)[:, :, None]
    return ad.mul(pe, ad.tensor(gate))


def encode_key_pe(virtual_rays: Tensor, mask: np.ndarray, params: DvpeParams) -> Tensor:
    """xi(R_v ray): flattened normalized virtual ray -> MLP, per token.

    ``virtual_rays`` is [V, Lk, D, 3]; output [V, Lk, C], masked slots zero.
    """
    V, L, D, _ = virtual_rays.shape
    x = normalize_points(ad.reshape(virtual_rays, (V * L * D, 3)), params.norm)
    pe = ad.mlp_apply(params.xi, ad.reshape(x, (V * L, D * 3)))
    pe = ad.reshape(pe, (V, L, params.embed_dim))
    gate = mask.astype(pe.dtype)[:, :, None]
    return ad.mul(pe, ad.tensor(gate))


def dvpe_param_list(params: DvpeParams) -> list[Tensor]:
    return ad.mlp_params_list(params.psi) + ad.mlp_params_list(params.xi)
