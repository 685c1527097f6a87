"""Exact 3D geometry: z-rotations, homogeneous transforms, camera rays.

Conventions used throughout the package:

* World/ego frame is right-handed, z up; BEV angles are ``atan2(y, x)``
  about the z axis.
* A camera's frustum frame looks along +x, with +y left and +z up.
  Pixel (u, v) at depth d unprojects to ``(d, -d*(u-cx)/fx, -d*(v-cy)/fy)``
  so that increasing u moves right in the image and increasing v moves
  down.
* Extrinsics map world coordinates INTO the frustum frame; rays go the
  other way through the inverse.

All functions are pure, double precision, and thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


def make_rotation_z(theta: float) -> np.ndarray:
    """3x3 rotation about z by ``theta`` radians (adds theta to BEV angles)."""
    if not np.isfinite(theta):
        raise ValueError(f"rotation angle must be finite, got {theta}")
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]; idempotent."""
    if not np.isfinite(a):
        raise ValueError(f"angle must be finite, got {a}")
    r = np.mod(a, TWO_PI)
    if r > np.pi:
        r -= TWO_PI
    return float(r)


def make_homogeneous(rot: np.ndarray, trans) -> np.ndarray:
    H = np.eye(4)
    H[:3, :3] = rot
    H[:3, 3] = np.asarray(trans, dtype=float)
    return H


def check_homogeneous(H: np.ndarray, tol: float = 1e-9) -> None:
    """Validate the HomMat4 invariants: affine last row, orthonormal rotation."""
    H = np.asarray(H)
    if H.shape != (4, 4):
        raise ValueError(f"homogeneous transform must be 4x4, got {H.shape}")
    if not np.allclose(H[3], [0.0, 0.0, 0.0, 1.0], atol=tol):
        raise ValueError("last row of homogeneous transform must be (0,0,0,1)")
    R = H[:3, :3]
    if not np.allclose(R.T @ R, np.eye(3), atol=tol):
        raise ValueError("rotation block is not orthonormal")


def invert_homogeneous(H: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a rigid transform."""
    R = H[:3, :3]
    t = H[:3, 3]
    return make_homogeneous(R.T, -R.T @ t)


def apply_homogeneous(H: np.ndarray, p) -> np.ndarray:
    """Affine image of point(s) ``p`` ([3] or [n, 3]) under ``H``."""
    p = np.asarray(p, dtype=float)
    return p @ H[:3, :3].T + H[:3, 3]


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera over a feature-map grid.

    ``fx, fy, cx, cy`` are in feature-token pixel units on an
    ``h_feat x w_feat`` grid; ``extrinsic`` maps world -> frustum;
    ``depths`` holds the strictly increasing depth-bin values in meters.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: np.ndarray
    h_feat: int
    w_feat: int
    depths: np.ndarray

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        d = np.asarray(self.depths, dtype=float)
        if d.ndim != 1 or d.size < 1:
            raise ValueError("need at least one depth bin")
        if (d <= 0).any() or (np.diff(d) <= 0).any():
            raise ValueError("depth bins must be strictly increasing and positive")
        check_homogeneous(self.extrinsic)
        object.__setattr__(self, "depths", d)
        object.__setattr__(self, "extrinsic", np.asarray(self.extrinsic, dtype=float))

    @property
    def num_tokens(self) -> int:
        return self.h_feat * self.w_feat

    def unproject(self, u, v, d):
        """Pixel + depth -> frustum-frame point(s); inputs broadcast."""
        u, v, d = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), np.asarray(d, float))
        return np.stack([d, -d * (u - self.cx) / self.fx, -d * (v - self.cy) / self.fy], axis=-1)

    def project(self, p_frustum: np.ndarray):
        """Frustum-frame points [n, 3] -> (u, v, depth) arrays."""
        p = np.asarray(p_frustum, dtype=float)
        x = p[..., 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.cx - self.fx * p[..., 1] / x
            v = self.cy - self.fy * p[..., 2] / x
        return u, v, x

    def token_centers(self):
        """Pixel coordinates (u, v) of all tokens, row-major over (v, u)."""
        vs, us = np.meshgrid(np.arange(self.h_feat) + 0.5, np.arange(self.w_feat) + 0.5, indexing="ij")
        return us.reshape(-1), vs.reshape(-1)


def default_depth_bins(num: int, near: float = 1.0, far: float = 60.0) -> np.ndarray:
    """Linearly spaced depth bins on [near, far]."""
    if num == 1:
        return np.array([far])
    return np.linspace(near, far, num)


def make_camera(yaw: float, position, fov_deg: float, h_feat: int, w_feat: int,
                depths: np.ndarray) -> CameraModel:
    """Camera at ``position`` facing BEV angle ``yaw`` with the given FOV.

    Focal length is derived from the horizontal FOV over the token grid;
    the vertical focal matches (square tokens).
    """
    half = np.deg2rad(fov_deg) / 2.0
    fx = (w_feat / 2.0) / np.tan(half)
    # world -> frustum: rotate so camera forward (+x) aligns with yaw
    R = make_rotation_z(yaw).T
    t = -R @ np.asarray(position, dtype=float)
    return CameraModel(fx=fx, fy=fx, cx=w_feat / 2.0, cy=h_feat / 2.0,
                       extrinsic=make_homogeneous(R, t), h_feat=h_feat,
                       w_feat=w_feat, depths=np.asarray(depths, dtype=float))


@dataclass
class RayGrid:
    """World-frame ray points per image token.

    ``ray_points`` is [tokens, D, 3]; ``far_points`` is the deepest point of
    each ray (used for wedge assignment); ``view_index`` records the owning
    camera per token.
    """

    ray_points: np.ndarray
    far_points: np.ndarray
    view_index: np.ndarray

    @property
    def num_tokens(self) -> int:
        return self.ray_points.shape[0]

    @property
    def num_depths(self) -> int:
        return self.ray_points.shape[1]


def discretize_rays(cam: CameraModel, view: int = 0) -> RayGrid:
    """Camera rays through every token at every depth bin, in world frame."""
    us, vs = cam.token_centers()
    D = cam.depths.size
    # [tokens, D] pixel/depth grids -> frustum points -> world
    u = np.repeat(us[:, None], D, axis=1)
    v = np.repeat(vs[:, None], D, axis=1)
    d = np.broadcast_to(cam.depths[None, :], u.shape)
    frustum = cam.unproject(u, v, d)
    H_inv = invert_homogeneous(cam.extrinsic)
    world = apply_homogeneous(H_inv, frustum.reshape(-1, 3)).reshape(cam.num_tokens, D, 3)
    return RayGrid(ray_points=world, far_points=world[:, -1, :].copy(),
                   view_index=np.full(cam.num_tokens, view, dtype=np.intp))


def discretize_rig(cams: list[CameraModel]) -> RayGrid:
    """Concatenated ray grids of all rig cameras, view-major token order."""
    grids = [discretize_rays(c, i) for i, c in enumerate(cams)]
    return RayGrid(
        ray_points=np.concatenate([g.ray_points for g in grids], axis=0),
        far_points=np.concatenate([g.far_points for g in grids], axis=0),
        view_index=np.concatenate([g.view_index for g in grids], axis=0),
    )
