"""SE(2) pose algebra, warp matrices, grid resampling, rectangle intersection.

Conventions: a ``Pose2`` is the transform taking ego-frame coordinates to
world coordinates; composition is the matrix product of the homogeneous
forms. Yaw lives in the half-open interval (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels

ORTHONORMAL_TOL = 1e-9


def wrap_angle(theta: float) -> float:
    """Normalize an angle into (-pi, pi]; -pi maps to +pi."""
    return math.pi - (math.pi - theta) % (2.0 * math.pi)


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw], dtype=np.float64)


def pose_compose(a: Pose2, b: Pose2) -> Pose2:
    """Group operation: apply b in a's frame (homogeneous matrix product a·b)."""
    ca, sa = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(
        a.x + ca * b.x - sa * b.y,
        a.y + sa * b.x + ca * b.y,
        a.yaw + b.yaw,
    )


def pose_inverse(p: Pose2) -> Pose2:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return Pose2(-(c * p.x + s * p.y), -(-s * p.x + c * p.y), -p.yaw)


def pose_to_mat(p: Pose2) -> np.ndarray:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return np.array([[c, -s, p.x], [s, c, p.y], [0.0, 0.0, 1.0]], dtype=np.float64)


def mat_to_pose(m: np.ndarray) -> Pose2:
    check_mat3(m)
    return Pose2(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))


def check_mat3(m: np.ndarray) -> None:
    """Validate the planar rigid-transform invariants of a homogeneous 3x3."""
    if m.shape != (3, 3):
        raise ValueError(f"expected 3x3 matrix, got {m.shape}")
    if not np.allclose(m[2], [0.0, 0.0, 1.0], atol=ORTHONORMAL_TOL):
        raise ValueError("bottom row must be (0, 0, 1)")
    r = m[:2, :2]
    if not np.allclose(r.T @ r, np.eye(2), atol=ORTHONORMAL_TOL):
        raise ValueError("upper-left block is not orthonormal")
    if np.linalg.det(r) < 0.0:
        raise ValueError("upper-left block must have det +1")


def transform_points(p: Pose2, pts: np.ndarray) -> np.ndarray:
    """Map (N, 2) points from p's frame into the parent frame."""
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    out = np.empty_like(np.asarray(pts, dtype=np.float64))
    out[..., 0] = c * pts[..., 0] - s * pts[..., 1] + p.x
    out[..., 1] = s * pts[..., 0] + c * pts[..., 1] + p.y
    return out


def warp_matrix(sim_pose: Pose2, ref_pose: Pose2) -> np.ndarray:
    """Pose-deviation matrix sim_pose^-1 · ref_pose in homogeneous form."""
    return pose_to_mat(pose_compose(pose_inverse(sim_pose), ref_pose))


@dataclass(frozen=True)
class Obb:
    """Oriented rectangle: center pose, length along heading, width across."""

    center: Pose2
    length: float
    width: float

    def __post_init__(self):
        if self.length <= 0.0 or self.width <= 0.0:
            raise ValueError("Obb extents must be positive")

    def corners(self) -> np.ndarray:
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
        return transform_points(self.center, local)


def obb_intersect(a: Obb, b: Obb) -> bool:
    """Separating-axis overlap test; touching edges count as intersecting."""
    return bool(_kernels.obb_overlap(
        a.center.x, a.center.y, a.center.yaw, a.length, a.width,
        b.center.x, b.center.y, b.center.yaw, b.length, b.width,
    ))


GRID_FILL = 0.0  # exposed cells read as "unknown region"


def bilinear_sample(grid, u, v):
    """Per-channel bilinear blend at cell coords (u, v); out-of-bounds reads fill.

    Accepts any grid object with (C, H, W) float ``values``. u indexes
    columns (x), v indexes rows (y); integer coords hit cell centers.
    """
    return _kernels.bilinear_sample(grid.values, u, v, GRID_FILL)


def warp_grid(grid, m: np.ndarray):
    """Resample a grid through a rigid transform, inverse-warping output cells.

    The output cell at metric location p takes the bilinear sample of the
    input at m·p, so m is the output-frame to input-frame coordinate map.
    Identity m returns a bit-identical copy.
    """
    check_mat3(m)
    values = _kernels.warp_bilinear(
        np.ascontiguousarray(grid.values), np.ascontiguousarray(m),
        grid.cell_size, GRID_FILL)
    return replace(grid, values=values)
