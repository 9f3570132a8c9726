"""Pinhole camera model, rigid poses and projection algebra.

Coordinate conventions (asserted in tests, relied on everywhere):

* Camera frame: +z forward (into the scene), +x right, +y down.  These match
  pixel axes, so u grows with x and v grows with y.
* Pixel (u, v): u is the column, v is the row.  Integer coordinates are pixel
  centers.  Real-valued pixels are rounded to the nearest integer for image
  lookup; ties round up (floor(x + 0.5)).
* Pose stores a camera-to-world (or object-to-world) transform: rotation is a
  3x3 orthonormal matrix, translation the frame origin in world coordinates.
* Depth is the camera-frame z coordinate of a point, in meters.

All functions are pure; Pose and Intrinsics are immutable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, InvalidDepthError

ORTHONORMAL_TOL = 1e-9


def round_pixel(x):
    """Round pixel coordinates to the nearest integer, ties up."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Intrinsics":
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                   width=int(d["width"]), height=int(d["height"]))

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> "Intrinsics":
        """Square-pixel intrinsics from a horizontal field of view."""
        fx = (width / 2.0) / np.tan(np.deg2rad(fov_x_deg) / 2.0)
        return cls(fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                   width=width, height=height)


@dataclass(frozen=True)
class Pixel:
    """Real-valued pixel coordinate (u = column, v = row)."""

    u: float
    v: float

    def rounded(self) -> tuple[int, int]:
        return int(round_pixel(self.u)), int(round_pixel(self.v))

    def in_bounds(self, k: Intrinsics) -> bool:
        ui, vi = self.rounded()
        return 0 <= ui < k.width and 0 <= vi < k.height


@dataclass(frozen=True)
class Pose:
    """Rigid transform, stored as rotation matrix + translation vector.

    Convention is frame-to-world: ``apply`` maps local coordinates into the
    world frame.  For a camera pose, ``translation`` is the optical center in
    world coordinates.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise ValueError(f"rotation not orthonormal (max |R^T R - I| = {err:.2e})")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1 (reflection or scale)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        self.rotation.setflags(write=False)
        self.translation.setflags(write=False)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map local points (3,) or (N, 3) to world coordinates."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_rotation(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate direction vectors without translating."""
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Return the pose p with p.apply(x) == self.apply(other.apply(x))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def to_json(self) -> dict:
        """Serialize as 9 row-major rotation entries plus 3 translation entries."""
        return {
            "rotation_row_major": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Pose":
        return cls(np.asarray(d["rotation_row_major"], dtype=np.float64).reshape(3, 3),
                   np.asarray(d["translation"], dtype=np.float64))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def load(cls, path) -> "Pose":
        with open(path) as f:
            return cls.from_json(json.load(f))


def pose_apply(pose: Pose, point: np.ndarray) -> np.ndarray:
    return pose.apply(point)


def pose_inverse(pose: Pose) -> Pose:
    return pose.inverse()


def pose_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def rotation_angle_deg(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Geodesic angle between two rotation matrices, in degrees."""
    cos = (np.trace(r_a.T @ r_b) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def project(point_cam: np.ndarray, k: Intrinsics) -> tuple[Pixel, float]:
    """Project a camera-frame point to a pixel and its depth.

    Raises BehindCameraError when z <= 0; callers treat that as
    "no projection exists".
    """
    x, y, z = np.asarray(point_cam, dtype=np.float64).reshape(3)
    if z <= 0:
        raise BehindCameraError(f"point has camera z = {z}, cannot project")
    return Pixel(float(k.fx * x / z + k.cx), float(k.fy * y / z + k.cy)), float(z)


def unproject(p: Pixel, depth: float, k: Intrinsics) -> np.ndarray:
    """Invert project: pixel + depth to a camera-frame point."""
    if depth <= 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    return np.array([(p.u - k.cx) / k.fx * depth,
                     (p.v - k.cy) / k.fy * depth,
                     depth])


def project_points(points_cam: np.ndarray, k: Intrinsics):
    """Vectorized projection of (N, 3) camera-frame points.

    Returns (uv (N, 2), depth (N,), valid (N,)); entries with z <= 0 are
    flagged invalid and their uv is undefined.
    """
    p = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    z = p[:, 2]
    valid = z > 0
    zsafe = np.where(valid, z, 1.0)
    uv = np.stack([k.fx * p[:, 0] / zsafe + k.cx,
                   k.fy * p[:, 1] / zsafe + k.cy], axis=1)
    return uv, z.copy(), valid


def unproject_pixels(uv: np.ndarray, depth: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Vectorized unprojection of (N, 2) pixels with (N,) depths."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    return np.stack([(uv[:, 0] - k.cx) / k.fx * d,
                     (uv[:, 1] - k.cy) / k.fy * d,
                     d], axis=1)
