"""TSDF fusion, depth re-rendering, change-detection masking, frame downsampling.

The volume stores truncated signed distance in units of the truncation
distance (so values live in [-1, 1]) plus a per-voxel observation weight.
Fusion is the classic weighted running mean over depth frames; re-rendered
depth comes from marching camera rays to the first positive-to-negative
zero crossing of the interpolated field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frames import RgbdFrame
from .geometry import Intrinsics, Pose, rotation_angle_deg, round_pixel

DEFAULT_VOXEL_SIZE = 0.01          # meters, desk scale
TRUNCATION_FACTOR = 4.0            # truncation = factor * voxel_size


@dataclass
class TsdfVolume:
    origin: np.ndarray             # world position of the grid corner
    voxel_size: float
    dims: tuple                    # (nx, ny, nz)
    truncation: float
    tsdf: np.ndarray = None        # (nx, ny, nz) in [-1, 1]
    weight: np.ndarray = None      # (nx, ny, nz) >= 0, 0 = never observed
    _centers: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims, dtype=np.float64)
        if self.weight is None:
            self.weight = np.zeros(self.dims, dtype=np.float64)

    @classmethod
    def create(cls, lo, hi, voxel_size: float = DEFAULT_VOXEL_SIZE,
               truncation: float | None = None) -> "TsdfVolume":
        """Allocate a volume covering the world-space box [lo, hi]."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = tuple(int(np.ceil((hi[i] - lo[i]) / voxel_size)) for i in range(3))
        return cls(origin=lo, voxel_size=voxel_size, dims=dims,
                   truncation=truncation if truncation is not None
                   else TRUNCATION_FACTOR * voxel_size)

    def voxel_centers(self) -> np.ndarray:
        """(N, 3) world coordinates of all voxel centers (cached)."""
        if self._centers is None:
            nx, ny, nz = self.dims
            ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                     indexing="ij")
            idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(np.float64)
            self._centers = self.origin + (idx + 0.5) * self.voxel_size
        return self._centers

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(origin=self.origin.copy(), voxel_size=self.voxel_size,
                          dims=self.dims, truncation=self.truncation,
                          tsdf=self.tsdf.copy(), weight=self.weight.copy())

    def save(self, path_prefix) -> None:
        """Write <prefix>.json header + <prefix>.bin little-endian voxel arrays."""
        prefix = str(path_prefix)
        header = {
            "origin": [float(x) for x in self.origin],
            "voxel_size": self.voxel_size,
            "dims": list(self.dims),
            "truncation": self.truncation,
            "dtype": "<f8",
            "layout": ["tsdf", "weight"],
        }
        with open(prefix + ".json", "w") as f:
            json.dump(header, f, indent=1)
        with open(prefix + ".bin", "wb") as f:
            f.write(np.ascontiguousarray(self.tsdf, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(self.weight, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path_prefix) -> "TsdfVolume":
        prefix = str(path_prefix)
        with open(prefix + ".json") as f:
            header = json.load(f)
        dims = tuple(header["dims"])
        n = int(np.prod(dims))
        blob = Path(prefix + ".bin").read_bytes()
        tsdf = np.frombuffer(blob, dtype="<f8", count=n).reshape(dims).copy()
        weight = np.frombuffer(blob, dtype="<f8", count=n, offset=8 * n).reshape(dims).copy()
        return cls(origin=np.asarray(header["origin"]), voxel_size=header["voxel_size"],
                   dims=dims, truncation=header["truncation"], tsdf=tsdf, weight=weight)


def tsdf_integrate(vol: TsdfVolume, frame: RgbdFrame) -> TsdfVolume:
    """Fuse one depth frame into the volume (mutates and returns vol).

    Per voxel seen by the camera with a valid measurement: signed distance
    sd = measured depth - voxel depth, skipped when sd < -truncation (far
    behind the surface), otherwise clamped and folded into the running mean
    with observation weight 1.
    """
    k = frame.intrinsics
    cam = frame.pose.inverse().apply(vol.voxel_centers())
    z = cam[:, 2]
    sel = z > 1e-9
    zsafe = np.where(sel, z, 1.0)
    u = round_pixel(k.fx * cam[:, 0] / zsafe + k.cx)
    v = round_pixel(k.fy * cam[:, 1] / zsafe + k.cy)
    sel &= (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)

    d_meas = np.zeros(len(cam))
    d_meas[sel] = frame.depth[v[sel], u[sel]]
    sel &= d_meas > 0

    sd = d_meas - z
    sel &= sd >= -vol.truncation
    if not sel.any():
        return vol
    sd_clamped = np.minimum(sd[sel], vol.truncation) / vol.truncation

    flat_t = vol.tsdf.reshape(-1)
    flat_w = vol.weight.reshape(-1)
    idx = np.nonzero(sel)[0]
    w_old = flat_w[idx]
    flat_t[idx] = np.where(w_old > 0,
                           (w_old * flat_t[idx] + sd_clamped) / (w_old + 1.0),
                           sd_clamped)
    flat_w[idx] = w_old + 1.0
    return vol


def _corner_validity(vol: TsdfVolume) -> np.ndarray:
    """(nx-1, ny-1, nz-1) flags: all 8 corners of the interpolation cell observed."""
    obs = vol.weight > 0
    v = obs[:-1, :-1, :-1]
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                if dx or dy or dz:
                    v = v & obs[dx:dx + vol.dims[0] - 1,
                                dy:dy + vol.dims[1] - 1,
                                dz:dz + vol.dims[2] - 1]
    return v


def _trilinear(vol: TsdfVolume, pts: np.ndarray, corner_valid: np.ndarray | None = None):
    """Interpolated tsdf at world points; valid only where all 8 corners observed."""
    g = (pts - vol.origin) / vol.voxel_size - 0.5
    i0 = np.floor(g).astype(np.int64)
    frac = g - i0
    dims = np.asarray(vol.dims)
    valid = np.all((i0 >= 0) & (i0 + 1 <= dims - 1), axis=1)
    i0c = np.clip(i0, 0, dims - 2)

    if corner_valid is None:
        corner_valid = _corner_validity(vol)
    observed = valid & corner_valid[i0c[:, 0], i0c[:, 1], i0c[:, 2]]
    value = np.zeros(len(pts))
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                t = vol.tsdf[i0c[:, 0] + dx, i0c[:, 1] + dy, i0c[:, 2] + dz]
                value += wx * wy * wz * t
    return value, observed


def _ray_box_range(origin, dirs, lo, hi):
    """Entry/exit parameter of each ray against an AABB (inf/-inf on miss)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.where(np.abs(dirs) < 1e-15, 1e-15, dirs)
    t_lo = (lo - origin) * inv
    t_hi = (hi - origin) * inv
    t_near = np.minimum(t_lo, t_hi).max(axis=1)
    t_far = np.maximum(t_lo, t_hi).min(axis=1)
    return t_near, t_far


def observed_bounds(vol: TsdfVolume, pad_voxels: int = 1):
    """World AABB of observed voxels (padded for interpolation), or None."""
    idx = np.nonzero(vol.weight > 0)
    if len(idx[0]) == 0:
        return None
    lo_i = np.array([i.min() for i in idx]) - pad_voxels
    hi_i = np.array([i.max() for i in idx]) + 1 + pad_voxels
    return (vol.origin + lo_i * vol.voxel_size,
            vol.origin + hi_i * vol.voxel_size)


def tsdf_raycast(vol: TsdfVolume, pose: Pose, k: Intrinsics,
                 z_near: float = 0.05) -> np.ndarray:
    """Re-render a depth image against the volume.

    Rays march in camera z with TSDF-guided adaptive steps (coarse in free
    space, half a voxel near the surface); the returned depth is the linearly
    interpolated z of the first observed positive-to-negative crossing, or 0
    where none exists.
    """
    u = np.arange(k.width, dtype=np.float64)
    v = np.arange(k.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)],
                     axis=-1).reshape(-1, 3)
    dirs = pose.apply_rotation(d_cam)
    origin = pose.translation

    bounds = observed_bounds(vol)
    if bounds is None:
        return np.zeros((k.height, k.width))
    t0, t1 = _ray_box_range(origin, dirs, *bounds)
    t0 = np.maximum(t0, z_near)
    base_step = 0.5 * vol.voxel_size
    n = len(dirs)
    corner_valid = _corner_validity(vol)

    depth = np.zeros(n)
    active = t1 > t0
    if not active.any():
        return depth.reshape(k.height, k.width)

    z = t0.copy()
    prev_z = t0.copy()
    prev_val = np.zeros(n)
    prev_ok = np.zeros(n, dtype=bool)
    max_steps = int(np.ceil((t1[active].max() - t0[active].min()) / base_step)) + 2
    for _ in range(max_steps):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        pts = origin + z[idx, None] * dirs[idx]
        val, ok = _trilinear(vol, pts, corner_valid)
        crossing = prev_ok[idx] & ok & (prev_val[idx] > 0) & (val <= 0)
        if crossing.any():
            c = idx[crossing]
            v0, v1_ = prev_val[c], val[crossing]
            frac = v0 / np.maximum(v0 - v1_, 1e-12)
            depth[c] = prev_z[c] + frac * (z[c] - prev_z[c])
            active[c] = False
        still = active[idx]
        sidx = idx[still]
        prev_val[sidx] = val[still]
        prev_ok[sidx] = ok[still]
        prev_z[sidx] = z[sidx]
        # tsdf values bound the distance to the surface (conservatively),
        # so positive samples allow strides proportional to the value
        stride = np.where(ok[still],
                          np.maximum(base_step,
                                     0.5 * np.maximum(val[still], 0.0)
                                     * vol.truncation),
                          base_step)
        z[sidx] += stride
        active &= ~(z > t1)
    return depth.reshape(k.height, k.width)


def change_detect(vol: TsdfVolume, table_height: float = 0.0,
                  margin: float | None = None) -> TsdfVolume:
    """Crop the reconstruction to the region above the table plane.

    Voxels at or below table_height + margin are marked unobserved, leaving
    an object-only volume; everything above is untouched.
    """
    if margin is None:
        margin = vol.voxel_size
    out = vol.copy()
    z = out.voxel_centers()[:, 2].reshape(out.dims)
    out.weight[z <= table_height + margin] = 0.0
    return out


def render_mask(object_vol: TsdfVolume, pose: Pose, k: Intrinsics) -> np.ndarray:
    """Binary object mask: pixels whose ray hits the object-only volume."""
    return tsdf_raycast(object_vol, pose, k) > 0


def downsample_frames(poses: list[Pose], trans_thresh: float = 0.05,
                      rot_thresh_deg: float = 10.0) -> list[int]:
    """Greedy pose-distance downsampling; returns kept indices.

    The first frame is always kept; each later frame is kept iff it moved at
    least trans_thresh meters or rot_thresh_deg degrees from the last kept
    frame.
    """
    if not poses:
        raise ValueError("pose list must be nonempty")
    kept = [0]
    eps = 1e-9  # inclusive threshold despite accumulated float dust
    for i in range(1, len(poses)):
        last = poses[kept[-1]]
        trans = np.linalg.norm(poses[i].translation - last.translation)
        rot = rotation_angle_deg(last.rotation, poses[i].rotation)
        if trans >= trans_thresh - eps or rot >= rot_thresh_deg - eps:
            kept.append(i)
    return kept
