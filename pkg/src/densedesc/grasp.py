"""Geometric two-finger grasp planning on fused point clouds.

The gripper is a parametric parallel-jaw model (two finger boxes plus a palm
box).  Candidates are sampled around cloud points (optionally constrained to
a target ball), closing along perturbed surface normals with a top-down
approach cone; they are pruned by point-in-body collision tests and scored
by contact-patch antipodality: 1.0 when both fingers press on surfaces whose
normals oppose along the closing axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (EmptyCloudError, NoFeasibleGraspError, NoMatchError,
                     TargetUnreachableError)
from .evaluation import DEFAULT_MATCH_THRESHOLD, best_match
from .geometry import Pixel, round_pixel, unproject_pixels

DEFAULT_CONTACT_BAND = 0.005   # meters around each finger plane
DEFAULT_DEDUP_VOXEL = 0.005
NORMAL_NEIGHBORS = 12


@dataclass(frozen=True)
class GripperModel:
    max_opening: float = 0.08
    finger_thickness: float = 0.01
    finger_width: float = 0.02
    finger_length: float = 0.05
    palm_depth: float = 0.03


@dataclass
class PointCloud:
    points: np.ndarray          # (N, 3) world meters
    normals: np.ndarray         # (N, 3) outward unit vectors
    view_origins: np.ndarray = None  # (N, 3) camera center that observed each point

    def __len__(self) -> int:
        return len(self.points)

    def save_xyz(self, path) -> None:
        """ASCII export: x y z nx ny nz per row."""
        with open(path, "w") as f:
            for p, n in zip(self.points, self.normals):
                f.write(" ".join(repr(float(x)) for x in (*p, *n)) + "\n")


@dataclass
class GraspCandidate:
    center: np.ndarray          # midpoint between finger planes
    axis: np.ndarray            # unit closing direction
    approach: np.ndarray        # unit, orthogonal to axis
    width: float
    score: float = 0.0
    collision_free: bool = False

    @property
    def binormal(self) -> np.ndarray:
        return np.cross(self.approach, self.axis)

    def to_json(self) -> dict:
        return {"center": [float(x) for x in self.center],
                "axis": [float(x) for x in self.axis],
                "approach": [float(x) for x in self.approach],
                "width": float(self.width), "score": float(self.score),
                "collision_free": bool(self.collision_free)}

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)


# --- cloud fusion ---------------------------------------------------------------

def fuse_cloud(frames, masks=None, dedup_voxel: float = DEFAULT_DEDUP_VOXEL,
               k_neighbors: int = NORMAL_NEIGHBORS) -> PointCloud:
    """Unproject depth frames into one deduplicated world point cloud.

    Points are averaged within dedup_voxel cells; normals come from a local
    plane fit over k_neighbors nearest points, oriented toward the camera
    that first observed each cell.  Raises EmptyCloudError when no pixel has
    depth.
    """
    pts, cams = [], []
    for fi, frame in enumerate(frames):
        sel = frame.depth > 0
        if masks is not None and masks[fi] is not None:
            sel &= masks[fi]
        vs, us = np.nonzero(sel)
        if len(us) == 0:
            continue
        uv = np.stack([us, vs], axis=1).astype(np.float64)
        cam_pts = unproject_pixels(uv, frame.depth[vs, us], frame.intrinsics)
        world = frame.pose.apply(cam_pts)
        pts.append(world)
        cams.append(np.broadcast_to(frame.pose.translation, world.shape).copy())
    if not pts:
        raise EmptyCloudError("no depth returns to fuse")
    pts = np.concatenate(pts)
    cams = np.concatenate(cams)

    keys = np.floor(pts / dedup_voxel).astype(np.int64)
    _, first_idx, inverse = np.unique(keys, axis=0, return_index=True,
                                      return_inverse=True)
    n_cells = len(first_idx)
    sums = np.zeros((n_cells, 3))
    counts = np.zeros(n_cells)
    np.add.at(sums, inverse, pts)
    np.add.at(counts, inverse, 1.0)
    points = sums / counts[:, None]
    view_origins = cams[first_idx]

    n = len(points)
    normals = np.zeros((n, 3))
    if n >= 4:
        k = min(k_neighbors + 1, n)
        tree = cKDTree(points)
        _, nbr = tree.query(points, k=k)
        nbrs = points[nbr]                        # (n, k, 3)
        centered = nbrs - nbrs.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", centered, centered)
        _, vecs = np.linalg.eigh(cov)
        normals = vecs[:, :, 0]                   # smallest eigenvalue direction
    else:
        normals = view_origins - points
    to_cam = view_origins - points
    flip = (normals * to_cam).sum(axis=1) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(points=points, normals=normals, view_origins=view_origins)


# --- candidate sampling -----------------------------------------------------------

def _rotate_about(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation of v about a unit axis."""
    c, s = math.cos(angle), math.sin(angle)
    return v * c + np.cross(axis, v) * s + axis * (axis @ v) * (1.0 - c)


def _perturb_unit(rng, d: np.ndarray, max_angle_deg: float) -> np.ndarray:
    angle = math.radians(rng.uniform(0.0, max_angle_deg))
    r = rng.normal(size=3)
    r -= d * (r @ d)
    nrm = np.linalg.norm(r)
    if nrm < 1e-12:
        return d
    out = math.cos(angle) * d + math.sin(angle) * (r / nrm)
    return out / np.linalg.norm(out)


def sample_grasps(cloud: PointCloud, n: int, rng, target=None,
                  gripper: GripperModel = GripperModel(),
                  axis_noise_deg: float = 15.0,
                  approach_tilt_deg: float = 20.0,
                  axis_neighborhood: float = 0.04,
                  contact_cyl_radius: float = 0.015,
                  clearance: float = 0.012) -> list[GraspCandidate]:
    """Sample n grasp candidates on the cloud.

    target, when given, is a (point, radius) pair: every candidate centers on
    a cloud point inside that ball (TargetUnreachableError if none exists).
    The closing axis is a perturbed surface normal from the anchor's
    neighborhood; the approach direction is the steepest-descent direction
    orthogonal to the axis, rotated about it by up to approach_tilt_deg
    (top-down grasping on a tabletop).  Width spans the contact slab plus
    clearance, capped at the gripper opening.
    """
    if len(cloud) == 0:
        raise EmptyCloudError("cannot sample grasps on an empty cloud")
    if target is not None:
        t_point, t_radius = np.asarray(target[0], dtype=np.float64), float(target[1])
        pool = np.nonzero(np.linalg.norm(cloud.points - t_point, axis=1)
                          <= t_radius)[0]
        if len(pool) == 0:
            raise TargetUnreachableError(
                f"no cloud point within {t_radius} m of target")
    else:
        pool = np.arange(len(cloud))

    down = np.array([0.0, 0.0, -1.0])
    out = []
    for _ in range(n):
        anchor = cloud.points[pool[int(rng.integers(0, len(pool)))]]
        near = np.nonzero(np.linalg.norm(cloud.points - anchor, axis=1)
                          <= axis_neighborhood)[0]
        src = cloud.normals[near[int(rng.integers(0, len(near)))]]
        axis = _perturb_unit(rng, src, axis_noise_deg)

        rel = cloud.points - anchor
        s = rel @ axis
        radial = np.linalg.norm(rel - s[:, None] * axis, axis=1)
        slab = (radial <= contact_cyl_radius) & (np.abs(s) <= gripper.max_opening)
        s_in = s[slab]
        s_min, s_max = float(s_in.min()), float(s_in.max())
        center = anchor + 0.5 * (s_min + s_max) * axis
        width = min(s_max - s_min + clearance, gripper.max_opening)

        ap = down - (down @ axis) * axis
        nrm = np.linalg.norm(ap)
        if nrm < 1e-6:   # vertical closing axis: any horizontal approach
            ap = np.cross(axis, np.array([1.0, 0.0, 0.0]))
            nrm = np.linalg.norm(ap)
            if nrm < 1e-6:
                ap = np.cross(axis, np.array([0.0, 1.0, 0.0]))
                nrm = np.linalg.norm(ap)
        ap = ap / nrm
        ap = _rotate_about(ap, axis, math.radians(
            rng.uniform(-approach_tilt_deg, approach_tilt_deg)))
        ap -= (ap @ axis) * axis
        ap /= np.linalg.norm(ap)
        out.append(GraspCandidate(center=center, axis=axis, approach=ap,
                                  width=width))
    return out


# --- scoring and pruning -----------------------------------------------------------

def _grasp_frame_coords(grasp: GraspCandidate, points: np.ndarray):
    rel = points - grasp.center
    return rel @ grasp.axis, rel @ grasp.binormal, rel @ grasp.approach


def antipodal_score(grasp: GraspCandidate, cloud: PointCloud,
                    contact_band: float = DEFAULT_CONTACT_BAND,
                    gripper: GripperModel = GripperModel()) -> float:
    """Contact-patch antipodality in [0, 1].

    Contacts are cloud points within contact_band of each finger plane
    (inside the finger footprint).  Per finger the score is the mean of
    max(0, -+axis . normal); the grasp scores the worse finger, so 1.0 needs
    both patches' normals opposing along the closing axis and 0 means a
    finger without contacts or orthogonal contact normals.
    """
    s, y, z = _grasp_frame_coords(grasp, cloud.points)
    footprint = ((np.abs(y) <= gripper.finger_width / 2 + contact_band)
                 & (z >= -gripper.finger_length - contact_band)
                 & (z <= contact_band))
    half = grasp.width / 2.0
    n_dot = cloud.normals @ grasp.axis
    scores = []
    for sign in (+1.0, -1.0):
        contacts = footprint & (np.abs(s - sign * half) <= contact_band)
        if not contacts.any():
            return 0.0
        scores.append(float(np.maximum(0.0, sign * n_dot[contacts]).mean()))
    return min(scores)


def collision_check(grasp: GraspCandidate, cloud: PointCloud,
                    gripper: GripperModel = GripperModel()) -> bool:
    """True iff no cloud point lies strictly inside any gripper body.

    Bodies: two finger boxes just outside the grasp width (the closing
    region between the fingers is free space) and a palm box behind them.
    """
    s, y, z = _grasp_frame_coords(grasp, cloud.points)
    eps = 1e-9
    half = grasp.width / 2.0
    t, fw, fl, pd = (gripper.finger_thickness, gripper.finger_width,
                     gripper.finger_length, gripper.palm_depth)
    in_y = np.abs(y) < fw / 2 - eps
    in_z_f = (z > -fl + eps) & (z < -eps)
    for sign in (+1.0, -1.0):
        fx = sign * (half + t / 2.0)
        if (in_y & in_z_f & (np.abs(s - fx) < t / 2 - eps)).any():
            return False
    in_palm = ((np.abs(s) < half + t - eps) & in_y
               & (z > -fl - pd + eps) & (z < -fl - eps))
    return not in_palm.any()


def evaluate_grasps(candidates: list[GraspCandidate], cloud: PointCloud,
                    gripper: GripperModel = GripperModel(),
                    contact_band: float = DEFAULT_CONTACT_BAND) -> list[GraspCandidate]:
    """Fill in score and collision flags (in place) and return the list."""
    for g in candidates:
        g.collision_free = collision_check(g, cloud, gripper)
        g.score = antipodal_score(g, cloud, contact_band, gripper)
    return candidates


def select_best_grasp(candidates: list[GraspCandidate]) -> GraspCandidate:
    """Highest-scoring collision-free candidate; ties keep the earliest."""
    best = None
    for g in candidates:
        if g.collision_free and (best is None or g.score > best.score):
            best = g
    if best is None:
        raise NoFeasibleGraspError("no collision-free grasp candidate")
    return best


# --- descriptor-conditioned grasping -------------------------------------------------

def grasp_specific_point(reference_desc: np.ndarray, u_ref: Pixel,
                         test_frames, test_descs, cloud: PointCloud, rng,
                         match_threshold: float = DEFAULT_MATCH_THRESHOLD,
                         gripper: GripperModel = GripperModel(),
                         n_candidates: int = 200,
                         target_radius: float = 0.03):
    """Grasp the physical point matching a reference pixel.

    Looks up the best descriptor match in every test frame, picks the frame
    with the smallest distance whose match is valid and has depth, unprojects
    it to a world target, and plans a target-conditioned grasp there.
    Raises NoMatchError when no frame yields a valid match.
    """
    ranked = []
    for idx, (frame, desc) in enumerate(zip(test_frames, test_descs)):
        decision = best_match(reference_desc, u_ref, desc,
                              match_threshold=match_threshold)
        ranked.append((decision.best_distance, idx, decision))
    ranked.sort(key=lambda r: (r[0], r[1]))

    chosen = None
    for dist, idx, decision in ranked:
        if not decision.valid:
            continue
        frame = test_frames[idx]
        ui, vi = decision.best_pixel.rounded()
        d = frame.depth[vi, ui]
        if d <= 0:
            continue
        cam = unproject_pixels(np.array([[decision.best_pixel.u,
                                          decision.best_pixel.v]]),
                               np.array([d]), frame.intrinsics)
        target = frame.pose.apply(cam)[0]
        chosen = (idx, decision, target)
        break
    if chosen is None:
        raise NoMatchError(f"no valid descriptor match below "
                           f"{match_threshold} in any test frame")
    idx, decision, target = chosen
    candidates = sample_grasps(cloud, n_candidates, rng,
                               target=(target, target_radius), gripper=gripper)
    evaluate_grasps(candidates, cloud, gripper)
    grasp = select_best_grasp(candidates)
    return grasp, decision, idx, target
