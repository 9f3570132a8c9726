"""Training-signal generation: matches and non-matches between view pairs.

Matches come from geometric reprojection against reconstruction-rendered
depth with an occlusion check; non-matches are random pixels outside an
exclusion disc around the true match.  Cross-object pairs are all
non-matches by construction.  Synthetic multi-object scenes are built by
layering masked single-object frames and pruning pairs whose pixels get
covered.

All sampling is driven by an explicit numpy Generator, so identical seeds
reproduce identical sets byte for byte.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import (EmptyMaskError, InsufficientOverlapError,
                     InvalidDistributionError, NoDepthError)
from .frames import RgbdFrame
from .geometry import Pixel, round_pixel, unproject_pixels

COMPARISON_TYPES = (
    "single_object_within_scene",
    "different_object_across_scene",
    "multi_object_within_scene",
    "synthetic_multi_object",
)

DEFAULT_OCCLUSION_EPS = 0.01   # meters; tolerance on reprojected depth
DEFAULT_EXCLUSION_RADIUS = 3.0  # px; non-matches stay outside this disc


@dataclass(frozen=True)
class PixelPair:
    image_a_id: str
    image_b_id: str
    u_a: Pixel
    u_b: Pixel
    kind: str              # "match" or "non-match"
    object_a: int = 0
    object_b: int = 0


def _empty_px():
    return np.zeros((0, 2), dtype=np.float64)


def _empty_ids():
    return np.zeros(0, dtype=np.int64)


@dataclass
class CorrespondenceSet:
    """Match and non-match pixel pairs between two images (array storage)."""

    image_a_id: str = ""
    image_b_id: str = ""
    comparison_type: str = COMPARISON_TYPES[0]
    match_a: np.ndarray = field(default_factory=_empty_px)
    match_b: np.ndarray = field(default_factory=_empty_px)
    nonmatch_a: np.ndarray = field(default_factory=_empty_px)
    nonmatch_b: np.ndarray = field(default_factory=_empty_px)
    match_object_a: np.ndarray = field(default_factory=_empty_ids)
    match_object_b: np.ndarray = field(default_factory=_empty_ids)
    nonmatch_object_a: np.ndarray = field(default_factory=_empty_ids)
    nonmatch_object_b: np.ndarray = field(default_factory=_empty_ids)

    @property
    def n_matches(self) -> int:
        return len(self.match_a)

    @property
    def n_non_matches(self) -> int:
        return len(self.nonmatch_a)

    @property
    def matches(self) -> list[PixelPair]:
        return [PixelPair(self.image_a_id, self.image_b_id,
                          Pixel(*self.match_a[i]), Pixel(*self.match_b[i]), "match",
                          int(self.match_object_a[i]), int(self.match_object_b[i]))
                for i in range(self.n_matches)]

    @property
    def non_matches(self) -> list[PixelPair]:
        return [PixelPair(self.image_a_id, self.image_b_id,
                          Pixel(*self.nonmatch_a[i]), Pixel(*self.nonmatch_b[i]),
                          "non-match", int(self.nonmatch_object_a[i]),
                          int(self.nonmatch_object_b[i]))
                for i in range(self.n_non_matches)]

    def to_csv(self, path) -> None:
        """Debug/diff export: one row per pair."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["img_a", "img_b", "ua_u", "ua_v", "ub_u", "ub_v",
                        "kind", "obj_a", "obj_b"])
            for i in range(self.n_matches):
                w.writerow([self.image_a_id, self.image_b_id,
                            repr(self.match_a[i, 0]), repr(self.match_a[i, 1]),
                            repr(self.match_b[i, 0]), repr(self.match_b[i, 1]),
                            "match", int(self.match_object_a[i]),
                            int(self.match_object_b[i])])
            for i in range(self.n_non_matches):
                w.writerow([self.image_a_id, self.image_b_id,
                            repr(self.nonmatch_a[i, 0]), repr(self.nonmatch_a[i, 1]),
                            repr(self.nonmatch_b[i, 0]), repr(self.nonmatch_b[i, 1]),
                            "non-match", int(self.nonmatch_object_a[i]),
                            int(self.nonmatch_object_b[i])])


# --- geometric match finding --------------------------------------------------

def find_matches(frame_a: RgbdFrame, depth_a: np.ndarray,
                 frame_b: RgbdFrame, depth_b: np.ndarray,
                 pixels_a: np.ndarray,
                 occlusion_eps: float = DEFAULT_OCCLUSION_EPS):
    """Vectorized reprojection match finder.

    Returns (uv_b (N, 2) real-valued, ok (N,) bool).  A pixel fails when its
    source depth is zero, the world point falls behind camera b or outside
    b's image, or the rendered depth at the landing pixel disagrees with the
    point's camera-b depth by more than occlusion_eps (occlusion).
    """
    k_a, k_b = frame_a.intrinsics, frame_b.intrinsics
    px = np.asarray(pixels_a, dtype=np.float64).reshape(-1, 2)
    idx = round_pixel(px)
    d_a = depth_a[idx[:, 1], idx[:, 0]]
    ok = d_a > 0

    cam_a = unproject_pixels(px, np.where(ok, d_a, 1.0), k_a)
    world = frame_a.pose.apply(cam_a)
    cam_b = frame_b.pose.inverse().apply(world)
    z_b = cam_b[:, 2]
    ok &= z_b > 0
    zsafe = np.where(z_b > 0, z_b, 1.0)
    uv_b = np.stack([k_b.fx * cam_b[:, 0] / zsafe + k_b.cx,
                     k_b.fy * cam_b[:, 1] / zsafe + k_b.cy], axis=1)
    idx_b = round_pixel(uv_b)
    inb = ((idx_b[:, 0] >= 0) & (idx_b[:, 0] < k_b.width)
           & (idx_b[:, 1] >= 0) & (idx_b[:, 1] < k_b.height))
    ok &= inb
    d_b = np.zeros(len(px))
    sel = ok
    d_b[sel] = depth_b[idx_b[sel, 1], idx_b[sel, 0]]
    ok &= np.abs(d_b - z_b) <= occlusion_eps
    return uv_b, ok


def find_match(frame_a: RgbdFrame, depth_a: np.ndarray,
               frame_b: RgbdFrame, depth_b: np.ndarray, p_a: Pixel,
               occlusion_eps: float = DEFAULT_OCCLUSION_EPS) -> Pixel | None:
    """Single-pixel version of find_matches; raises NoDepthError on zero depth."""
    ui, vi = p_a.rounded()
    if depth_a[vi, ui] <= 0:
        raise NoDepthError(f"pixel ({p_a.u}, {p_a.v}) has no depth")
    uv_b, ok = find_matches(frame_a, depth_a, frame_b, depth_b,
                            np.array([[p_a.u, p_a.v]]), occlusion_eps)
    return Pixel(*uv_b[0]) if ok[0] else None


# --- sampling -------------------------------------------------------------------

def _sample_nonmatch_pixels(rng, n: int, width: int, height: int,
                            avoid_uv: np.ndarray, radius: float) -> np.ndarray:
    """n integer pixels uniform over the image, outside a disc around avoid_uv."""
    out = np.zeros((n, 2), dtype=np.float64)
    need = np.arange(n)
    r2 = radius * radius
    while len(need):
        cand = np.stack([rng.integers(0, width, size=len(need)),
                         rng.integers(0, height, size=len(need))],
                        axis=1).astype(np.float64)
        d2 = ((cand - avoid_uv[need]) ** 2).sum(axis=1)
        good = d2 > r2
        out[need[good]] = cand[good]
        need = need[~good]
    return out


def sample_correspondences(frame_a: RgbdFrame, depth_a: np.ndarray,
                           frame_b: RgbdFrame, depth_b: np.ndarray,
                           mask_a: np.ndarray | None,
                           n_matches: int, n_nonmatch_per_match: int, rng,
                           occlusion_eps: float = DEFAULT_OCCLUSION_EPS,
                           exclusion_radius: float = DEFAULT_EXCLUSION_RADIUS,
                           object_ids_a: np.ndarray | None = None,
                           object_ids_b: np.ndarray | None = None,
                           image_a_id: str = "a", image_b_id: str = "b",
                           comparison_type: str = COMPARISON_TYPES[0],
                           ) -> CorrespondenceSet:
    """Sample a training correspondence set between two views.

    Match sources are uniform over mask_a ∩ {depth > 0} (full depth-valid
    image when mask_a is None) and retained when the reprojection passes the
    occlusion check.  Each retained match gets n_nonmatch_per_match
    non-matches drawn uniformly over image b outside the exclusion disc
    around the true match.  Raises InsufficientOverlapError when fewer than
    n_matches / 10 matches can be found.
    """
    k_b = frame_b.intrinsics
    region = depth_a > 0 if mask_a is None else (mask_a & (depth_a > 0))
    vs, us = np.nonzero(region)
    if len(us) == 0:
        raise InsufficientOverlapError("no valid source pixels in image a")

    kept_a, kept_b = [], []
    total = 0
    attempts_left = 20 * n_matches
    batch = max(256, 2 * n_matches)
    while total < n_matches and attempts_left > 0:
        take = min(batch, attempts_left)
        attempts_left -= take
        pick = rng.integers(0, len(us), size=take)
        src = np.stack([us[pick], vs[pick]], axis=1).astype(np.float64)
        uv_b, ok = find_matches(frame_a, depth_a, frame_b, depth_b, src,
                                occlusion_eps)
        if ok.any():
            kept_a.append(src[ok])
            kept_b.append(uv_b[ok])
            total += int(ok.sum())

    if total < max(1, n_matches // 10):
        raise InsufficientOverlapError(
            f"found {total} matches, need at least {n_matches // 10}")
    match_a = np.concatenate(kept_a)[:n_matches]
    match_b = np.concatenate(kept_b)[:n_matches]
    n_kept = len(match_a)

    nm_b = np.concatenate([
        _sample_nonmatch_pixels(rng, n_nonmatch_per_match, k_b.width, k_b.height,
                                np.broadcast_to(match_b[i], (n_nonmatch_per_match, 2)),
                                exclusion_radius)
        for i in range(n_kept)
    ]) if n_kept else _empty_px()
    nm_a = np.repeat(match_a, n_nonmatch_per_match, axis=0)

    def labels(ids_map, px):
        if ids_map is None or len(px) == 0:
            return np.zeros(len(px), dtype=np.int64)
        idx = round_pixel(px)
        return ids_map[idx[:, 1], idx[:, 0]].astype(np.int64)

    return CorrespondenceSet(
        image_a_id=image_a_id, image_b_id=image_b_id,
        comparison_type=comparison_type,
        match_a=match_a, match_b=match_b, nonmatch_a=nm_a, nonmatch_b=nm_b,
        match_object_a=labels(object_ids_a, match_a),
        match_object_b=labels(object_ids_b, match_b),
        nonmatch_object_a=labels(object_ids_a, nm_a),
        nonmatch_object_b=labels(object_ids_b, nm_b),
    )


def cross_object_pairs(mask_a: np.ndarray, mask_b: np.ndarray, n: int, rng,
                       object_a: int, object_b: int,
                       image_a_id: str = "a", image_b_id: str = "b",
                       ) -> CorrespondenceSet:
    """n all-non-match pairs between two different objects' masks."""
    if object_a == object_b:
        raise ValueError(f"cross-object pairs require distinct objects, "
                         f"got {object_a} twice")
    sets = []
    for name, mask in (("a", mask_a), ("b", mask_b)):
        vs, us = np.nonzero(mask)
        if len(us) == 0:
            raise EmptyMaskError(f"mask {name} is empty")
        pick = rng.integers(0, len(us), size=n)
        sets.append(np.stack([us[pick], vs[pick]], axis=1).astype(np.float64))
    return CorrespondenceSet(
        image_a_id=image_a_id, image_b_id=image_b_id,
        comparison_type="different_object_across_scene",
        nonmatch_a=sets[0], nonmatch_b=sets[1],
        nonmatch_object_a=np.full(n, object_a, dtype=np.int64),
        nonmatch_object_b=np.full(n, object_b, dtype=np.int64),
    )


# --- synthetic multi-object compositing ------------------------------------------

def composite_multi_object(layers, layer_order, pixel_lists=None):
    """Layer masked frames into one synthetic multi-object image.

    layers: list of (RgbdFrame, mask) in index order.  layer_order: sequence
    of layer indices, later entries drawn on top.  pixel_lists: optional per-
    layer (N_i, 2) pixel arrays referencing that layer's frame; the returned
    keep list marks which of those survive (not covered by any later layer).

    Returns (merged RgbdFrame, visible mask per layer, keep per layer).
    The merged frame reuses the base layer's pose/intrinsics; its geometry is
    only meaningful through the returned masks and surviving pixels.
    """
    if len(layers) < 2:
        raise ValueError("compositing needs at least two layers")
    order = list(layer_order)
    base_frame = layers[order[0]][0]
    rgb = base_frame.rgb.copy()
    depth = base_frame.depth.copy()
    for li in order[1:]:
        f, m = layers[li]
        rgb[m] = f.rgb[m]
        depth[m] = f.depth[m]

    n_layers = len(layers)
    covered_after = [np.zeros_like(layers[0][1]) for _ in range(n_layers)]
    cover = np.zeros_like(layers[0][1])
    for li in reversed(order):
        covered_after[li] = cover.copy()
        cover = cover | layers[li][1]

    visible = [layers[i][1] & ~covered_after[i] for i in range(n_layers)]

    keep = None
    if pixel_lists is not None:
        keep = []
        for i, px in enumerate(pixel_lists):
            px = np.asarray(px, dtype=np.float64).reshape(-1, 2)
            if len(px) == 0:
                keep.append(np.zeros(0, dtype=bool))
                continue
            idx = round_pixel(px)
            keep.append(~covered_after[i][idx[:, 1], idx[:, 0]])

    merged = RgbdFrame(rgb=rgb, depth=depth, pose=base_frame.pose,
                       intrinsics=base_frame.intrinsics)
    return merged, visible, keep


# --- appearance augmentation ------------------------------------------------------

def randomize_background(frame: RgbdFrame, mask: np.ndarray, rng) -> RgbdFrame:
    """Replace off-mask color with random content; on-mask pixels untouched."""
    h, w = frame.depth.shape
    style = rng.integers(0, 3)
    if style == 0:          # uniform noise
        bg = rng.uniform(0.0, 1.0, size=(h, w, 3))
    elif style == 1:        # solid color
        bg = np.broadcast_to(rng.uniform(0.0, 1.0, size=3), (h, w, 3)).copy()
    else:                   # random checker
        cell = int(rng.integers(4, 17))
        ca = rng.uniform(0.0, 1.0, size=3)
        cb = rng.uniform(0.0, 1.0, size=3)
        vv, uu = np.meshgrid(np.arange(h) // cell, np.arange(w) // cell,
                             indexing="ij")
        bg = np.where(((vv + uu) % 2 == 0)[..., None], ca, cb)
    rgb = bg.copy()
    rgb[mask] = frame.rgb[mask]
    return RgbdFrame(rgb=rgb, depth=frame.depth, pose=frame.pose,
                     intrinsics=frame.intrinsics)


def _rot180_coords(px: np.ndarray, width: int, height: int) -> np.ndarray:
    out = np.asarray(px, dtype=np.float64).copy().reshape(-1, 2)
    out[:, 0] = (width - 1) - out[:, 0]
    out[:, 1] = (height - 1) - out[:, 1]
    return out


def _rot180_frame(frame: RgbdFrame) -> RgbdFrame:
    return RgbdFrame(rgb=frame.rgb[::-1, ::-1].copy(),
                     depth=frame.depth[::-1, ::-1].copy(),
                     pose=frame.pose, intrinsics=frame.intrinsics)


def augment_rotate180(frame_a: RgbdFrame, frame_b: RgbdFrame,
                      corr: CorrespondenceSet, rng, p: float = 0.5):
    """Randomly rotate each image by 180 deg and remap the pair coordinates.

    Returns (frame_a, frame_b, corr, (rotated_a, rotated_b)).  Rotation maps
    (u, v) -> (W-1-u, H-1-v), its own inverse, so match validity is
    preserved.
    """
    rot_a = bool(rng.random() < p)
    rot_b = bool(rng.random() < p)
    if not (rot_a or rot_b):
        return frame_a, frame_b, corr, (False, False)
    ka, kb = frame_a.intrinsics, frame_b.intrinsics
    new = CorrespondenceSet(
        image_a_id=corr.image_a_id, image_b_id=corr.image_b_id,
        comparison_type=corr.comparison_type,
        match_a=_rot180_coords(corr.match_a, ka.width, ka.height) if rot_a
        else corr.match_a.copy(),
        match_b=_rot180_coords(corr.match_b, kb.width, kb.height) if rot_b
        else corr.match_b.copy(),
        nonmatch_a=_rot180_coords(corr.nonmatch_a, ka.width, ka.height) if rot_a
        else corr.nonmatch_a.copy(),
        nonmatch_b=_rot180_coords(corr.nonmatch_b, kb.width, kb.height) if rot_b
        else corr.nonmatch_b.copy(),
        match_object_a=corr.match_object_a.copy(),
        match_object_b=corr.match_object_b.copy(),
        nonmatch_object_a=corr.nonmatch_object_a.copy(),
        nonmatch_object_b=corr.nonmatch_object_b.copy(),
    )
    return (_rot180_frame(frame_a) if rot_a else frame_a,
            _rot180_frame(frame_b) if rot_b else frame_b,
            new, (rot_a, rot_b))


def sample_comparison_type(probabilities, rng) -> str:
    """Categorical draw over the four comparison types."""
    w = np.asarray(probabilities, dtype=np.float64)
    if w.shape != (len(COMPARISON_TYPES),):
        raise InvalidDistributionError(
            f"need {len(COMPARISON_TYPES)} weights, got shape {w.shape}")
    if (w < 0).any() or w.sum() <= 0:
        raise InvalidDistributionError(f"invalid weights {w.tolist()}")
    idx = rng.choice(len(COMPARISON_TYPES), p=w / w.sum())
    return COMPARISON_TYPES[int(idx)]
