"""Deterministic software raycaster standing in for an RGBD camera.

Scenes are built from analytic primitives (boxes, spheres, unions of both)
on an infinite table plane at z = 0, shaded with a single directional light.
Rendering returns both the sensor view (RgbdFrame) and per-pixel ground
truth (object id + canonical surface coordinates) that downstream code uses
as its evaluation oracle.

Canonical surface coordinates: each object part carries a fixed rest pose
inside the object; the stored coordinate of a hit is its position in the
rest layout.  For rigid objects this is simply the object-local coordinate.
For articulated unions (parts repositioned between scenes) the canonical
coordinate of a physical surface point never changes, which is what makes
cross-configuration correspondence checkable.

light_direction points from the scene toward the light source, so an
overhead light is (0, 0, 1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfBoundsError
from .frames import GroundTruth, RgbdFrame
from .geometry import Intrinsics, Pixel, Pose, round_pixel

_RAY_EPS = 1e-9
MISS_COLOR = 0.08  # flat background for rays that leave the scene


# --- procedural textures -----------------------------------------------------

@dataclass(frozen=True)
class FlatTexture:
    color: tuple = (0.7, 0.7, 0.7)

    def colors(self, points: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.color, dtype=np.float64),
                               (len(points), 3)).copy()

    def to_json(self):
        return {"kind": "flat", "color": list(self.color)}


@dataclass(frozen=True)
class CheckerTexture:
    scale: float = 0.02
    color_a: tuple = (0.9, 0.9, 0.9)
    color_b: tuple = (0.1, 0.1, 0.1)

    def colors(self, points: np.ndarray) -> np.ndarray:
        cells = np.floor(np.asarray(points, dtype=np.float64) / self.scale).astype(np.int64)
        parity = (cells.sum(axis=1) % 2).astype(bool)
        a = np.asarray(self.color_a, dtype=np.float64)
        b = np.asarray(self.color_b, dtype=np.float64)
        return np.where(parity[:, None], a, b)

    def to_json(self):
        return {"kind": "checker", "scale": self.scale,
                "color_a": list(self.color_a), "color_b": list(self.color_b)}


@dataclass(frozen=True)
class GradientTexture:
    direction: tuple = (1.0, 0.0, 0.0)
    span: float = 0.1
    color_a: tuple = (0.9, 0.2, 0.1)
    color_b: tuple = (0.1, 0.3, 0.9)

    def colors(self, points: np.ndarray) -> np.ndarray:
        d = np.asarray(self.direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        t = np.clip(points @ d / self.span + 0.5, 0.0, 1.0)
        a = np.asarray(self.color_a, dtype=np.float64)
        b = np.asarray(self.color_b, dtype=np.float64)
        return a + t[:, None] * (b - a)

    def to_json(self):
        return {"kind": "gradient", "direction": list(self.direction), "span": self.span,
                "color_a": list(self.color_a), "color_b": list(self.color_b)}


@dataclass(frozen=True)
class NoiseTexture:
    """Smooth aperiodic color field: per-channel sums of random-phase sinusoids.

    Deterministic in (seed, scale); incommensurate frequencies make every
    surface patch visually distinct, which is what correspondence training
    needs from a texture.
    """

    seed: int = 0
    scale: float = 0.04
    components: int = 6

    def _coeffs(self):
        rng = np.random.default_rng(self.seed)
        k = self.components
        dirs = rng.normal(size=(3, k, 3))
        dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
        wavelength = self.scale * np.exp(rng.uniform(0.0, 1.1, size=(3, k)))
        freq = dirs * (2.0 * np.pi / wavelength)[..., None]
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(3, k))
        return freq, phase

    def colors(self, points: np.ndarray) -> np.ndarray:
        freq, phase = self._coeffs()
        p = np.asarray(points, dtype=np.float64)
        # (N, 3 channels, K components)
        arg = np.einsum("nd,ckd->nck", p, freq) + phase
        raw = np.sin(arg).sum(axis=2) / np.sqrt(self.components)
        return np.clip(0.5 + 0.85 * raw, 0.0, 1.0)

    def to_json(self):
        return {"kind": "noise", "seed": self.seed, "scale": self.scale,
                "components": self.components}


_TEXTURES = {"flat": FlatTexture, "checker": CheckerTexture,
             "gradient": GradientTexture, "noise": NoiseTexture}


def texture_from_json(d: dict):
    kind = d["kind"]
    if kind not in _TEXTURES:
        raise ValueError(f"unknown texture kind {kind!r}")
    kwargs = {k: (tuple(v) if isinstance(v, list) else v)
              for k, v in d.items() if k != "kind"}
    return _TEXTURES[kind](**kwargs)


# --- primitives and objects --------------------------------------------------

@dataclass(frozen=True)
class Box:
    extents: tuple  # full side lengths, meters

    @property
    def half(self) -> np.ndarray:
        return np.asarray(self.extents, dtype=np.float64) / 2.0

    def to_json(self):
        return {"kind": "box", "extents": list(self.extents)}


@dataclass(frozen=True)
class Sphere:
    radius: float

    def to_json(self):
        return {"kind": "sphere", "radius": self.radius}


def shape_from_json(d: dict):
    if d["kind"] == "box":
        return Box(extents=tuple(d["extents"]))
    if d["kind"] == "sphere":
        return Sphere(radius=d["radius"])
    raise ValueError(f"unknown shape kind {d['kind']!r}")


@dataclass
class Part:
    """One primitive of an object union.

    rest_pose fixes the part's place in the canonical layout; pose is its
    current placement (identical to rest_pose for rigid objects).
    """

    shape: Box | Sphere
    rest_pose: Pose = field(default_factory=Pose.identity)
    pose: Pose | None = None

    @property
    def current_pose(self) -> Pose:
        return self.pose if self.pose is not None else self.rest_pose

    def to_json(self):
        return {"shape": self.shape.to_json(),
                "rest_pose": self.rest_pose.to_json(),
                "pose": self.current_pose.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "Part":
        return cls(shape=shape_from_json(d["shape"]),
                   rest_pose=Pose.from_json(d["rest_pose"]),
                   pose=Pose.from_json(d["pose"]) if "pose" in d else None)


@dataclass
class SceneObject:
    id: int
    parts: list[Part]
    pose: Pose = field(default_factory=Pose.identity)  # object-to-world
    texture: object = field(default_factory=NoiseTexture)
    name: str = ""

    def world_part_poses(self) -> list[Pose]:
        return [self.pose.compose(p.current_pose) for p in self.parts]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned world bounding box over all parts."""
        los, his = [], []
        for part, wp in zip(self.parts, self.world_part_poses()):
            if isinstance(part.shape, Sphere):
                c = wp.translation
                los.append(c - part.shape.radius)
                his.append(c + part.shape.radius)
            else:
                h = part.shape.half
                corners = np.array([[sx, sy, sz] for sx in (-1, 1)
                                    for sy in (-1, 1) for sz in (-1, 1)]) * h
                w = wp.apply(corners)
                los.append(w.min(axis=0))
                his.append(w.max(axis=0))
        return np.min(los, axis=0), np.max(his, axis=0)

    def canonical_to_world(self, canonical: np.ndarray) -> np.ndarray:
        """Map a canonical (rest-layout) coordinate back to world space.

        The owning part is identified as the one whose rest-frame surface is
        nearest the point; ambiguous only if rest layouts overlap, which the
        scene builder avoids.
        """
        canonical = np.asarray(canonical, dtype=np.float64)
        best, best_d = None, np.inf
        for part in self.parts:
            q = part.rest_pose.inverse().apply(canonical)
            if isinstance(part.shape, Sphere):
                d = abs(np.linalg.norm(q) - part.shape.radius)
            else:
                excess = np.abs(q) - part.shape.half
                outside = np.linalg.norm(np.maximum(excess, 0.0))
                inside = min(0.0, excess.max())
                d = abs(outside + inside)
            if d < best_d:
                best, best_d = part.current_pose.apply(q), d
        return self.pose.apply(best)

    def to_json(self):
        return {"id": self.id, "name": self.name, "pose": self.pose.to_json(),
                "texture": self.texture.to_json(),
                "parts": [p.to_json() for p in self.parts]}

    @classmethod
    def from_json(cls, d: dict) -> "SceneObject":
        return cls(id=int(d["id"]), name=d.get("name", ""),
                   pose=Pose.from_json(d["pose"]),
                   texture=texture_from_json(d["texture"]),
                   parts=[Part.from_json(p) for p in d["parts"]])


@dataclass
class Scene:
    objects: list[SceneObject]
    table_texture: object = field(default_factory=lambda: CheckerTexture(
        scale=0.08, color_a=(0.55, 0.5, 0.45), color_b=(0.35, 0.38, 0.42)))
    light_direction: np.ndarray = field(
        default_factory=lambda: np.array([0.35, -0.25, 0.9]))
    ambient: float = 0.25

    def __post_init__(self):
        l = np.asarray(self.light_direction, dtype=np.float64)
        self.light_direction = l / np.linalg.norm(l)
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"object ids must be unique, got {ids}")
        if any(i < 1 for i in ids):
            raise ValueError("object ids must be >= 1")
        for o in self.objects:
            lo, _ = o.bounds()
            if lo[2] < -1e-9:
                raise ValueError(f"object {o.id} extends below the table plane "
                                 f"(min z = {lo[2]:.4f})")

    def object_by_id(self, object_id: int) -> SceneObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(f"no object with id {object_id}")

    def to_json(self):
        return {"objects": [o.to_json() for o in self.objects],
                "table_texture": self.table_texture.to_json(),
                "light_direction": [float(x) for x in self.light_direction],
                "ambient": self.ambient}

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        return cls(objects=[SceneObject.from_json(o) for o in d["objects"]],
                   table_texture=texture_from_json(d["table_texture"]),
                   light_direction=np.asarray(d["light_direction"], dtype=np.float64),
                   ambient=d.get("ambient", 0.25))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def load(cls, path) -> "Scene":
        with open(path) as f:
            return cls.from_json(json.load(f))


# --- ray intersection core ---------------------------------------------------

def _intersect_box(origin, dirs, half):
    """Slab test against a centered axis-aligned box in the local frame.

    Returns (t, normal) with t = +inf on miss; normals are outward unit
    vectors of the entered face.
    """
    parallel = np.abs(dirs) < 1e-15
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.where(parallel, 1.0, dirs)
        t_lo = (-half - origin) * inv
        t_hi = (half - origin) * inv
    t1 = np.minimum(t_lo, t_hi)
    t2 = np.maximum(t_lo, t_hi)
    # rays parallel to a slab: inside contributes (-inf, +inf), outside misses
    inside = np.abs(origin) <= half
    t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
    t_near = t1.max(axis=1)
    t_far = t2.min(axis=1)
    hit = (t_near <= t_far) & (t_near > _RAY_EPS)
    t = np.where(hit, t_near, np.inf)
    axis = t1.argmax(axis=1)
    normal = np.zeros_like(dirs)
    rows = np.arange(len(dirs))
    normal[rows, axis] = -np.sign(dirs[rows, axis])
    return t, normal


def _intersect_sphere(origin, dirs, radius):
    a = (dirs * dirs).sum(axis=1)
    b = 2.0 * (dirs * origin).sum(axis=1)
    c = (origin * origin).sum() - radius * radius
    disc = b * b - 4.0 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = (-b - sq) / (2.0 * a)
    t1 = (-b + sq) / (2.0 * a)
    t = np.where(t0 > _RAY_EPS, t0, t1)
    t = np.where(ok & (t > _RAY_EPS), t, np.inf)
    return t


def raycast(scene: Scene, origin: np.ndarray, dirs: np.ndarray):
    """Intersect a ray bundle (shared origin) with the whole scene.

    Returns dict of per-ray arrays: t (inf = miss), object_id (0 = table or
    miss), canonical surface coordinate, world normal, world hit point, and
    a table-hit flag.  t is measured in units of |dirs|, so callers that
    build dirs with camera-frame z = 1 get camera depth directly.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(dirs)
    best_t = np.full(n, np.inf)
    obj_id = np.zeros(n, dtype=np.int32)
    canonical = np.zeros((n, 3))
    normal = np.zeros((n, 3))
    table_hit = np.zeros(n, dtype=bool)

    # table plane z = 0
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_table = -origin[2] / dz
    ok = (np.abs(dz) > 1e-15) & (t_table > _RAY_EPS)
    t_table = np.where(ok, t_table, np.inf)
    upd = t_table < best_t
    best_t = np.where(upd, t_table, best_t)
    table_hit |= upd
    normal[upd] = (0.0, 0.0, 1.0)
    canonical[upd] = origin + t_table[upd, None] * dirs[upd]

    for obj in scene.objects:
        for part, world_pose in zip(obj.parts, obj.world_part_poses()):
            inv = world_pose.inverse()
            o_loc = inv.apply(origin)
            d_loc = inv.apply_rotation(dirs)
            if isinstance(part.shape, Sphere):
                t = _intersect_sphere(o_loc, d_loc, part.shape.radius)
                t_safe = np.where(np.isfinite(t), t, 0.0)
                hit_loc = o_loc + t_safe[:, None] * d_loc
                n_loc = hit_loc / part.shape.radius
            else:
                t, n_loc = _intersect_box(o_loc, d_loc, part.shape.half)
                t_safe = np.where(np.isfinite(t), t, 0.0)
                hit_loc = o_loc + t_safe[:, None] * d_loc
            upd = t < best_t
            if not upd.any():
                continue
            best_t = np.where(upd, t, best_t)
            obj_id[upd] = obj.id
            table_hit[upd] = False
            canonical[upd] = part.rest_pose.apply(hit_loc[upd])
            normal[upd] = world_pose.apply_rotation(n_loc[upd])

    t_safe = np.where(np.isfinite(best_t), best_t, 0.0)
    return {"t": best_t, "object_id": obj_id, "canonical": canonical,
            "normal": normal, "table_hit": table_hit,
            "world": origin + t_safe[:, None] * dirs}


def _pixel_dirs_world(pose: Pose, k: Intrinsics) -> np.ndarray:
    """World-frame ray directions through every pixel center, camera z = 1."""
    u = np.arange(k.width, dtype=np.float64)
    v = np.arange(k.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)],
                     axis=-1).reshape(-1, 3)
    return pose.apply_rotation(d_cam)


def render(scene: Scene, pose: Pose, k: Intrinsics) -> tuple[RgbdFrame, GroundTruth]:
    """Render one view: nearest-hit raycast, Lambertian shading, full GT."""
    dirs = _pixel_dirs_world(pose, k)
    hits = raycast(scene, pose.translation, dirs)
    n = k.width * k.height

    depth = np.where(np.isfinite(hits["t"]), hits["t"], 0.0)
    rgb = np.full((n, 3), MISS_COLOR)
    lit = np.isfinite(hits["t"])
    shade = np.maximum(0.0, hits["normal"][lit] @ scene.light_direction)
    shade = scene.ambient + (1.0 - scene.ambient) * shade

    base = np.zeros((lit.sum(), 3))
    ids_lit = hits["object_id"][lit]
    coords_lit = hits["canonical"][lit]
    tbl = hits["table_hit"][lit]
    if tbl.any():
        base[tbl] = scene.table_texture.colors(coords_lit[tbl])
    for obj in scene.objects:
        sel = ids_lit == obj.id
        if sel.any():
            base[sel] = obj.texture.colors(coords_lit[sel])
    rgb[lit] = np.clip(base * shade[:, None], 0.0, 1.0)

    frame = RgbdFrame(rgb=rgb.reshape(k.height, k.width, 3),
                      depth=depth.reshape(k.height, k.width),
                      pose=pose, intrinsics=k)
    gt = GroundTruth(object_id=hits["object_id"].reshape(k.height, k.width).copy(),
                     surface_coord=hits["canonical"].reshape(k.height, k.width, 3).copy())
    return frame, gt


# --- camera trajectories -----------------------------------------------------

def look_at(eye: np.ndarray, target: np.ndarray) -> Pose:
    """Camera-to-world pose with +z toward target and +y roughly world-down."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    down = np.array([0.0, 0.0, -1.0])
    x = np.cross(down, f)
    if np.linalg.norm(x) < 1e-8:  # looking straight down/up
        x = np.cross(np.array([0.0, 1.0, 0.0]), f)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    return Pose(np.stack([x, y, f], axis=1), eye)


def _perturb_direction(rng, d: np.ndarray, max_angle_deg: float) -> np.ndarray:
    if max_angle_deg <= 0:
        return d
    angle = np.deg2rad(rng.uniform(0.0, max_angle_deg))
    # random unit vector orthogonal to d
    r = rng.normal(size=3)
    r -= d * (r @ d)
    nrm = np.linalg.norm(r)
    if nrm < 1e-12:
        return d
    r /= nrm
    out = np.cos(angle) * d + np.sin(angle) * r
    return out / np.linalg.norm(out)


def sample_camera_trajectory(rng, n_views: int, radius_range=(0.5, 0.8),
                             gaze_target=(0.0, 0.0, 0.05), gaze_noise_deg: float = 5.0,
                             elevation_range_deg=(25.0, 70.0),
                             roll_max_deg: float = 180.0) -> list[Pose]:
    """Random upper-hemisphere viewpoints with a noisy gaze constraint.

    Each camera sits on the hemisphere above the table within radius_range of
    gaze_target and looks at the target, with its optical axis perturbed by at
    most gaze_noise_deg and its roll about the optical axis drawn uniformly
    from [-roll_max_deg, roll_max_deg] (image-plane orientation diversity;
    roll does not affect the gaze constraint).  Deterministic given the rng
    state.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    target = np.asarray(gaze_target, dtype=np.float64)
    poses = []
    for _ in range(n_views):
        az = rng.uniform(0.0, 2.0 * np.pi)
        el = np.deg2rad(rng.uniform(*elevation_range_deg))
        r = rng.uniform(*radius_range)
        eye = target + r * np.array([np.cos(el) * np.cos(az),
                                     np.cos(el) * np.sin(az),
                                     np.sin(el)])
        base = look_at(eye, target)
        f = _perturb_direction(rng, base.rotation[:, 2].copy(), gaze_noise_deg)
        # rebuild the frame around the perturbed forward axis
        down = np.array([0.0, 0.0, -1.0])
        x = np.cross(down, f)
        if np.linalg.norm(x) < 1e-8:
            x = np.cross(np.array([0.0, 1.0, 0.0]), f)
        x /= np.linalg.norm(x)
        y = np.cross(f, x)
        roll = np.deg2rad(rng.uniform(-roll_max_deg, roll_max_deg))
        c, s = np.cos(roll), np.sin(roll)
        x, y = c * x + s * y, -s * x + c * y
        poses.append(Pose(np.stack([x, y, f], axis=1), eye))
    return poses


# --- ground-truth correspondence oracle --------------------------------------

def oracle_match(scene_a: Scene, frame_a: RgbdFrame, gt_a: GroundTruth,
                 scene_b: Scene, frame_b: RgbdFrame, p_a: Pixel) -> Pixel | None:
    """Ground-truth correspondence for one pixel, or None.

    The pixel's canonical surface coordinate is mapped into scene_b (which
    may be the same scene, or a different configuration sharing object ids),
    projected through frame_b's camera, and verified visible by casting the
    exact ray: the nearest hit must be the same object within 1e-4 of the
    same canonical coordinate.  Returns None for background pixels, points
    outside frame_b's view, or occluded points.
    """
    k_a, k_b = frame_a.intrinsics, frame_b.intrinsics
    ui, vi = p_a.rounded()
    if not (0 <= ui < k_a.width and 0 <= vi < k_a.height):
        raise OutOfBoundsError(f"pixel ({p_a.u}, {p_a.v}) outside {k_a.width}x{k_a.height}")
    obj_id = int(gt_a.object_id[vi, ui])
    if obj_id == 0:
        return None
    canonical = gt_a.surface_coord[vi, ui]
    world_b = scene_b.object_by_id(obj_id).canonical_to_world(canonical)

    cam = frame_b.pose.inverse().apply(world_b)
    if cam[2] <= 0:
        return None
    u = k_b.fx * cam[0] / cam[2] + k_b.cx
    v = k_b.fy * cam[1] / cam[2] + k_b.cy
    ur, vr = int(round_pixel(u)), int(round_pixel(v))
    if not (0 <= ur < k_b.width and 0 <= vr < k_b.height):
        return None

    # exact visibility: the ray through (u, v) must hit this very point first
    d_cam = np.array([(u - k_b.cx) / k_b.fx, (v - k_b.cy) / k_b.fy, 1.0])
    hit = raycast(scene_b, frame_b.pose.translation,
                  frame_b.pose.apply_rotation(d_cam)[None, :])
    if not np.isfinite(hit["t"][0]):
        return None
    if int(hit["object_id"][0]) != obj_id:
        return None
    if np.linalg.norm(hit["canonical"][0] - canonical) > 1e-4:
        return None
    return Pixel(float(u), float(v))
