"""Scene dataset generation and the on-disk layout.

A dataset is a directory tree:

    dataset.json                     root metadata (intrinsics, scene index)
    scenes/<scene_name>/scene.json   full scene description incl. object poses
    scenes/<scene_name>/frames/      NNNN.rgb.ppm / .depth.pgm / .pose.json /
                                     .mask.pgm / .gt.{json,bin}

Per scene the generator renders a random camera trajectory, downsamples it
by pose distance, fuses a TSDF, crops it above the table, and stores
reconstruction-rendered depth plus projected object masks for every kept
frame.  The renderer's per-frame ground truth rides along as the evaluation
oracle.  Everything is deterministic in the config seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import recon, scene as sc
from .errors import ConfigError
from .frames import GroundTruth, RgbdFrame, load_frame, save_frame
from .geometry import Intrinsics, Pose


def _rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class GenObject:
    """Canonical object description plus per-scene articulation jitter."""

    object: sc.SceneObject
    articulation_jitter_deg: float = 0.0

    def to_json(self):
        d = self.object.to_json()
        d["articulation_jitter_deg"] = self.articulation_jitter_deg
        return d

    @classmethod
    def from_json(cls, d: dict) -> "GenObject":
        d = dict(d)
        jitter = d.pop("articulation_jitter_deg", 0.0)
        return cls(object=sc.SceneObject.from_json(d), articulation_jitter_deg=jitter)


@dataclass
class GenConfig:
    objects: list
    width: int = 96
    height: int = 72
    fov_x_deg: float = 60.0
    scenes_per_object: int = 4
    eval_scenes_per_object: int = 2
    multi_object_scenes: int = 0
    multi_object_eval_scenes: int = 0
    views_per_scene: int = 40
    radius_range: tuple = (0.45, 0.7)
    gaze_noise_deg: float = 5.0
    elevation_range_deg: tuple = (25.0, 70.0)
    roll_max_deg: float = 180.0
    placement_radius: float = 0.1
    min_object_spacing: float = 0.16
    voxel_size: float = recon.DEFAULT_VOXEL_SIZE
    volume_lo: tuple = (-0.35, -0.35, -0.04)
    volume_hi: tuple = (0.35, 0.35, 0.32)
    trans_thresh: float = 0.05
    rot_thresh_deg: float = 10.0
    light_direction: tuple = (0.35, -0.25, 0.9)
    ambient: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if not self.objects:
            raise ConfigError("at least one object required")
        ids = [g.object.id for g in self.objects]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate object ids {ids}")
        if (self.multi_object_scenes or self.multi_object_eval_scenes) \
                and len(self.objects) < 2:
            raise ConfigError("multi-object scenes require >= 2 objects")
        if self.views_per_scene < 2 or self.scenes_per_object < 1:
            raise ConfigError("need >= 2 views and >= 1 scene per object")

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.width, self.height, self.fov_x_deg)

    def to_json(self) -> dict:
        return {
            "objects": [g.to_json() for g in self.objects],
            "width": self.width, "height": self.height, "fov_x_deg": self.fov_x_deg,
            "scenes_per_object": self.scenes_per_object,
            "eval_scenes_per_object": self.eval_scenes_per_object,
            "multi_object_scenes": self.multi_object_scenes,
            "multi_object_eval_scenes": self.multi_object_eval_scenes,
            "views_per_scene": self.views_per_scene,
            "radius_range": list(self.radius_range),
            "gaze_noise_deg": self.gaze_noise_deg,
            "elevation_range_deg": list(self.elevation_range_deg),
            "roll_max_deg": self.roll_max_deg,
            "placement_radius": self.placement_radius,
            "min_object_spacing": self.min_object_spacing,
            "voxel_size": self.voxel_size,
            "volume_lo": list(self.volume_lo), "volume_hi": list(self.volume_hi),
            "trans_thresh": self.trans_thresh, "rot_thresh_deg": self.rot_thresh_deg,
            "light_direction": list(self.light_direction), "ambient": self.ambient,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GenConfig":
        d = dict(d)
        objects = [GenObject.from_json(o) for o in d.pop("objects")]
        for key in ("radius_range", "elevation_range_deg", "volume_lo", "volume_hi",
                    "light_direction"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(objects=objects, **d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "GenConfig":
        with open(path) as f:
            return cls.from_json(json.load(f))


# --- scene construction ---------------------------------------------------------

def _place_objects(gen_objects: list[GenObject], rng,
                   placement_radius: float, min_spacing: float) -> list[sc.SceneObject]:
    """Randomize object poses (yaw + xy, resting on the table) without overlap."""
    placed, centers = [], []
    for g in gen_objects:
        proto = g.object
        for _ in range(200):
            xy = rng.uniform(-placement_radius, placement_radius, size=2)
            if all(np.linalg.norm(xy - c) >= min_spacing for c in centers):
                break
        else:
            raise ConfigError("could not place objects without overlap; "
                              "reduce count or spacing")
        yaw = rng.uniform(0.0, 2.0 * math.pi)
        parts = []
        for p in proto.parts:
            pose = p.rest_pose
            if g.articulation_jitter_deg > 0:
                theta = math.radians(rng.uniform(-g.articulation_jitter_deg,
                                                 g.articulation_jitter_deg))
                pose = p.rest_pose.compose(Pose(_rot_z(theta), np.zeros(3)))
            parts.append(sc.Part(shape=p.shape, rest_pose=p.rest_pose, pose=pose))
        obj = sc.SceneObject(id=proto.id, name=proto.name, texture=proto.texture,
                             parts=parts,
                             pose=Pose(_rot_z(yaw), np.array([xy[0], xy[1], 0.0])))
        lo, _ = obj.bounds()
        if lo[2] < 0:  # lift so the object rests on the table
            obj.pose = Pose(obj.pose.rotation,
                            obj.pose.translation + np.array([0.0, 0.0, -lo[2]]))
        placed.append(obj)
        centers.append(xy)
    return placed


def _build_scene(cfg: GenConfig, gen_objects: list[GenObject], rng) -> sc.Scene:
    return sc.Scene(objects=_place_objects(gen_objects, rng, cfg.placement_radius,
                                           cfg.min_object_spacing),
                    light_direction=np.asarray(cfg.light_direction, dtype=np.float64),
                    ambient=cfg.ambient)


# --- generation -------------------------------------------------------------------

def _scene_plan(cfg: GenConfig) -> list[dict]:
    plan = []
    for g in cfg.objects:
        for i in range(cfg.scenes_per_object + cfg.eval_scenes_per_object):
            plan.append({"objects": [g], "multi_object": False,
                         "split": "train" if i < cfg.scenes_per_object else "eval"})
    n_multi = cfg.multi_object_scenes + cfg.multi_object_eval_scenes
    for i in range(n_multi):
        plan.append({"objects": list(cfg.objects), "multi_object": True,
                     "split": "train" if i < cfg.multi_object_scenes else "eval"})
    return plan


def generate_dataset(cfg: GenConfig, out_dir) -> "SceneDataset":
    """Render, reconstruct and write a full dataset; idempotent per seed."""
    cfg.validate()
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    k = cfg.intrinsics
    plan = _scene_plan(cfg)
    index = []
    for scene_idx, entry in enumerate(plan):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(scene_idx,)))
        name = f"scene_{scene_idx:04d}"
        scene = _build_scene(cfg, entry["objects"], rng)
        raw_poses = sc.sample_camera_trajectory(
            rng, cfg.views_per_scene, radius_range=cfg.radius_range,
            gaze_noise_deg=cfg.gaze_noise_deg,
            elevation_range_deg=cfg.elevation_range_deg,
            roll_max_deg=cfg.roll_max_deg)
        kept = recon.downsample_frames(raw_poses, cfg.trans_thresh, cfg.rot_thresh_deg)
        poses = [raw_poses[i] for i in kept]

        rendered = [sc.render(scene, p, k) for p in poses]
        vol = recon.TsdfVolume.create(cfg.volume_lo, cfg.volume_hi, cfg.voxel_size)
        for frame, _ in rendered:
            recon.tsdf_integrate(vol, frame)
        obj_vol = recon.change_detect(vol, table_height=0.0)

        scene_dir = out / "scenes" / name
        frames_dir = scene_dir / "frames"
        frames_dir.mkdir(parents=True, exist_ok=True)
        scene.save(scene_dir / "scene.json")
        for i, (pose, (frame, gt)) in enumerate(zip(poses, rendered)):
            depth_recon = recon.tsdf_raycast(vol, pose, k)
            mask = recon.render_mask(obj_vol, pose, k)
            stored = RgbdFrame(rgb=frame.rgb, depth=depth_recon, pose=pose,
                               intrinsics=k)
            save_frame(frames_dir, i, stored, mask=mask, gt=gt)
        index.append({"name": name, "split": entry["split"],
                      "multi_object": entry["multi_object"],
                      "object_ids": [g.object.id for g in entry["objects"]],
                      "n_frames": len(poses), "n_raw_views": cfg.views_per_scene})

    meta = {
        "intrinsics": k.to_json(),
        "objects": [{"id": g.object.id, "name": g.object.name} for g in cfg.objects],
        "scenes": index,
        "gen_config": cfg.to_json(),
    }
    with open(out / "dataset.json", "w") as f:
        json.dump(meta, f, indent=1)
    return SceneDataset.load(out)


# --- loading ----------------------------------------------------------------------

@dataclass
class SceneRecord:
    name: str
    split: str
    multi_object: bool
    object_ids: list
    scene: sc.Scene
    frames: list = field(default_factory=list)      # RgbdFrame
    masks: list = field(default_factory=list)       # bool (H, W)
    gts: list = field(default_factory=list)         # GroundTruth

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def frame_id(self, i: int) -> str:
        return f"{self.name}/{i:04d}"


class SceneDataset:
    """In-memory view of a generated dataset directory."""

    def __init__(self, root, intrinsics: Intrinsics, records: list[SceneRecord],
                 meta: dict):
        self.root = Path(root)
        self.intrinsics = intrinsics
        self.records = records
        self.meta = meta

    @classmethod
    def load(cls, root) -> "SceneDataset":
        root = Path(root)
        with open(root / "dataset.json") as f:
            meta = json.load(f)
        k = Intrinsics.from_json(meta["intrinsics"])
        records = []
        for entry in meta["scenes"]:
            scene_dir = root / "scenes" / entry["name"]
            scene = sc.Scene.load(scene_dir / "scene.json")
            rec = SceneRecord(name=entry["name"], split=entry["split"],
                              multi_object=entry["multi_object"],
                              object_ids=list(entry["object_ids"]), scene=scene)
            for i in range(entry["n_frames"]):
                frame, mask, gt = load_frame(scene_dir / "frames", i, k)
                rec.frames.append(frame)
                rec.masks.append(mask)
                rec.gts.append(gt)
            records.append(rec)
        return cls(root, k, records, meta)

    def object_ids(self) -> list[int]:
        return [o["id"] for o in self.meta["objects"]]

    def scenes(self, split: str | None = None,
               multi_object: bool | None = None) -> list[SceneRecord]:
        out = []
        for r in self.records:
            if split is not None and r.split != split:
                continue
            if multi_object is not None and r.multi_object != multi_object:
                continue
            out.append(r)
        return out

    def single_scenes_by_object(self, split: str = "train") -> dict:
        by_obj: dict[int, list[SceneRecord]] = {}
        for r in self.scenes(split=split, multi_object=False):
            by_obj.setdefault(r.object_ids[0], []).append(r)
        return by_obj
