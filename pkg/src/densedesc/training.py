"""Siamese training loop over scene datasets.

Each optimizer step draws one comparison type, samples an image pair of that
type, builds a correspondence set (with the configured masking, background
randomization and rotation augmentation), runs both images through the
network, and applies one Adam update from the analytic loss gradients.
Everything downstream of the root seed is deterministic in serial mode.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import net as nets
from .correspondence import (COMPARISON_TYPES, CorrespondenceSet,
                             augment_rotate180, composite_multi_object,
                             cross_object_pairs, randomize_background,
                             sample_comparison_type, sample_correspondences)
from .dataset import SceneDataset, SceneRecord
from .errors import ConfigError, InsufficientOverlapError, NonFiniteLossError
from .frames import write_ppm
from .loss import LossConfig, total_loss_and_grad

MODES = ("consistent", "specific")

LOG_COLUMNS = ("step", "lr", "comparison_type", "l_matches", "l_non_matches",
               "l_total", "n_matches", "n_non_matches", "n_hard_negatives")


@dataclass
class TrainConfig:
    """Everything a training run depends on, JSON round-trippable.

    mode "consistent" trains without cross-object loss (class-general
    descriptors); "specific" enables it (instance-distinct descriptors) and
    defaults to the 50-50 within-scene / cross-scene split.  The ablation
    toggles reproduce the standard / no-hard-negative / no-masking /
    plain-contrastive training variants.
    """

    mode: str = "consistent"
    dataset_dir: str | None = None
    steps: int = 3500
    seed: int = 0
    descriptor_dim: int = 3
    margin: float = 0.5
    # ablation toggles
    masking: bool = True
    hard_negative_scaling: bool = True
    background_randomization: bool = True
    cross_object: bool | None = None      # derived from mode when None
    augment_rotations: bool = True
    # sampling
    comparison_probs: tuple | None = None  # aligned with COMPARISON_TYPES
    n_matches: int = 500
    n_nonmatch_per_match: int = 150
    n_cross_pairs: int | None = None       # default: n_matches * n_nonmatch_per_match
    occlusion_eps: float = 0.01
    exclusion_radius: float = 3.0
    background_randomization_prob: float = 0.5
    # optimizer
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 250
    # bookkeeping
    checkpoint_every: int = 500
    arch: nets.NetArchitecture | None = None  # default_architecture(descriptor_dim)

    def resolved_cross_object(self) -> bool:
        return self.mode == "specific" if self.cross_object is None \
            else self.cross_object

    def resolved_probs(self) -> np.ndarray:
        if self.comparison_probs is not None:
            p = np.asarray(self.comparison_probs, dtype=np.float64)
        elif self.mode == "specific":
            p = np.array([0.5, 0.5, 0.0, 0.0])
        else:
            p = np.array([1.0, 0.0, 0.0, 0.0])
        return p

    def resolved_arch(self) -> nets.NetArchitecture:
        return self.arch if self.arch is not None \
            else nets.default_architecture(self.descriptor_dim)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.cross_object is not None:
            if self.mode == "specific" and not self.cross_object:
                raise ConfigError("mode 'specific' requires cross_object=True")
            if self.mode == "consistent" and self.cross_object:
                raise ConfigError("mode 'consistent' requires cross_object=False")
        p = self.resolved_probs()
        if p.shape != (len(COMPARISON_TYPES),) or (p < 0).any() or p.sum() <= 0:
            raise ConfigError(f"invalid comparison probabilities {p.tolist()}")
        if not self.resolved_cross_object() and p[1] > 0:
            raise ConfigError("cross-object comparisons require cross_object=True")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.resolved_arch().descriptor_dim != self.descriptor_dim:
            raise ConfigError("arch descriptor_dim disagrees with config")

    def to_json(self) -> dict:
        d = {
            "mode": self.mode, "dataset_dir": self.dataset_dir,
            "steps": self.steps, "seed": self.seed,
            "descriptor_dim": self.descriptor_dim, "margin": self.margin,
            "masking": self.masking,
            "hard_negative_scaling": self.hard_negative_scaling,
            "background_randomization": self.background_randomization,
            "cross_object": self.cross_object,
            "augment_rotations": self.augment_rotations,
            "comparison_probs": None if self.comparison_probs is None
            else list(self.comparison_probs),
            "n_matches": self.n_matches,
            "n_nonmatch_per_match": self.n_nonmatch_per_match,
            "n_cross_pairs": self.n_cross_pairs,
            "occlusion_eps": self.occlusion_eps,
            "exclusion_radius": self.exclusion_radius,
            "background_randomization_prob": self.background_randomization_prob,
            "base_lr": self.base_lr, "weight_decay": self.weight_decay,
            "lr_decay": self.lr_decay, "lr_decay_every": self.lr_decay_every,
            "checkpoint_every": self.checkpoint_every,
            "arch": None if self.arch is None else self.arch.to_json(),
        }
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        arch = d.pop("arch", None)
        probs = d.pop("comparison_probs", None)
        cfg = cls(arch=None if arch is None else nets.NetArchitecture.from_json(arch),
                  comparison_probs=None if probs is None else tuple(probs), **d)
        cfg.validate()
        return cfg


@dataclass
class TrainResult:
    params: nets.NetParams
    arch: nets.NetArchitecture
    state: nets.AdamState
    log: list = field(default_factory=list)   # one dict per step, LOG_COLUMNS keys

    def log_column(self, key: str) -> np.ndarray:
        return np.array([row[key] for row in self.log])


class _PairSampler:
    """Draws image pairs per comparison type from a SceneDataset."""

    def __init__(self, dataset: SceneDataset, cfg: TrainConfig):
        self.dataset = dataset
        self.cfg = cfg
        self.by_object = dataset.single_scenes_by_object("train")
        self.multi = dataset.scenes(split="train", multi_object=True)
        probs = cfg.resolved_probs()
        if probs[0] > 0 and not any(len(s) for s in self.by_object.values()):
            raise ConfigError("dataset has no single-object training scenes")
        if probs[1] > 0 and len(self.by_object) < 2:
            raise ConfigError("cross-object sampling needs >= 2 objects")
        if probs[2] > 0 and not self.multi:
            raise ConfigError("dataset has no multi-object training scenes")
        if probs[3] > 0 and len(self.by_object) < 2:
            raise ConfigError("synthetic multi-object needs >= 2 objects")

    def _two_frames(self, rec: SceneRecord, rng):
        i, j = rng.choice(rec.n_frames, size=2, replace=False)
        return int(i), int(j)

    def _random_scene_frame(self, scenes: list[SceneRecord], rng):
        rec = scenes[int(rng.integers(0, len(scenes)))]
        return rec, int(rng.integers(0, rec.n_frames))

    def _within_scene(self, rec: SceneRecord, rng, comparison_type: str):
        cfg = self.cfg
        i, j = self._two_frames(rec, rng)
        fa, fb = rec.frames[i], rec.frames[j]
        corr = sample_correspondences(
            fa, fa.depth, fb, fb.depth,
            rec.masks[i] if cfg.masking else None,
            cfg.n_matches, cfg.n_nonmatch_per_match, rng,
            occlusion_eps=cfg.occlusion_eps,
            exclusion_radius=cfg.exclusion_radius,
            object_ids_a=rec.gts[i].object_id, object_ids_b=rec.gts[j].object_id,
            image_a_id=rec.frame_id(i), image_b_id=rec.frame_id(j),
            comparison_type=comparison_type)
        return fa, fb, rec.masks[i], rec.masks[j], corr

    def _synthetic_multi(self, rng):
        cfg = self.cfg
        ids = sorted(self.by_object)
        pick = rng.choice(len(ids), size=2, replace=False)
        chosen = [ids[int(p)] for p in pick]
        layers_a, layers_b, corrs = [], [], []
        for obj_id in chosen:
            scenes = self.by_object[obj_id]
            rec = scenes[int(rng.integers(0, len(scenes)))]
            i, j = self._two_frames(rec, rng)
            fa, fb = rec.frames[i], rec.frames[j]
            corr = sample_correspondences(
                fa, fa.depth, fb, fb.depth, rec.masks[i],
                cfg.n_matches, cfg.n_nonmatch_per_match, rng,
                occlusion_eps=cfg.occlusion_eps,
                exclusion_radius=cfg.exclusion_radius,
                object_ids_a=rec.gts[i].object_id,
                object_ids_b=rec.gts[j].object_id,
                image_a_id=rec.frame_id(i), image_b_id=rec.frame_id(j),
                comparison_type="synthetic_multi_object")
            layers_a.append((fa, rec.masks[i]))
            layers_b.append((fb, rec.masks[j]))
            corrs.append(corr)

        order = [int(x) for x in rng.permutation(len(layers_a))]
        merged_a, vis_a, keep_a_m = composite_multi_object(
            layers_a, order, pixel_lists=[c.match_a for c in corrs])
        merged_b, vis_b, keep_b_m = composite_multi_object(
            layers_b, order, pixel_lists=[c.match_b for c in corrs])
        _, _, keep_a_nm = composite_multi_object(
            layers_a, order, pixel_lists=[c.nonmatch_a for c in corrs])

        parts = []
        for li, c in enumerate(corrs):
            keep_m = keep_a_m[li] & keep_b_m[li]
            keep_nm = keep_a_nm[li]
            parts.append(CorrespondenceSet(
                image_a_id=c.image_a_id, image_b_id=c.image_b_id,
                comparison_type="synthetic_multi_object",
                match_a=c.match_a[keep_m], match_b=c.match_b[keep_m],
                nonmatch_a=c.nonmatch_a[keep_nm], nonmatch_b=c.nonmatch_b[keep_nm],
                match_object_a=c.match_object_a[keep_m],
                match_object_b=c.match_object_b[keep_m],
                nonmatch_object_a=c.nonmatch_object_a[keep_nm],
                nonmatch_object_b=c.nonmatch_object_b[keep_nm]))
        merged = CorrespondenceSet(
            image_a_id="synthetic", image_b_id="synthetic",
            comparison_type="synthetic_multi_object",
            match_a=np.concatenate([p.match_a for p in parts]),
            match_b=np.concatenate([p.match_b for p in parts]),
            nonmatch_a=np.concatenate([p.nonmatch_a for p in parts]),
            nonmatch_b=np.concatenate([p.nonmatch_b for p in parts]),
            match_object_a=np.concatenate([p.match_object_a for p in parts]),
            match_object_b=np.concatenate([p.match_object_b for p in parts]),
            nonmatch_object_a=np.concatenate([p.nonmatch_object_a for p in parts]),
            nonmatch_object_b=np.concatenate([p.nonmatch_object_b for p in parts]))
        if merged.n_matches < max(1, 2 * self.cfg.n_matches // 10):
            raise InsufficientOverlapError("layering pruned too many matches")
        union_a = np.logical_or.reduce(vis_a)
        union_b = np.logical_or.reduce(vis_b)
        return merged_a, merged_b, union_a, union_b, merged

    def sample(self, comparison_type: str, rng):
        """Returns (frame_a, frame_b, mask_a, mask_b, correspondence set)."""
        cfg = self.cfg
        if comparison_type == "single_object_within_scene":
            ids = sorted(self.by_object)
            obj = ids[int(rng.integers(0, len(ids)))]
            scenes = self.by_object[obj]
            rec = scenes[int(rng.integers(0, len(scenes)))]
            return self._within_scene(rec, rng, comparison_type)
        if comparison_type == "multi_object_within_scene":
            rec = self.multi[int(rng.integers(0, len(self.multi)))]
            return self._within_scene(rec, rng, comparison_type)
        if comparison_type == "different_object_across_scene":
            ids = sorted(self.by_object)
            pick = rng.choice(len(ids), size=2, replace=False)
            obj_a, obj_b = ids[int(pick[0])], ids[int(pick[1])]
            rec_a, i = self._random_scene_frame(self.by_object[obj_a], rng)
            rec_b, j = self._random_scene_frame(self.by_object[obj_b], rng)
            n = cfg.n_cross_pairs if cfg.n_cross_pairs is not None \
                else cfg.n_matches * cfg.n_nonmatch_per_match
            corr = cross_object_pairs(rec_a.masks[i], rec_b.masks[j], n, rng,
                                      object_a=obj_a, object_b=obj_b,
                                      image_a_id=rec_a.frame_id(i),
                                      image_b_id=rec_b.frame_id(j))
            return (rec_a.frames[i], rec_b.frames[j],
                    rec_a.masks[i], rec_b.masks[j], corr)
        if comparison_type == "synthetic_multi_object":
            return self._synthetic_multi(rng)
        raise ConfigError(f"unknown comparison type {comparison_type!r}")


def _dump_diagnostics(out_dir, step, frame_a, frame_b, corr):
    d = Path(out_dir) / f"diagnostic_step_{step:06d}"
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / "image_a.ppm", frame_a.rgb)
    write_ppm(d / "image_b.ppm", frame_b.rgb)
    corr.to_csv(d / "correspondences.csv")
    return d


def train(cfg: TrainConfig, dataset: SceneDataset,
          out_dir=None, params: nets.NetParams | None = None) -> TrainResult:
    """Run the full training loop; returns final parameters and the step log.

    When out_dir is given, checkpoints land there every cfg.checkpoint_every
    steps plus a final one, and the per-step LossReport log is written as
    training_log.csv.  A non-finite loss dumps the offending pair and raises
    NonFiniteLossError.
    """
    cfg.validate()
    arch = cfg.resolved_arch()
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = nets.init_params(arch, rng)
    state = nets.AdamState.init_like(
        params, weight_decay=cfg.weight_decay, base_lr=cfg.base_lr,
        lr_decay=cfg.lr_decay, lr_decay_every=cfg.lr_decay_every)
    loss_cfg = LossConfig(margin=cfg.margin,
                          hard_negative_scaling=cfg.hard_negative_scaling)
    sampler = _PairSampler(dataset, cfg)
    probs = cfg.resolved_probs()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "train_config.json", "w") as f:
            json.dump(cfg.to_json(), f, indent=1)

    log: list[dict] = []
    for step in range(cfg.steps):
        ctype = sample_comparison_type(probs, rng)
        frame_a = frame_b = corr = None
        for _ in range(50):
            try:
                frame_a, frame_b, mask_a, mask_b, corr = sampler.sample(ctype, rng)
                break
            except InsufficientOverlapError:
                continue
        if corr is None:
            raise InsufficientOverlapError(
                f"could not sample a usable {ctype} pair in 50 tries")

        if cfg.background_randomization:
            if rng.random() < cfg.background_randomization_prob:
                frame_a = randomize_background(frame_a, mask_a, rng)
            if rng.random() < cfg.background_randomization_prob:
                frame_b = randomize_background(frame_b, mask_b, rng)
        if cfg.augment_rotations:
            frame_a, frame_b, corr, _ = augment_rotate180(frame_a, frame_b, corr, rng)

        desc_a, cache_a = nets.forward(params, arch, frame_a.rgb)
        desc_b, cache_b = nets.forward(params, arch, frame_b.rgb)
        report, grad_a, grad_b = total_loss_and_grad(desc_a, desc_b, corr, loss_cfg)
        if not np.isfinite(report.l_total):
            where = _dump_diagnostics(out, step, frame_a, frame_b, corr) \
                if out is not None else "(no out_dir)"
            raise NonFiniteLossError(f"loss {report.l_total} at step {step}; "
                                     f"diagnostics in {where}")
        grads_a, _ = nets.backward(params, arch, cache_a, grad_a)
        grads_b, _ = nets.backward(params, arch, cache_b, grad_b)
        grads = nets.NetParams(
            [wa + wb for wa, wb in zip(grads_a.weights, grads_b.weights)],
            [ba + bb for ba, bb in zip(grads_a.biases, grads_b.biases)])
        lr = state.current_lr()
        nets.adam_step(state, params, grads)

        row = {"step": step, "lr": lr, "comparison_type": ctype,
               **report.as_dict()}
        log.append(row)
        if out is not None and cfg.checkpoint_every and \
                (step + 1) % cfg.checkpoint_every == 0:
            nets.save_checkpoint(out / f"checkpoint_{step + 1:06d}", params, arch,
                                 state)

    if out is not None:
        nets.save_checkpoint(out / "checkpoint_final", params, arch, state)
        write_training_log(out / "training_log.csv", log)
    return TrainResult(params=params, arch=arch, state=state, log=log)


def write_training_log(path, log: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in log:
            w.writerow({k: row[k] for k in LOG_COLUMNS})
