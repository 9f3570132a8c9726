"""Command-line pipeline driver.

Subcommands: gen-dataset, train, eval, find-match, grasp-demo.
Exit codes: 0 success, 2 configuration error, 3 no valid descriptor match,
4 no feasible grasp, 1 any other pipeline failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import net as nets
from .dataset import GenConfig, SceneDataset, generate_dataset
from .errors import (ConfigError, DenseDescError, NoFeasibleGraspError,
                     NoMatchError)
from .evaluation import run_evaluation
from .frames import read_ppm, write_ppm
from .geometry import Pixel
from .grasp import fuse_cloud, grasp_specific_point
from .training import TrainConfig, train


def _parse_pixel(text: str) -> Pixel:
    try:
        u, v = (float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--pixel expects 'u,v', got {text!r}") from None
    return Pixel(u, v)


def _draw_marker(rgb: np.ndarray, u: int, v: int, color, size: int = 3) -> None:
    h, w = rgb.shape[:2]
    for d in range(-size, size + 1):
        if 0 <= v < h and 0 <= u + d < w:
            rgb[v, u + d] = color
        if 0 <= v + d < h and 0 <= u < w:
            rgb[v + d, u] = color


def _match_visualization(ref_rgb, ref_px: Pixel, tgt_rgb, tgt_px: Pixel | None):
    """Side-by-side image with the query and matched pixels marked."""
    ref = ref_rgb.copy()
    tgt = tgt_rgb.copy()
    ru, rv = ref_px.rounded()
    _draw_marker(ref, ru, rv, (1.0, 0.0, 0.0))
    if tgt_px is not None:
        tu, tv = tgt_px.rounded()
        _draw_marker(tgt, tu, tv, (0.0, 1.0, 0.0))
    h = max(ref.shape[0], tgt.shape[0])
    gap = np.zeros((h, 2, 3))
    pad = lambda img: np.pad(img, ((0, h - img.shape[0]), (0, 0), (0, 0)))
    return np.concatenate([pad(ref), gap, pad(tgt)], axis=1)


def _cmd_gen_dataset(args) -> int:
    cfg = GenConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    ds = generate_dataset(cfg, args.out)
    print(f"wrote {len(ds.records)} scenes to {args.out}")
    for rec in ds.records:
        print(f"  {rec.name}: split={rec.split} objects={rec.object_ids} "
              f"frames={rec.n_frames}")
    return 0


def _cmd_train(args) -> int:
    if args.config:
        with open(args.config) as f:
            cfg = TrainConfig.from_json(json.load(f))
    else:
        cfg = TrainConfig()
    if args.dataset:
        cfg.dataset_dir = args.dataset
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.steps = args.steps
    if args.mode is not None:
        cfg.mode = args.mode
        cfg.cross_object = None
        cfg.comparison_probs = None
    cfg.validate()
    if not cfg.dataset_dir:
        raise ConfigError("no dataset: pass --dataset or set dataset_dir "
                          "in the config")
    dataset = SceneDataset.load(cfg.dataset_dir)
    result = train(cfg, dataset, out_dir=args.out)
    last = result.log[-1]
    print(f"trained {cfg.steps} steps (mode={cfg.mode}, D={cfg.descriptor_dim}); "
          f"final loss {last['l_total']:.4f}, "
          f"hard negatives {last['n_hard_negatives']}/{last['n_non_matches']}")
    print(f"checkpoint: {Path(args.out) / 'checkpoint_final'}")
    return 0


def _cmd_eval(args) -> int:
    params, arch, _ = nets.load_checkpoint(args.checkpoint)
    dataset = SceneDataset.load(args.dataset)
    rng = np.random.default_rng(args.seed)
    try:
        summary = run_evaluation(params, arch, dataset, args.n_pairs, rng,
                                 match_threshold=args.match_threshold,
                                 margin=args.margin, out_dir=args.out)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    print(json.dumps({k: v for k, v in summary.items()
                      if k not in ("centroids",)}, indent=1))
    return 0


def _cmd_find_match(args) -> int:
    params, arch, _ = nets.load_checkpoint(args.checkpoint)
    from .evaluation import best_match
    ref = read_ppm(args.reference_rgb)
    tgt = read_ppm(args.target_rgb)
    pixel = _parse_pixel(args.pixel)
    desc_ref, _ = nets.forward(params, arch, ref)
    desc_tgt, _ = nets.forward(params, arch, tgt)
    decision = best_match(desc_ref, pixel, desc_tgt,
                          match_threshold=args.match_threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "match.json", "w") as f:
        json.dump({"pixel": [decision.best_pixel.u, decision.best_pixel.v],
                   "distance": decision.best_distance,
                   "valid": decision.valid}, f, indent=1)
    write_ppm(out / "match_visualization.ppm",
              _match_visualization(ref, pixel, tgt,
                                   decision.best_pixel if decision.valid else None))
    if not decision.valid:
        raise NoMatchError(f"best distance {decision.best_distance:.3f} >= "
                           f"threshold {args.match_threshold}")
    print(f"match at ({decision.best_pixel.u:.1f}, {decision.best_pixel.v:.1f}), "
          f"distance {decision.best_distance:.4f}")
    return 0


def _cmd_grasp_demo(args) -> int:
    params, arch, _ = nets.load_checkpoint(args.checkpoint)
    dataset = SceneDataset.load(args.dataset)
    matches = [r for r in dataset.records if r.name == args.test_scene]
    if not matches:
        raise ConfigError(f"scene {args.test_scene!r} not in dataset "
                          f"({[r.name for r in dataset.records]})")
    rec = matches[0]
    ref = read_ppm(args.reference_rgb)
    pixel = _parse_pixel(args.pixel)
    desc_ref, _ = nets.forward(params, arch, ref)
    descs = [nets.forward(params, arch, f.rgb)[0] for f in rec.frames]
    cloud = fuse_cloud(rec.frames)
    rng = np.random.default_rng(args.seed)
    grasp, decision, frame_idx, target = grasp_specific_point(
        desc_ref, pixel, rec.frames, descs, cloud, rng,
        match_threshold=args.match_threshold, target_radius=args.target_radius)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "match.json", "w") as f:
        json.dump({"frame": rec.frame_id(frame_idx),
                   "pixel": [decision.best_pixel.u, decision.best_pixel.v],
                   "distance": decision.best_distance,
                   "valid": decision.valid,
                   "target_world": [float(x) for x in target]}, f, indent=1)
    grasp.save(out / "grasp.json")
    write_ppm(out / "match_visualization.ppm",
              _match_visualization(ref, pixel, rec.frames[frame_idx].rgb,
                                   decision.best_pixel))
    print(f"grasp at {np.round(grasp.center, 3).tolist()}, "
          f"score {grasp.score:.3f}, width {grasp.width * 100:.1f} cm")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="densedesc",
        description="Dense visual descriptor pipeline: synthetic data, "
                    "training, evaluation, grasping.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dataset", help="render and reconstruct a dataset")
    g.add_argument("--config", required=True, help="GenConfig JSON path")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=_cmd_gen_dataset)

    t = sub.add_parser("train", help="train a descriptor network")
    t.add_argument("--config", default=None, help="TrainConfig JSON path")
    t.add_argument("--dataset", default=None, help="dataset directory")
    t.add_argument("--out", required=True, help="checkpoint/log directory")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--mode", choices=("consistent", "specific"), default=None)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out scenes")
    e.add_argument("--checkpoint", required=True, help="checkpoint prefix")
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--n-pairs", type=int, default=200)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--match-threshold", type=float, default=0.25)
    e.add_argument("--margin", type=float, default=0.5)
    e.set_defaults(func=_cmd_eval)

    f = sub.add_parser("find-match", help="look up one pixel's best match")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--reference-rgb", required=True, help="PPM image")
    f.add_argument("--pixel", required=True, help="query pixel 'u,v'")
    f.add_argument("--target-rgb", required=True, help="PPM image")
    f.add_argument("--out", required=True)
    f.add_argument("--match-threshold", type=float, default=0.25)
    f.set_defaults(func=_cmd_find_match)

    d = sub.add_parser("grasp-demo", help="grasp a descriptor-specified point")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--dataset", required=True)
    d.add_argument("--test-scene", required=True, help="scene name in the dataset")
    d.add_argument("--reference-rgb", required=True)
    d.add_argument("--pixel", required=True, help="query pixel 'u,v'")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--match-threshold", type=float, default=0.25)
    d.add_argument("--target-radius", type=float, default=0.03)
    d.set_defaults(func=_cmd_grasp_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NoMatchError as e:
        print(f"no match: {e}", file=sys.stderr)
        return 3
    except NoFeasibleGraspError as e:
        print(f"no feasible grasp: {e}", file=sys.stderr)
        return 4
    except DenseDescError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
