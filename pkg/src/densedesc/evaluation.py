"""Correspondence-quality metrics: best-match lookup, error CDFs, descriptor scatter.

best_match is the exhaustive argmin over descriptor distance used both for
evaluation and for grasp-point lookup; ties break to the first pixel in
row-major order so results are reproducible across implementations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMaskError, EmptySearchRegionError
from .geometry import Pixel
from .loss import descriptor_at

# Validity threshold on best-match descriptor distance; half the default
# contrastive margin.
DEFAULT_MATCH_THRESHOLD = 0.25


@dataclass
class MatchDecision:
    best_pixel: Pixel
    best_distance: float
    valid: bool


def best_match(desc_a: np.ndarray, u_a: Pixel, desc_b: np.ndarray,
               search_mask: np.ndarray | None = None,
               match_threshold: float = DEFAULT_MATCH_THRESHOLD) -> MatchDecision:
    """Exhaustive nearest-descriptor search over image b (or a mask subset)."""
    q = descriptor_at(desc_a, u_a)
    d2 = ((desc_b - q) ** 2).sum(axis=2)
    if search_mask is not None:
        if not search_mask.any():
            raise EmptySearchRegionError("search mask contains no pixels")
        d2 = np.where(search_mask, d2, np.inf)
    flat = int(np.argmin(d2))          # first minimum in row-major order
    v, u = divmod(flat, d2.shape[1])
    dist = float(np.sqrt(d2[v, u]))
    return MatchDecision(best_pixel=Pixel(float(u), float(v)),
                         best_distance=dist,
                         valid=dist < match_threshold)


def pixel_error_cdf(estimated: np.ndarray, truth: np.ndarray,
                    image_diag: float) -> np.ndarray:
    """Sorted normalized pixel errors ||estimate - truth|| / image_diag."""
    est = np.asarray(estimated, dtype=np.float64).reshape(-1, 2)
    tru = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    if len(est) == 0:
        raise ValueError("need at least one evaluated pair")
    err = np.linalg.norm(est - tru, axis=1) / image_diag
    return np.sort(err)


def fraction_below(sorted_errors: np.ndarray, threshold: float) -> float:
    """Fraction of (sorted, normalized) errors strictly below threshold."""
    return float((np.asarray(sorted_errors) < threshold).mean())


def image_diagonal(width: int, height: int) -> float:
    return float(np.hypot(width, height))


def fraction_closer(desc_a: np.ndarray, u_a: Pixel, desc_b: np.ndarray,
                    u_b_true: Pixel, object_mask_b: np.ndarray) -> float:
    """Fraction of object pixels strictly closer to the query than the true match."""
    if not object_mask_b.any():
        raise EmptyMaskError("object mask is empty")
    q = descriptor_at(desc_a, u_a)
    d_true = np.linalg.norm(descriptor_at(desc_b, u_b_true) - q)
    d = np.sqrt(((desc_b - q) ** 2).sum(axis=2))
    closer = (d < d_true) & object_mask_b
    return float(closer.sum() / object_mask_b.sum())


def hard_negative_rate(desc_a: np.ndarray, desc_b: np.ndarray,
                       nonmatch_a: np.ndarray, nonmatch_b: np.ndarray,
                       margin: float) -> float:
    """Share of non-match pairs still inside the margin: mean(M - D > 0)."""
    from .loss import _gather
    da, _ = _gather(desc_a, nonmatch_a)
    db, _ = _gather(desc_b, nonmatch_b)
    if len(da) == 0:
        raise ValueError("need at least one non-match pair")
    d = np.sqrt(((da - db) ** 2).sum(axis=1))
    return float((margin - d > 0).mean())


def scatter_export(items, n_per_object: int, rng):
    """Sample on-mask descriptors per object for cluster inspection.

    items: list of (descriptor image, {object_id: mask}) pairs.  Per object,
    up to n_per_object pixels are drawn uniformly without replacement from
    the pooled masks across all items.  Returns (rows, centroids): rows is a
    list of (object_id, descriptor vector), centroids maps object_id to the
    mean sampled descriptor.  Objects whose masks are empty everywhere are
    skipped.
    """
    pools: dict[int, list] = {}
    for desc, masks in items:
        for obj_id, mask in masks.items():
            vs, us = np.nonzero(mask)
            if len(us):
                pools.setdefault(int(obj_id), []).append(desc[vs, us])
    rows, centroids = [], {}
    for obj_id in sorted(pools):
        pool = np.concatenate(pools[obj_id])
        take = min(n_per_object, len(pool))
        pick = rng.choice(len(pool), size=take, replace=False)
        sampled = pool[pick]
        centroids[obj_id] = sampled.mean(axis=0)
        rows.extend((obj_id, vec) for vec in sampled)
    return rows, centroids


def min_centroid_separation(centroids: dict) -> float:
    """Minimum pairwise L2 distance between per-object centroids."""
    ids = sorted(centroids)
    if len(ids) < 2:
        raise ValueError("need at least two objects")
    best = np.inf
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            best = min(best, float(np.linalg.norm(centroids[a] - centroids[b])))
    return best


# --- CSV emission -----------------------------------------------------------------

def write_cdf_csv(path, sorted_errors: np.ndarray) -> None:
    """Two-column CDF: normalized error, cumulative fraction."""
    n = len(sorted_errors)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["normalized_error", "cumulative_fraction"])
        for i, e in enumerate(sorted_errors):
            w.writerow([repr(float(e)), repr((i + 1) / n)])


def write_scatter_csv(path, rows, descriptor_dim: int) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["object_id"] + [f"d_{i + 1}" for i in range(descriptor_dim)])
        for obj_id, vec in rows:
            w.writerow([obj_id] + [repr(float(x)) for x in vec])


# --- held-out evaluation protocol ---------------------------------------------

def run_evaluation(params, arch, dataset, n_pairs: int, rng,
                   match_threshold: float = DEFAULT_MATCH_THRESHOLD,
                   margin: float = 0.5,
                   n_scatter_per_object: int = 10000,
                   n_cross_rate_pairs: int = 5000,
                   out_dir=None):
    """Evaluate a network on the dataset's held-out scenes.

    Samples n_pairs cross-scene view pairs with renderer ground truth as the
    labeled correspondence (one query pixel per pair, visible in both views),
    runs best_match over the full target image, and aggregates the paper-style
    metrics: normalized pixel-error CDF, fraction-closer CDF, descriptor
    scatter + per-object centroids, and (for multi-object datasets) the
    hard-negative rate on cross-object non-match pairs.  Writes CSV/JSON
    artifacts when out_dir is given and returns the summary dict.
    """
    import json
    from pathlib import Path

    from . import net as nets
    from .scene import oracle_match

    eval_scenes = dataset.scenes(split="eval", multi_object=False)
    by_obj = {}
    for rec in eval_scenes:
        by_obj.setdefault(rec.object_ids[0], []).append(rec)
    usable = {o: recs for o, recs in by_obj.items() if len(recs) >= 2}
    if not usable:
        raise ValueError("dataset needs >= 2 held-out scenes of some object")

    desc_cache = {}

    def descriptor(rec, i):
        key = (rec.name, i)
        if key not in desc_cache:
            desc_cache[key], _ = nets.forward(params, arch, rec.frames[i].rgb)
        return desc_cache[key]

    estimated, truth, closer_fracs, distances = [], [], [], []
    obj_ids_sorted = sorted(usable)
    k = dataset.intrinsics
    diag = image_diagonal(k.width, k.height)
    pairs_done = 0
    attempts = 0
    while pairs_done < n_pairs and attempts < 50 * n_pairs:
        attempts += 1
        obj = obj_ids_sorted[int(rng.integers(0, len(obj_ids_sorted)))]
        recs = usable[obj]
        ia, ib = rng.choice(len(recs), size=2, replace=False)
        rec_a, rec_b = recs[int(ia)], recs[int(ib)]
        fi = int(rng.integers(0, rec_a.n_frames))
        fj = int(rng.integers(0, rec_b.n_frames))
        gt_a = rec_a.gts[fi]
        vs, us = np.nonzero(gt_a.object_id > 0)
        if len(us) == 0:
            continue
        found = None
        for _ in range(30):
            p = int(rng.integers(0, len(us)))
            u_a = Pixel(float(us[p]), float(vs[p]))
            m = oracle_match(rec_a.scene, rec_a.frames[fi], gt_a,
                             rec_b.scene, rec_b.frames[fj], u_a)
            if m is not None:
                found = (u_a, m)
                break
        if found is None:
            continue
        u_a, u_b_true = found
        desc_a = descriptor(rec_a, fi)
        desc_b = descriptor(rec_b, fj)
        decision = best_match(desc_a, u_a, desc_b,
                              match_threshold=match_threshold)
        estimated.append([decision.best_pixel.u, decision.best_pixel.v])
        truth.append([u_b_true.u, u_b_true.v])
        distances.append(decision.best_distance)
        mask_b = rec_b.gts[fj].object_id > 0
        ub_ui, ub_vi = u_b_true.rounded()
        if mask_b.any() and mask_b[ub_vi, ub_ui]:
            closer_fracs.append(fraction_closer(desc_a, u_a, desc_b, u_b_true,
                                                mask_b))
        pairs_done += 1
    if pairs_done == 0:
        raise ValueError("no evaluable pairs found (insufficient view overlap)")

    cdf = pixel_error_cdf(np.array(estimated), np.array(truth), diag)
    closer_sorted = np.sort(np.array(closer_fracs)) if closer_fracs else np.array([])

    scatter_items = []
    for rec in eval_scenes:
        for i in range(rec.n_frames):
            masks = {obj: rec.gts[i].object_id == obj for obj in rec.object_ids}
            scatter_items.append((descriptor(rec, i), masks))
    rows, centroids = scatter_export(scatter_items, n_scatter_per_object, rng)

    cross_rates = {}
    if len(obj_ids_sorted) >= 2:
        for i, oa in enumerate(obj_ids_sorted):
            for ob in obj_ids_sorted[i + 1:]:
                rec_a = usable[oa][0]
                rec_b = usable[ob][0]
                da = descriptor(rec_a, 0)
                db = descriptor(rec_b, 0)
                ma = rec_a.gts[0].object_id == oa
                mb = rec_b.gts[0].object_id == ob
                if not (ma.any() and mb.any()):
                    continue
                avs, aus = np.nonzero(ma)
                bvs, bus = np.nonzero(mb)
                pa = rng.integers(0, len(aus), size=n_cross_rate_pairs)
                pb = rng.integers(0, len(bus), size=n_cross_rate_pairs)
                nm_a = np.stack([aus[pa], avs[pa]], axis=1).astype(np.float64)
                nm_b = np.stack([bus[pb], bvs[pb]], axis=1).astype(np.float64)
                cross_rates[f"{oa}-{ob}"] = hard_negative_rate(
                    da, db, nm_a, nm_b, margin=margin)

    summary = {
        "n_pairs": pairs_done,
        "image_diag": diag,
        "descriptor_dim": int(arch.descriptor_dim),
        "match_threshold": match_threshold,
        "fraction_below_0.13": fraction_below(cdf, 0.13),
        "mean_normalized_error": float(cdf.mean()),
        "median_normalized_error": float(np.median(cdf)),
        "mean_fraction_closer": float(np.mean(closer_fracs)) if closer_fracs else None,
        "valid_match_rate": float((np.array(distances) < match_threshold).mean()),
        "centroids": {str(o): [float(x) for x in c] for o, c in centroids.items()},
        "min_centroid_separation": (min_centroid_separation(centroids)
                                    if len(centroids) >= 2 else None),
        "cross_object_hard_negative_rates": cross_rates,
    }

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_cdf_csv(out / "pixel_error_cdf.csv", cdf)
        if len(closer_sorted):
            write_cdf_csv(out / "fraction_closer_cdf.csv", closer_sorted)
        write_scatter_csv(out / "scatter.csv", rows, arch.descriptor_dim)
        with open(out / "summary.json", "w") as f:
            json.dump(summary, f, indent=1)
    return summary
