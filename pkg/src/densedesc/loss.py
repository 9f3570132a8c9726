"""Pixelwise contrastive loss with hard-negative scaling and exact gradients.

Matches are pulled together by mean squared descriptor distance; non-matches
are pushed apart by a squared hinge at margin M.  With hard-negative scaling
the hinge sum is divided by the number of active (still-violating) pairs
instead of the total pair count, which keeps the gradient magnitude useful
as negatives saturate.  Gradients are accumulated per pixel: a pixel
referenced by several pairs sums all contributions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoMatchesError, OutOfBoundsError
from .geometry import Pixel, round_pixel

_ZERO_DIST = 1e-12  # below this, the hinge direction is undefined; use 0


@dataclass
class LossConfig:
    margin: float = 0.5
    hard_negative_scaling: bool = True

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")


@dataclass
class LossReport:
    l_matches: float
    l_non_matches: float
    l_total: float
    n_matches: int
    n_non_matches: int
    n_hard_negatives: int

    def as_dict(self) -> dict:
        return {
            "l_matches": self.l_matches, "l_non_matches": self.l_non_matches,
            "l_total": self.l_total, "n_matches": self.n_matches,
            "n_non_matches": self.n_non_matches,
            "n_hard_negatives": self.n_hard_negatives,
        }


def _gather(desc: np.ndarray, pixels: np.ndarray):
    """Nearest-pixel descriptor lookup for (N, 2) real-valued (u, v) pairs."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    idx = round_pixel(px)
    h, w = desc.shape[:2]
    if len(idx) and (idx[:, 0].min() < 0 or idx[:, 0].max() >= w
                     or idx[:, 1].min() < 0 or idx[:, 1].max() >= h):
        raise OutOfBoundsError("pixel reference outside descriptor image")
    return desc[idx[:, 1], idx[:, 0]], idx


def descriptor_at(desc: np.ndarray, p: Pixel) -> np.ndarray:
    """Descriptor at a pixel, nearest-integer lookup."""
    vec, _ = _gather(desc, np.array([[p.u, p.v]]))
    return vec[0]


def pair_distance(desc_a: np.ndarray, p_a: Pixel,
                  desc_b: np.ndarray, p_b: Pixel) -> float:
    """L2 distance between two pixel descriptors."""
    return float(np.linalg.norm(descriptor_at(desc_a, p_a) - descriptor_at(desc_b, p_b)))


def match_loss(desc_a: np.ndarray, desc_b: np.ndarray,
               match_a: np.ndarray, match_b: np.ndarray) -> float:
    """Mean squared descriptor distance over match pairs."""
    ma = np.asarray(match_a, dtype=np.float64).reshape(-1, 2)
    if len(ma) == 0:
        raise NoMatchesError("match loss requires at least one match")
    da, _ = _gather(desc_a, ma)
    db, _ = _gather(desc_b, match_b)
    return float(((da - db) ** 2).sum(axis=1).mean())


def nonmatch_loss(desc_a: np.ndarray, desc_b: np.ndarray,
                  nonmatch_a: np.ndarray, nonmatch_b: np.ndarray,
                  cfg: LossConfig) -> tuple[float, int]:
    """Hinge loss over non-match pairs; returns (loss, hard-negative count).

    Scaling divides by the hard-negative count when enabled (0 loss if the
    hinge is empty), by the total non-match count otherwise.
    """
    da, _ = _gather(desc_a, nonmatch_a)
    db, _ = _gather(desc_b, nonmatch_b)
    if len(da) == 0:
        raise ValueError("non-match loss requires at least one pair")
    d = np.sqrt(((da - db) ** 2).sum(axis=1))
    hinge = cfg.margin - d
    hard = hinge > 0
    n_hard = int(hard.sum())
    if cfg.hard_negative_scaling:
        if n_hard == 0:
            return 0.0, 0
        denom = n_hard
    else:
        denom = len(d)
    return float((hinge[hard] ** 2).sum() / denom), n_hard


def total_loss_and_grad(desc_a: np.ndarray, desc_b: np.ndarray, corr,
                        cfg: LossConfig):
    """Total contrastive loss and analytic gradients wrt both descriptor images.

    corr provides match_a/match_b/nonmatch_a/nonmatch_b pixel arrays
    (see correspondence.CorrespondenceSet).  Non-match-only sets (cross-object
    comparisons) contribute zero match loss.
    """
    n_m = len(corr.match_a)
    n_nm = len(corr.nonmatch_a)
    if n_m + n_nm == 0:
        raise ValueError("correspondence set is empty")
    ga = np.zeros_like(desc_a)
    gb = np.zeros_like(desc_b)

    l_m = 0.0
    if n_m:
        da, ia = _gather(desc_a, corr.match_a)
        db, ib = _gather(desc_b, corr.match_b)
        diff = da - db
        l_m = float((diff ** 2).sum(axis=1).mean())
        g = (2.0 / n_m) * diff
        np.add.at(ga, (ia[:, 1], ia[:, 0]), g)
        np.add.at(gb, (ib[:, 1], ib[:, 0]), -g)

    l_nm, n_hard = 0.0, 0
    if n_nm:
        da, ia = _gather(desc_a, corr.nonmatch_a)
        db, ib = _gather(desc_b, corr.nonmatch_b)
        diff = da - db
        d = np.sqrt((diff ** 2).sum(axis=1))
        hinge = cfg.margin - d
        hard = hinge > 0
        n_hard = int(hard.sum())
        denom = (n_hard if cfg.hard_negative_scaling else n_nm)
        if denom > 0 and n_hard > 0:
            l_nm = float((hinge[hard] ** 2).sum() / denom)
            coef = np.where(hard & (d > _ZERO_DIST),
                            -2.0 * hinge / (np.maximum(d, _ZERO_DIST) * denom), 0.0)
            g = coef[:, None] * diff
            np.add.at(ga, (ia[:, 1], ia[:, 0]), g)
            np.add.at(gb, (ib[:, 1], ib[:, 0]), -g)

    report = LossReport(l_matches=l_m, l_non_matches=l_nm, l_total=l_m + l_nm,
                        n_matches=n_m, n_non_matches=n_nm, n_hard_negatives=n_hard)
    return report, ga, gb
