"""Input-validation helpers for the public API surfaces."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def check_rgb_image(x, name: str = "image") -> np.ndarray:
    """Coerce to (H, W, 3) float64 in [0, 1]."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeError(f"{name}: expected (H, W, 3), got {a.shape}")
    if not np.isfinite(a).all():
        raise ShapeError(f"{name}: contains NaN/Inf")
    if a.min() < -1e-9 or a.max() > 1 + 1e-9:
        raise ShapeError(f"{name}: values must lie in [0, 1], got "
                         f"[{a.min():.3g}, {a.max():.3g}]")
    return np.clip(a, 0.0, 1.0)


def check_image_batch(X) -> tuple[list[np.ndarray], bool]:
    """Accept one (H, W, 3) image, a list of them, or an (N, H, W, 3) array.

    Returns (list of validated images, was_single_image).
    """
    a = np.asarray(X, dtype=np.float64)
    if a.ndim == 3:
        return [check_rgb_image(a)], True
    if a.ndim == 4:
        return [check_rgb_image(img, f"image[{i}]") for i, img in enumerate(a)], False
    raise ShapeError(f"expected (H, W, 3) or (N, H, W, 3), got {a.shape}")


def check_depth_image(x, name: str = "depth") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name}: expected (H, W), got {a.shape}")
    if not np.isfinite(a).all() or a.min() < 0:
        raise ShapeError(f"{name}: must be finite and non-negative")
    return a


def check_mask(x, shape: tuple, name: str = "mask") -> np.ndarray:
    a = np.asarray(x)
    if a.shape != tuple(shape):
        raise ShapeError(f"{name}: expected shape {shape}, got {a.shape}")
    return a.astype(bool)


def as_rng(seed_or_rng) -> np.random.Generator:
    """Pass through Generators, build one from anything else numpy accepts."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)
