"""RGBD frame containers and on-disk formats.

Formats (stable interchange surface, kept deliberately simple):

* Color: binary PPM (P6, maxval 255), row-major, 8 bits per channel.
* Depth: binary PGM (P5, maxval 65535), big-endian 16-bit per netpbm,
  values in millimeters, 0 = no return.
* Masks: binary PGM (P5, maxval 255), 0 = off, 255 = on.
* Pose: JSON sidecar with 9 row-major rotation entries + 3 translation
  entries (see geometry.Pose.to_json).
* Ground truth: raw little-endian binary blob + JSON header listing the
  arrays (name, dtype, shape, byte offset).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, Pose


@dataclass
class RgbdFrame:
    """Registered color + depth image with camera pose and intrinsics."""

    rgb: np.ndarray        # (H, W, 3) float in [0, 1]
    depth: np.ndarray      # (H, W) meters, 0 = no return
    pose: Pose             # camera-to-world
    intrinsics: Intrinsics

    def validate(self) -> None:
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3):
            raise ValueError(f"rgb shape {self.rgb.shape} != depth shape ({h}, {w}, 3)")
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise ValueError("image size does not match intrinsics")
        if self.rgb.min() < 0 or self.rgb.max() > 1:
            raise ValueError("rgb values must lie in [0, 1]")
        if self.depth.min() < 0:
            raise ValueError("depth must be non-negative")


@dataclass
class GroundTruth:
    """Per-pixel renderer ground truth used as the evaluation oracle.

    object_id is 0 for table/background hits and misses; surface_coord holds
    canonical object-local coordinates of the hit point wherever
    object_id > 0 (world coordinates for table hits, unused otherwise).
    """

    object_id: np.ndarray      # (H, W) int32, 0 = background
    surface_coord: np.ndarray  # (H, W, 3) float


# --- netpbm images ---------------------------------------------------------

def write_ppm(path, rgb: np.ndarray) -> None:
    """Write a [0,1] float RGB image as binary 8-bit PPM."""
    h, w = rgb.shape[:2]
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    magic, (w, h), maxval, raw = _read_pnm(path)
    if magic != b"P6":
        raise ValueError(f"{path}: expected P6, got {magic!r}")
    img = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return img.astype(np.float64) / float(maxval)


def write_depth_pgm(path, depth_m: np.ndarray) -> None:
    """Write a depth image (meters) as 16-bit millimeter PGM."""
    h, w = depth_m.shape
    mm = np.clip(np.round(depth_m * 1000.0), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(mm.tobytes())


def read_depth_pgm(path) -> np.ndarray:
    magic, (w, h), maxval, raw = _read_pnm(path)
    if magic != b"P5" or maxval != 65535:
        raise ValueError(f"{path}: expected 16-bit P5 depth image")
    mm = np.frombuffer(raw, dtype=">u2", count=w * h).reshape(h, w)
    return mm.astype(np.float64) / 1000.0


def write_mask_pgm(path, mask: np.ndarray) -> None:
    h, w = mask.shape
    data = np.where(mask, 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_mask_pgm(path) -> np.ndarray:
    magic, (w, h), maxval, raw = _read_pnm(path)
    if magic != b"P5" or maxval != 255:
        raise ValueError(f"{path}: expected 8-bit P5 mask image")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h).reshape(h, w) > 127


def _read_pnm(path):
    """Parse a binary PPM/PGM header and return (magic, (w, h), maxval, payload)."""
    with open(path, "rb") as f:
        blob = f.read()
    tokens, i = [], 0
    while len(tokens) < 4:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if blob[i : i + 1] == b"#":  # comment line
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j : j + 1].isspace():
            j += 1
        tokens.append(blob[i:j])
        i = j
    i += 1  # single whitespace byte separates header from payload
    magic = tokens[0]
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return magic, (w, h), maxval, blob[i:]


# --- ground-truth blobs ----------------------------------------------------

_GT_DTYPES = {"object_id": "<i4", "surface_coord": "<f4"}


def write_ground_truth(path_prefix, gt: GroundTruth) -> None:
    """Write GroundTruth as <prefix>.json header + <prefix>.bin little-endian blob."""
    arrays = {
        "object_id": np.ascontiguousarray(gt.object_id.astype("<i4")),
        "surface_coord": np.ascontiguousarray(gt.surface_coord.astype("<f4")),
    }
    header, offset, chunks = {"byte_order": "little", "arrays": {}}, 0, []
    for name, arr in arrays.items():
        header["arrays"][name] = {
            "dtype": _GT_DTYPES[name],
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        }
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    prefix = str(path_prefix)
    with open(prefix + ".json", "w") as f:
        json.dump(header, f, indent=1)
    with open(prefix + ".bin", "wb") as f:
        f.write(b"".join(chunks))


def read_ground_truth(path_prefix) -> GroundTruth:
    prefix = str(path_prefix)
    with open(prefix + ".json") as f:
        header = json.load(f)
    blob = Path(prefix + ".bin").read_bytes()
    out = {}
    for name, meta in header["arrays"].items():
        arr = np.frombuffer(blob, dtype=meta["dtype"],
                            count=int(np.prod(meta["shape"])),
                            offset=meta["offset"]).reshape(meta["shape"])
        out[name] = arr
    return GroundTruth(object_id=out["object_id"].astype(np.int32),
                       surface_coord=out["surface_coord"].astype(np.float64))


# --- frame directory layout -------------------------------------------------

def save_frame(directory, index: int, frame: RgbdFrame,
               mask: np.ndarray | None = None,
               gt: GroundTruth | None = None) -> None:
    """Write one frame's files under `directory` using the NNN.* naming scheme."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    stem = f"{index:04d}"
    write_ppm(d / f"{stem}.rgb.ppm", frame.rgb)
    write_depth_pgm(d / f"{stem}.depth.pgm", frame.depth)
    frame.pose.save(d / f"{stem}.pose.json")
    if mask is not None:
        write_mask_pgm(d / f"{stem}.mask.pgm", mask)
    if gt is not None:
        write_ground_truth(d / f"{stem}.gt", gt)


def load_frame(directory, index: int, intrinsics: Intrinsics):
    """Load a frame plus optional mask/ground truth written by save_frame."""
    d = Path(directory)
    stem = f"{index:04d}"
    frame = RgbdFrame(
        rgb=read_ppm(d / f"{stem}.rgb.ppm"),
        depth=read_depth_pgm(d / f"{stem}.depth.pgm"),
        pose=Pose.load(d / f"{stem}.pose.json"),
        intrinsics=intrinsics,
    )
    mask_path = d / f"{stem}.mask.pgm"
    mask = read_mask_pgm(mask_path) if mask_path.exists() else None
    gt_path = d / f"{stem}.gt.json"
    gt = read_ground_truth(d / f"{stem}.gt") if gt_path.exists() else None
    return frame, mask, gt
