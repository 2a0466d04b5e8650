"""Sample container, PNG/PFM I/O and directory-based dataset loading.

Disk layout: root/<split>/rgb/*.png (8-bit, 3-channel) paired by filename with
root/<split>/depth/*.png (16-bit, single channel). Depth meters = raw value /
depth_scale; a raw value of 0 marks an invalid pixel.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DatasetError

SPLITS = ("train", "val", "test")


@dataclass
class PanoSample:
    """Equirectangular RGB + metric depth + validity, width = 2 * height."""

    rgb: np.ndarray       # (3, H, 2H) float in [0, 1]
    depth: np.ndarray     # (1, H, 2H) float meters, 0 where invalid
    valid: np.ndarray     # (H, 2H) bool
    name: str = ""


def read_rgb(path: str) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "RGB":
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_rgb(path: str, rgb: np.ndarray) -> None:
    arr = np.clip(rgb, 0.0, 1.0).transpose(1, 2, 0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def read_depth_png(path: str, depth_scale: float) -> np.ndarray:
    """16-bit depth PNG -> (1, H, W) meters; raw 0 stays 0 (invalid)."""
    img = Image.open(path)
    if img.mode not in ("I", "I;16", "I;16B", "I;16L"):
        raise DatasetError(f"{path}: expected a 16-bit single-channel PNG, got mode {img.mode!r}")
    raw = np.asarray(img).astype(np.float64)
    if raw.ndim != 2:
        raise DatasetError(f"{path}: depth PNG must be single-channel")
    return (raw / depth_scale)[None, :, :]


def write_depth_png(path: str, depth: np.ndarray, depth_scale: float) -> None:
    d = depth[0] if depth.ndim == 3 else depth
    raw = np.clip(np.round(d * depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def write_pfm(path: str, data: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom-up)."""
    d = data[0] if data.ndim == 3 else data
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{d.shape[1]} {d.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(d).astype("<f4").tobytes())


def read_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header != b"Pf":
            raise DatasetError(f"{path}: not a single-channel PFM file")
        w, h = (int(tok) for tok in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(4 * w * h), dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float64)[None, :, :]


def _list_pngs(directory: str) -> dict:
    if not os.path.isdir(directory):
        raise DatasetError(f"missing directory: {directory}")
    return {os.path.splitext(name)[0]: os.path.join(directory, name)
            for name in sorted(os.listdir(directory)) if name.lower().endswith(".png")}


def load_sample(rgb_path: str, depth_path: str, depth_scale: float, name: str) -> PanoSample:
    rgb = read_rgb(rgb_path)
    depth = read_depth_png(depth_path, depth_scale)
    if rgb.shape[2] != 2 * rgb.shape[1]:
        raise DatasetError(f"{rgb_path}: width must be twice the height, got {rgb.shape[2]}x{rgb.shape[1]}")
    if rgb.shape[1:] != depth.shape[1:]:
        raise DatasetError(f"{rgb_path}: rgb {rgb.shape[1:]} and depth {depth.shape[1:]} sizes differ")
    valid = depth[0] > 0
    return PanoSample(rgb=rgb, depth=depth, valid=valid, name=name)


class DiskDataset:
    """Name-paired png dataset for one split; samples load lazily in
    deterministic filename order. Samples with an empty validity mask are
    skipped (counted in skipped_empty)."""

    def __init__(self, root: str, split: str, depth_scale: float = 4000.0):
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}, expected one of {SPLITS}")
        rgb_files = _list_pngs(os.path.join(root, split, "rgb"))
        depth_files = _list_pngs(os.path.join(root, split, "depth"))
        unpaired = sorted(set(rgb_files) ^ set(depth_files))
        if unpaired:
            raise DatasetError(f"unpaired files in {root}/{split}: {', '.join(unpaired[:5])}")
        if not rgb_files:
            raise DatasetError(f"empty split: {root}/{split}")
        self.pairs = [(name, rgb_files[name], depth_files[name]) for name in sorted(rgb_files)]
        self.depth_scale = depth_scale
        self.skipped_empty = 0

    def __len__(self) -> int:
        return len(self.pairs)

    def load(self, index: int) -> PanoSample:
        name, rgb_path, depth_path = self.pairs[index]
        return load_sample(rgb_path, depth_path, self.depth_scale, name)

    def __iter__(self):
        for i in range(len(self.pairs)):
            sample = self.load(i)
            if not sample.valid.any():
                self.skipped_empty += 1
                continue
            yield sample
