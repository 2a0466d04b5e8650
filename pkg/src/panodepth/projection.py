"""Direction math and resampling between equirectangular panoramas and cubemaps.

Coordinate convention (fixed here, documented because no single standard
exists): x points right, y up, z forward. Longitude lambda runs from -pi at
the left image edge to +pi at the right, latitude phi from +pi/2 (top row,
north pole) to -pi/2. Pixel (u, v) is sampled at its half-pixel center, so
    lambda = (u + 0.5) / W * 2*pi - pi
    phi    = pi/2 - (v + 0.5) / H * pi
and the unit direction is (cos(phi)*sin(lambda), sin(phi), cos(phi)*cos(lambda)).

Cubemap faces follow the fixed order (back, down, front, left, right, up).
Each face has an outward normal plus in-face right/down axes; the in-face
gnomonic coordinates (a, b) in [-1, 1] satisfy
    dir ~ normal + a * right + b * down.
Face texel (row i, col j) of an S x S face sits at
a = (j + 0.5)/S * 2 - 1, b = (i + 0.5)/S * 2 - 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Tensor
from .errors import ContractError, ShapeError

FACE_ORDER = ("back", "down", "front", "left", "right", "up")

# rows follow FACE_ORDER: outward normal, in-face right axis, in-face down axis
_FACE_NORMAL = np.array([
    [0.0, 0.0, -1.0],   # back
    [0.0, -1.0, 0.0],   # down
    [0.0, 0.0, 1.0],    # front
    [-1.0, 0.0, 0.0],   # left
    [1.0, 0.0, 0.0],    # right
    [0.0, 1.0, 0.0],    # up
])
_FACE_RIGHT = np.array([
    [-1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
    [1.0, 0.0, 0.0],
])
_FACE_DOWN = np.array([
    [0.0, -1.0, 0.0],
    [0.0, 0.0, -1.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
])

# face chosen per axis and sign: +x -> right, -x -> left, +y -> up, ...
_AXIS_FACE = np.array([
    [FACE_ORDER.index("right"), FACE_ORDER.index("left")],
    [FACE_ORDER.index("up"), FACE_ORDER.index("down")],
    [FACE_ORDER.index("front"), FACE_ORDER.index("back")],
])


@dataclass
class CubemapTensor:
    """Six square faces stacked as a (6, C, S, S) tensor, order fixed."""

    faces: Tensor

    def __post_init__(self):
        if self.faces.ndim != 4 or self.faces.shape[0] != 6 or self.faces.shape[2] != self.faces.shape[3]:
            raise ShapeError(f"cubemap faces must be (6, C, S, S), got {self.faces.shape}")

    @property
    def face_order(self) -> tuple:
        return FACE_ORDER

    @property
    def face_size(self) -> int:
        return self.faces.shape[2]

    @property
    def channels(self) -> int:
        return self.faces.shape[1]


def dir_from_equirect(u, v, w: int, h: int) -> np.ndarray:
    """Unit direction(s) for continuous equirect pixel coordinates, shape (..., 3)."""
    if w != 2 * h:
        raise ShapeError(f"equirect width must be twice the height, got {w}x{h}")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    lam = (u + 0.5) / w * (2.0 * np.pi) - np.pi
    phi = np.pi / 2.0 - (v + 0.5) / h * np.pi
    cphi = np.cos(phi)
    return np.stack([cphi * np.sin(lam), np.sin(phi), cphi * np.cos(lam)], axis=-1)


def equirect_from_dir(d: np.ndarray, w: int, h: int):
    """Inverse of dir_from_equirect; at the poles longitude is defined as 0."""
    d = np.asarray(d, dtype=np.float64)
    lam = np.arctan2(d[..., 0], d[..., 2])  # atan2(0, 0) = 0 handles the poles
    phi = np.arcsin(np.clip(d[..., 1], -1.0, 1.0))
    u = (lam + np.pi) / (2.0 * np.pi) * w - 0.5
    v = (np.pi / 2.0 - phi) / np.pi * h - 0.5
    return u, v


def face_coords_from_dir(d: np.ndarray):
    """Assign each unit direction to a face and its gnomonic (a, b) in [-1, 1].

    The face is the one whose axis dominates |d|; exact ties go to the face
    that comes first in FACE_ORDER, so face coverage partitions the sphere.
    """
    d = np.asarray(d, dtype=np.float64)
    comps = np.moveaxis(d, -1, 0)                      # (3, ...)
    absc = np.abs(comps)
    cand = _AXIS_FACE[np.arange(3)[:, None], (comps.reshape(3, -1) < 0).astype(int)]
    cand = cand.reshape(absc.shape)                    # candidate face per axis
    maxabs = absc.max(axis=0)
    is_max = absc == maxabs
    face = np.where(is_max, cand, 6).min(axis=0)       # smallest face index among ties
    n = _FACE_NORMAL[face]
    denom = np.einsum("...k,...k->...", d, n)
    a = np.einsum("...k,...k->...", d, _FACE_RIGHT[face]) / denom
    b = np.einsum("...k,...k->...", d, _FACE_DOWN[face]) / denom
    return face, a, b


def dir_from_face_coords(face, a, b) -> np.ndarray:
    """Normalized gnomonic inverse: dir ~ normal + a*right + b*down."""
    face = np.asarray(face)
    if np.any(face < 0) or np.any(face > 5):
        raise ContractError(f"face index out of range 0..5: {face}")
    a = np.asarray(a, dtype=np.float64)[..., None]
    b = np.asarray(b, dtype=np.float64)[..., None]
    v = _FACE_NORMAL[face] + a * _FACE_RIGHT[face] + b * _FACE_DOWN[face]
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


_E2C_COORD_CACHE: dict = {}


def _e2c_coords(h: int) -> np.ndarray:
    """Equirect pixel coords of all face texel centers, shape (6*S*S, 2)."""
    got = _E2C_COORD_CACHE.get(h)
    if got is None:
        s = h // 2
        ab = (np.arange(s) + 0.5) / s * 2.0 - 1.0
        aa, bb = np.meshgrid(ab, ab)                   # aa: columns, bb: rows
        coords = []
        for f in range(6):
            d = dir_from_face_coords(np.full(aa.shape, f), aa, bb)
            u, v = equirect_from_dir(d, 2 * h, h)
            coords.append(np.stack([u.ravel(), v.ravel()], axis=1))
        got = np.concatenate(coords, axis=0)
        _E2C_COORD_CACHE[h] = got
    return got


def resample_equirect_to_cubemap(img: Tensor) -> CubemapTensor:
    """Project a (C, H, 2H) panorama onto six (C, S, S) faces, S = H/2.

    Bilinear sampling with horizontal wrap and vertical clamp; differentiable,
    gradients flow back to the panorama.
    """
    if img.ndim != 3 or img.shape[2] != 2 * img.shape[1]:
        raise ShapeError(f"expected (C, H, 2H) panorama, got {img.shape}")
    c, h, _ = img.shape
    if h % 2 != 0:
        raise ShapeError(f"panorama height must be even, got {h}")
    s = h // 2
    sampled = ops.grid_sample_bilinear(img, _e2c_coords(h), mode="wrap_x")  # (C, 6*S*S)
    faces = ops.transpose(ops.reshape(sampled, (c, 6, s, s)), (1, 0, 2, 3))
    return CubemapTensor(faces)


def _bilinear_faces(faces: np.ndarray, face: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear lookup inside each pixel's assigned face, clamped at borders."""
    _, c, s, _ = faces.shape
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    wx = x - x0
    wy = y - y0
    x0c = np.clip(x0, 0, s - 1)
    x1c = np.clip(x0 + 1, 0, s - 1)
    y0c = np.clip(y0, 0, s - 1)
    y1c = np.clip(y0 + 1, 0, s - 1)
    v00 = faces[face, :, y0c, x0c]
    v01 = faces[face, :, y0c, x1c]
    v10 = faces[face, :, y1c, x0c]
    v11 = faces[face, :, y1c, x1c]
    wx = wx[..., None]
    wy = wy[..., None]
    out = (v00 * (1 - wx) * (1 - wy) + v01 * wx * (1 - wy)
           + v10 * (1 - wx) * wy + v11 * wx * wy)
    return np.moveaxis(out, -1, 0)  # (C, ...)


def resample_cubemap_to_equirect(cm: CubemapTensor, h: int) -> Tensor:
    """Render a cubemap back into a (C, H, 2H) panorama (tooling path).

    Per pixel: face lookup, then bilinear sampling clamped within that face.
    Not recorded on the tape; the network never needs this direction.
    """
    w = 2 * h
    s = cm.face_size
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    d = dir_from_equirect(uu, vv, w, h)
    face, a, b = face_coords_from_dir(d)
    x = (a + 1.0) / 2.0 * s - 0.5
    y = (b + 1.0) / 2.0 * s - 0.5
    out = _bilinear_faces(cm.faces.data, face, x, y)
    return Tensor(np.ascontiguousarray(out))
