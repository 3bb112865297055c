"""Toy voxel shapes and moving-shape sequences for desk-scale training and tests."""

from __future__ import annotations

import numpy as np

from .sparse_tensor import SparseTensor3, canonicalize, unique_coords


def _shell(mask_fn, size: int) -> np.ndarray:
    g = np.arange(size)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    inside = mask_fn(x, y, z)
    # keep voxels inside the solid that touch the outside along an axis
    pad = np.pad(inside, 1)
    interior = inside.copy()
    for ax in range(3):
        for d in (-1, 1):
            interior &= np.roll(pad, d, axis=ax)[1:-1, 1:-1, 1:-1]
    return np.argwhere(inside & ~interior)


def ellipsoid(radii, size=None) -> np.ndarray:
    r = np.asarray(radii, dtype=float)
    size = size or int(2 * r.max() + 3)
    c = (size - 1) / 2
    return _shell(lambda x, y, z: ((x - c) / r[0]) ** 2 + ((y - c) / r[1]) ** 2 + ((z - c) / r[2]) ** 2 <= 1, size)


def box(sides) -> np.ndarray:
    a, b, c = (int(s) for s in sides)
    return _shell(lambda x, y, z: (x < a) & (y < b) & (z < c), max(a, b, c))


def torus(major: float, minor: float) -> np.ndarray:
    size = int(2 * (major + minor) + 3)
    c = (size - 1) / 2
    return _shell(
        lambda x, y, z: (np.sqrt((x - c) ** 2 + (y - c) ** 2) - major) ** 2 + (z - c) ** 2 <= minor**2, size
    )


def random_shape(rng: np.random.Generator, scale: float) -> np.ndarray:
    kind = rng.integers(3)
    if kind == 0:
        return ellipsoid(rng.uniform(0.35, 0.8, size=3) * scale)
    if kind == 1:
        return box(np.maximum(2, rng.uniform(0.6, 1.4, size=3) * scale).astype(int))
    return torus(0.6 * scale, max(1.5, rng.uniform(0.2, 0.35) * scale))


def _rotate(pts: np.ndarray, angle: float) -> np.ndarray:
    c = pts.mean(axis=0)
    ca, sa = np.cos(angle), np.sin(angle)
    rot = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    return (pts - c) @ rot.T + c


def moving_sequence(rng: np.random.Generator, frames: int = 4, bit_depth: int = 6,
                    scale: float | None = None, max_speed: int = 2, spin: float = 0.15) -> list[SparseTensor3]:
    """A shape translating with constant integer velocity, optionally spinning about z."""
    size = 1 << bit_depth
    scale = scale or size * rng.uniform(0.18, 0.3)
    base = random_shape(rng, scale).astype(float)
    vel = rng.integers(-max_speed, max_speed + 1, size=3)
    omega = rng.uniform(-spin, spin)
    extent = base.max(axis=0) - base.min(axis=0)
    travel = np.abs(vel) * (frames - 1) + 2
    room = np.maximum(size - extent - travel, 1)
    start = rng.uniform(0, room) + np.where(vel < 0, np.abs(vel) * (frames - 1), 0) - base.min(axis=0)
    out = []
    for t in range(frames):
        pts = _rotate(base, omega * t) + start + vel * t
        c = np.clip(np.rint(pts), 0, size - 1).astype(np.int64)
        out.append(canonicalize(unique_coords(c), None, bit_depth))
    return out


def static_cube(bit_depth: int = 5, side: int = 10, offset: int = 4) -> SparseTensor3:
    pts = box((side, side, side)) + offset
    return canonicalize(unique_coords(pts), None, bit_depth)


def random_cloud(rng: np.random.Generator, points: int, bit_depth: int) -> SparseTensor3:
    c = unique_coords(rng.integers(0, 1 << bit_depth, size=(points, 3)))
    return canonicalize(c, None, bit_depth)
