"""Sparse 3D tensors in canonical Morton order and the coordinate arithmetic
shared by every layer: dyadic down/up-sampling and octant grouping.

Coordinates are stored as ``(n, 3)`` int64 arrays with a parallel uint64 array
of Morton keys. Bit ``j`` of x goes to key bit ``3j+2``, y to ``3j+1`` and z to
``3j``, so x is the most significant axis inside every octave.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_BIT_DEPTH = 16


class CoordinateRangeError(ValueError):
    pass


class DuplicateCoordinateError(ValueError):
    pass


def _spread_bits(v: np.ndarray) -> np.ndarray:
    # 16-bit input -> every third bit of a 48-bit word
    v = v.astype(np.uint64) & np.uint64(0xFFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x0C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x249249249249)
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x0C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0xFFFF)
    return v.astype(np.int64)


def morton_encode(coords) -> np.ndarray | int:
    """Morton key(s) for one coordinate triple or an ``(n, 3)`` array.

    Raises :class:`CoordinateRangeError` for components outside ``[0, 2**16)``.
    """
    arr = np.asarray(coords, dtype=np.int64)
    scalar = arr.ndim == 1
    arr = arr.reshape(-1, 3)
    if arr.size and (arr.min() < 0 or arr.max() >= (1 << MAX_BIT_DEPTH)):
        raise CoordinateRangeError(f"coordinate components must lie in [0, 2^{MAX_BIT_DEPTH})")
    keys = (
        (_spread_bits(arr[:, 0]) << np.uint64(2))
        | (_spread_bits(arr[:, 1]) << np.uint64(1))
        | _spread_bits(arr[:, 2])
    )
    return int(keys[0]) if scalar else keys


def morton_decode(keys) -> np.ndarray:
    k = np.asarray(keys, dtype=np.uint64).reshape(-1)
    return np.stack(
        [_compact_bits(k >> np.uint64(2)), _compact_bits(k >> np.uint64(1)), _compact_bits(k)],
        axis=1,
    )


def octant_index(coords) -> np.ndarray | int:
    """Group id ``4*(x%2) + 2*(y%2) + z%2``."""
    arr = np.asarray(coords, dtype=np.int64)
    if arr.ndim == 1:
        return int(4 * (arr[0] & 1) + 2 * (arr[1] & 1) + (arr[2] & 1))
    return 4 * (arr[:, 0] & 1) + 2 * (arr[:, 1] & 1) + (arr[:, 2] & 1)


@dataclass(frozen=True, eq=False)
class SparseTensor3:
    """Morton-sorted coordinates with aligned feature rows.

    Build through :func:`canonicalize` (arbitrary input order) or
    :meth:`from_sorted` when the caller already guarantees canonical order.
    """

    coords: np.ndarray
    feats: np.ndarray
    bit_depth: int
    keys: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.keys is None:
            object.__setattr__(self, "keys", morton_encode(self.coords))
        if self.feats.ndim != 2 or self.feats.shape[0] != self.coords.shape[0]:
            raise ValueError("feature rows must align with coordinates")
        if self.coords.shape[0] and self.coords.max() >= (1 << self.bit_depth):
            raise CoordinateRangeError(f"coordinate exceeds bit depth {self.bit_depth}")

    @classmethod
    def from_sorted(cls, coords, feats, bit_depth, keys=None):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        return cls(coords, np.asarray(feats), int(bit_depth), keys)

    @classmethod
    def occupancy(cls, coords, bit_depth, dtype=np.float32):
        """Geometry-only tensor: one all-ones channel."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        return cls.from_sorted(coords, np.ones((len(coords), 1), dtype=dtype), bit_depth)

    def __len__(self):
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def with_feats(self, feats) -> "SparseTensor3":
        return SparseTensor3(self.coords, feats, self.bit_depth, self.keys)

    def same_coords(self, other: "SparseTensor3") -> bool:
        return np.array_equal(self.keys, other.keys)

    def equals(self, other: "SparseTensor3") -> bool:
        return (
            self.bit_depth == other.bit_depth
            and self.same_coords(other)
            and np.array_equal(self.feats, other.feats)
        )


def canonicalize(coords, feats=None, bit_depth: int = MAX_BIT_DEPTH) -> SparseTensor3:
    """Sort by Morton key. Duplicate coordinates raise instead of merging."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if feats is None:
        feats = np.ones((len(coords), 1), dtype=np.float32)
    feats = np.asarray(feats)
    if feats.ndim == 1:
        feats = feats.reshape(-1, 1)
    if len(feats) != len(coords):
        raise ValueError(f"{len(coords)} coordinates but {len(feats)} feature rows")
    if not (0 < bit_depth <= MAX_BIT_DEPTH):
        raise CoordinateRangeError(f"bit depth {bit_depth} not in 1..{MAX_BIT_DEPTH}")
    keys = morton_encode(coords)
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    if len(keys) > 1 and np.any(keys[1:] == keys[:-1]):
        dup = morton_decode(keys[1:][keys[1:] == keys[:-1]][:1])[0]
        raise DuplicateCoordinateError(f"duplicate coordinate {tuple(int(v) for v in dup)}")
    return SparseTensor3(coords[order], feats[order], bit_depth, keys)


def unique_coords(coords) -> np.ndarray:
    """Deduplicate and Morton-sort a coordinate array."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    keys = np.unique(morton_encode(coords))
    return morton_decode(keys)


def downsample_coords(t) -> np.ndarray:
    """Parents (floor-divide by 2) of the tensor's coordinates, deduplicated and sorted.

    Accepts a :class:`SparseTensor3` or a plain coordinate array. Dividing every
    component by two drops the lowest octave, which is the low three key bits.
    """
    if isinstance(t, SparseTensor3):
        keys = t.keys
    else:
        keys = morton_encode(np.asarray(t, dtype=np.int64).reshape(-1, 3))
    parent_keys = np.unique(keys >> np.uint64(3))
    return morton_decode(parent_keys)


def parent_index(child_keys: np.ndarray, parent_keys: np.ndarray) -> np.ndarray:
    """Index into ``parent_keys`` of every child's parent (parents must exist)."""
    return np.searchsorted(parent_keys, child_keys >> np.uint64(3))


def child_candidates(coords) -> np.ndarray:
    """All 8 children of every parent, globally Morton sorted.

    Children of a sorted parent list are already sorted: key(2p + d) is
    ``key(p) << 3 | octant(d)``.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    keys = morton_encode(coords)
    child_keys = ((keys << np.uint64(3))[:, None] | np.arange(8, dtype=np.uint64)[None, :]).reshape(-1)
    return morton_decode(child_keys)


def child_candidate_keys(parent_keys: np.ndarray) -> np.ndarray:
    return ((parent_keys << np.uint64(3))[:, None] | np.arange(8, dtype=np.uint64)[None, :]).reshape(-1)


def scale_pyramid(coords, bit_depth: int, lowest: int) -> dict[int, np.ndarray]:
    """Coordinate sets for every scale from ``bit_depth`` down to ``lowest``."""
    out = {bit_depth: unique_coords(coords)}
    for s in range(bit_depth - 1, lowest - 1, -1):
        out[s] = downsample_coords(out[s + 1])
    return out
