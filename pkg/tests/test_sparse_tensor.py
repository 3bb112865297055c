import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sdpcc.sparse_tensor import (
    CoordinateRangeError,
    DuplicateCoordinateError,
    SparseTensor3,
    canonicalize,
    child_candidates,
    downsample_coords,
    morton_decode,
    morton_encode,
    octant_index,
    scale_pyramid,
    unique_coords,
)


def _naive_morton(x, y, z):
    key = 0
    for j in range(16):
        key |= ((x >> j) & 1) << (3 * j + 2)
        key |= ((y >> j) & 1) << (3 * j + 1)
        key |= ((z >> j) & 1) << (3 * j)
    return key


coord_sets = arrays(np.int64, st.tuples(st.integers(1, 40), st.just(3)), elements=st.integers(0, 63))


@pytest.mark.parametrize("c,key", [((0, 0, 0), 0), ((1, 0, 0), 4), ((1, 1, 1), 7), ((0, 1, 0), 2), ((0, 0, 2), 8)])
def test_morton_examples(c, key):
    assert morton_encode(c) == key


def test_morton_matches_bit_loop_at_extremes():
    for c in [(65535, 0, 0), (0, 65535, 0), (12345, 54321, 777), (65535, 65535, 65535)]:
        assert morton_encode(c) == _naive_morton(*c)


@pytest.mark.parametrize("bad", [(-1, 0, 0), (0, 65536, 0)])
def test_morton_range_error(bad):
    with pytest.raises(CoordinateRangeError):
        morton_encode(bad)


@given(arrays(np.int64, (30, 3), elements=st.integers(0, 65535)))
def test_morton_roundtrip_and_injective(c):
    keys = morton_encode(c)
    assert np.array_equal(morton_decode(keys), c)
    assert len(np.unique(keys)) == len(unique_coords(c))


@given(st.integers(0, 65534), st.integers(0, 65535), st.integers(0, 65535))
def test_morton_monotone_per_axis(x, y, z):
    assert morton_encode((x + 1, y, z)) > morton_encode((x, y, z))


def test_canonicalize_sorts_rows():
    t = canonicalize([(1, 0, 0), (0, 0, 0)], np.array([[1.0], [2.0]]), 4)
    assert t.coords.tolist() == [[0, 0, 0], [1, 0, 0]]
    assert t.feats[:, 0].tolist() == [2.0, 1.0]


def test_canonicalize_empty():
    t = canonicalize(np.zeros((0, 3)), np.zeros((0, 2)), 4)
    assert len(t) == 0 and t.channels == 2


def test_canonicalize_duplicates_raise():
    with pytest.raises(DuplicateCoordinateError):
        canonicalize([(0, 0, 0), (0, 0, 0)], None, 4)


def test_tensor_rejects_misaligned_rows():
    with pytest.raises(ValueError):
        SparseTensor3.from_sorted([[0, 0, 0]], np.zeros((2, 1)), 3)


@settings(max_examples=50)
@given(coord_sets, st.randoms(use_true_random=False))
def test_canonicalize_order_independent(c, rnd):
    c = unique_coords(c)
    feats = np.arange(len(c), dtype=np.float32)[:, None]
    t = canonicalize(c, feats, 6)
    perm = list(range(len(c)))
    rnd.shuffle(perm)
    assert canonicalize(c[perm], feats[perm], 6).equals(t)


def test_downsample_examples():
    assert downsample_coords(np.array([[5, 3, 7], [4, 2, 6]])).tolist() == [[2, 1, 3]]
    assert downsample_coords(np.array([[0, 0, 0]])).tolist() == [[0, 0, 0]]
    kids = child_candidates(np.array([[3, 1, 2]]))
    assert downsample_coords(kids).tolist() == [[3, 1, 2]]


def test_downsample_accepts_tensor():
    t = canonicalize([(2, 2, 2), (3, 3, 3), (9, 0, 0)], None, 4)
    assert downsample_coords(t).tolist() == [[1, 1, 1], [4, 0, 0]]


def test_child_candidates_examples():
    assert child_candidates(np.array([[0, 0, 0]])).tolist() == [
        [0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1], [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]
    ]
    assert child_candidates(np.zeros((0, 3), np.int64)).shape == (0, 3)
    kids = child_candidates(np.array([[1, 1, 1]]))
    assert sorted(map(tuple, kids.tolist())) == [
        (x, y, z) for x in (2, 3) for y in (2, 3) for z in (2, 3)
    ]


@given(coord_sets)
def test_children_then_parents_is_identity(c):
    parents = unique_coords(c)
    kids = child_candidates(parents)
    assert np.array_equal(downsample_coords(kids), parents)
    keys = morton_encode(kids)
    assert np.all(np.diff(keys.astype(np.int64)) > 0)
    groups = np.bincount(octant_index(kids), minlength=8)
    assert groups.tolist() == [len(parents)] * 8


@pytest.mark.parametrize("c,g", [((0, 0, 0), 0), ((1, 0, 1), 5), ((3, 2, 2), 4), ((1, 1, 1), 7)])
def test_octant_index(c, g):
    assert octant_index(c) == g


def test_scale_pyramid_chain():
    c = np.array([[63, 0, 5], [10, 10, 10], [11, 10, 10]])
    pyr = scale_pyramid(c, 6, 3)
    assert sorted(pyr) == [3, 4, 5, 6]
    assert pyr[3].tolist() == downsample_coords(downsample_coords(downsample_coords(c))).tolist()
