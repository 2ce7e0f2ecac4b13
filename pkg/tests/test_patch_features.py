"""Neighborhood aggregation and hierarchy merging."""

import numpy as np
import pytest

import oracles
from patchbank.errors import (EmptyList, EvenPatchSize, InvalidShape,
                              NonDecreasingResolution, PatchTooLarge)
from patchbank.feature_io import TensorF32
from patchbank.patch_features import aggregate_neighborhood, \
    merge_hierarchies


def _t(a):
    return TensorF32(np.ascontiguousarray(a, dtype=np.float32))


# ---------------------------------------------------------------------------
# aggregate_neighborhood
# ---------------------------------------------------------------------------

def test_aggregate_windowed_means_3x3():
    # means of the shrinking 3x3 windows over values 0..8, worked by hand
    fm = _t(np.arange(9, dtype=np.float32).reshape(1, 3, 3))
    out = aggregate_neighborhood(fm, 3)
    expected = np.array([[2.0, 2.5, 3.0],
                         [3.5, 4.0, 4.5],
                         [5.0, 5.5, 6.0]], dtype=np.float32)
    assert np.array_equal(out.array[0], expected)


def test_aggregate_s1_is_identity():
    rng = np.random.default_rng(0)
    fm = _t(rng.normal(size=(3, 5, 4)))
    out = aggregate_neighborhood(fm, 1)
    assert np.array_equal(out.array, fm.array)


def test_aggregate_constant_map_unchanged():
    fm = _t(np.full((2, 6, 6), 3.25))
    for s in (1, 3, 5):
        assert np.array_equal(aggregate_neighborhood(fm, s).array, fm.array)


def test_aggregate_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    for _ in range(5):
        c, h, w = rng.integers(1, 4), rng.integers(2, 7), rng.integers(2, 7)
        s = int(rng.choice([1, 3, 5]))
        if s > 2 * min(h, w) - 1:
            continue
        fm = rng.normal(size=(c, h, w)).astype(np.float32)
        out = aggregate_neighborhood(_t(fm), s).array
        for ci in range(c):
            for y in range(h):
                for x in range(w):
                    want = oracles.box_mean_at(fm[ci].astype(np.float64),
                                               y, x, s)
                    assert out[ci, y, x] == pytest.approx(want, rel=1e-6)


def test_aggregate_is_linear():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(2, 5, 5)).astype(np.float32)
    b = rng.normal(size=(2, 5, 5)).astype(np.float32)
    left = aggregate_neighborhood(_t(2.0 * a + 3.0 * b), 3).array
    right = (2.0 * aggregate_neighborhood(_t(a), 3).array
             + 3.0 * aggregate_neighborhood(_t(b), 3).array)
    assert np.allclose(left, right, atol=1e-5)


def test_aggregate_stays_within_input_range():
    rng = np.random.default_rng(9)
    fm = rng.normal(size=(1, 8, 8)).astype(np.float32)
    out = aggregate_neighborhood(_t(fm), 5).array
    assert out.min() >= fm.min() - 1e-6
    assert out.max() <= fm.max() + 1e-6


def test_aggregate_rejects_even_s():
    fm = _t(np.ones((1, 4, 4)))
    with pytest.raises(EvenPatchSize):
        aggregate_neighborhood(fm, 2)


def test_aggregate_rejects_oversized_s():
    fm = _t(np.ones((1, 3, 3)))
    aggregate_neighborhood(fm, 5)  # 2 * 3 - 1, still fine
    with pytest.raises(PatchTooLarge):
        aggregate_neighborhood(fm, 7)


def test_aggregate_rejects_2d_input():
    with pytest.raises(InvalidShape):
        aggregate_neighborhood(_t(np.ones((4, 4))), 3)


# ---------------------------------------------------------------------------
# merge_hierarchies
# ---------------------------------------------------------------------------

def test_merge_single_map_flattens_row_major():
    fm = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    ps = merge_hierarchies([_t(fm)])
    assert ps.grid == (2, 2)
    assert ps.vectors.shape == (4, 2)
    for h in range(2):
        for w in range(2):
            assert np.array_equal(ps.vectors[h * 2 + w], fm[:, h, w])


def test_merge_concatenates_channels():
    hi = _t(np.ones((1, 2, 2)))
    lo = _t(np.full((1, 1, 1), 5.0))
    ps = merge_hierarchies([hi, lo])
    assert ps.vectors.shape == (4, 2)
    assert np.array_equal(ps.vectors[:, 0], np.ones(4, dtype=np.float32))
    assert np.array_equal(ps.vectors[:, 1], np.full(4, 5.0, dtype=np.float32))


def test_merge_upsamples_bilinearly():
    # second map 2x2 upsampled to 4x4; value at (1, 1) worked by hand
    hi = _t(np.zeros((1, 4, 4)))
    lo = _t(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    ps = merge_hierarchies([hi, lo])
    up = ps.vectors[:, 1].reshape(4, 4)
    assert up[1, 1] == pytest.approx(1.75, abs=1e-6)
    assert up[0, 0] == pytest.approx(1.0, abs=1e-6)  # corner clamps
    assert up[3, 3] == pytest.approx(4.0, abs=1e-6)
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    for y in range(4):
        for x in range(4):
            want = oracles.bilinear_at(img, y, x, 4, 4)
            assert up[y, x] == pytest.approx(want, abs=1e-6)


def test_merge_equal_grids_skip_resampling():
    a = np.arange(4, dtype=np.float32).reshape(1, 2, 2)
    b = np.arange(4, 8, dtype=np.float32).reshape(1, 2, 2)
    ps = merge_hierarchies([_t(a), _t(b)])
    assert np.array_equal(ps.vectors[:, 0].reshape(2, 2), a[0])
    assert np.array_equal(ps.vectors[:, 1].reshape(2, 2), b[0])


def test_merge_rejects_empty():
    with pytest.raises(EmptyList):
        merge_hierarchies([])


def test_merge_rejects_growing_resolution():
    small = _t(np.ones((1, 2, 2)))
    big = _t(np.ones((1, 3, 3)))
    with pytest.raises(NonDecreasingResolution):
        merge_hierarchies([small, big])


def test_merge_output_dtype_and_grid():
    rng = np.random.default_rng(1)
    maps = [_t(rng.normal(size=(3, 6, 5))), _t(rng.normal(size=(2, 3, 2)))]
    ps = merge_hierarchies(maps)
    assert ps.grid == (6, 5)
    assert ps.vectors.dtype == np.float32
    assert ps.vectors.shape == (30, 5)
    assert ps.dim == 5
