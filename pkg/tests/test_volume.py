import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from linguine.errors import InvalidArgumentError, OutOfBoundsError
from linguine.volume import (
    STANDARD_SPACING,
    ElementKind,
    Volume,
    index_from_world,
    resample,
    resample_to_standard,
    world_from_index,
)


def hu(data, spacing=(1.5, 1.5, 2.0), origin=(0.0, 0.0, 0.0)):
    return Volume(np.asarray(data), spacing, origin, ElementKind.HU_INT)


# construction ---------------------------------------------------------------


def test_volume_casts_to_kind_dtype_and_freezes():
    v = hu(np.zeros((2, 3, 4)))
    assert v.data.dtype == np.int16
    assert v.dims == (2, 3, 4)
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


@pytest.mark.parametrize("spacing", [(0, 1, 1), (1, -1, 1)])
def test_volume_rejects_nonpositive_spacing(spacing):
    with pytest.raises(InvalidArgumentError):
        hu(np.zeros((2, 2, 2)), spacing=spacing)


def test_volume_rejects_out_of_range_values():
    with pytest.raises(InvalidArgumentError):
        Volume(np.full((2, 2, 2), 1.5), (1, 1, 1), (0, 0, 0), ElementKind.PROB_FLOAT)
    with pytest.raises(InvalidArgumentError):
        Volume(np.full((2, 2, 2), -1), (1, 1, 1), (0, 0, 0), ElementKind.LABEL_UINT)


# coordinates ----------------------------------------------------------------


def test_world_from_index_examples():
    v = hu(np.zeros((4, 4, 4)))
    assert np.allclose(world_from_index(v, (0, 0, 0)), (0, 0, 0))
    v2 = hu(np.zeros((4, 4, 4)), origin=(10, 0, 0))
    assert np.allclose(world_from_index(v2, (2, 0, 1)), (13.0, 0.0, 2.0))


def test_index_from_world_rounds_half_away_from_zero():
    v = hu(np.zeros((8, 8, 8)), spacing=(1, 1, 1), origin=(-4, -4, -4))
    # 0.5 past voxel 4 (world 0.5) rounds up, 0.5 before voxel 4 (world -0.5 from 4 -> index 3.5) rounds to 4
    assert index_from_world(v, (0.5, -0.5, 0.0)) == (5, 4, 4)
    assert index_from_world(v, (-3.5, 0, 0))[0] == 1


def test_index_from_world_outside_grid_raises():
    v = hu(np.zeros((4, 4, 4)))
    with pytest.raises(OutOfBoundsError):
        index_from_world(v, (100, 0, 0))
    with pytest.raises(OutOfBoundsError):
        index_from_world(v, (-5, 0, 0))


@settings(max_examples=60, deadline=None)
@given(
    dims=st.tuples(*[st.integers(1, 12)] * 3),
    spacing=st.tuples(*[st.floats(0.3, 4.0)] * 3),
    origin=st.tuples(*[st.floats(-200, 200)] * 3),
    data=st.data(),
)
def test_world_index_round_trip(dims, spacing, origin, data):
    v = hu(np.zeros(dims), spacing, origin)
    idx = tuple(data.draw(st.integers(0, d - 1)) for d in dims)
    assert index_from_world(v, world_from_index(v, idx)) == idx


# resampling -----------------------------------------------------------------


def test_resample_identity_spacing_returns_same_data():
    rng = np.random.default_rng(0)
    v = hu(rng.integers(-1000, 1000, size=(5, 6, 7)))
    out = resample_to_standard(v, STANDARD_SPACING)
    assert out.dims == v.dims
    assert np.array_equal(out.data, v.data)


def test_resample_dims_follow_ceiling_rule():
    v = hu(np.zeros((4, 4, 4)), spacing=(3, 3, 4))
    out = resample_to_standard(v, (1.5, 1.5, 2.0))
    assert out.dims == (8, 8, 8)
    assert out.spacing == (1.5, 1.5, 2.0)
    assert out.origin == v.origin


def test_resample_ramp_midpoint_is_linear():
    v = Volume(np.array([0.0, 1.0]).reshape(2, 1, 1), (3.0, 1.0, 1.0), (0, 0, 0), ElementKind.PROB_FLOAT)
    h = hu(np.array([0, 10]).reshape(2, 1, 1), spacing=(3.0, 1.0, 1.0))
    out = resample(h, (1.5, 1.0, 1.0), "trilinear")
    assert out.dims == (4, 1, 1)
    assert out.data[1, 0, 0] == 5  # sample at x = 1.5 mm, halfway between the two centres
    pout = resample(v, (1.5, 1.0, 1.0), "trilinear")
    assert pout.data[1, 0, 0] == pytest.approx(0.5)


def test_resample_rejects_bad_spacing():
    v = hu(np.zeros((2, 2, 2)))
    with pytest.raises(InvalidArgumentError):
        resample_to_standard(v, (1.5, 0.0, 2.0))


def test_resample_label_requires_nearest():
    v = Volume(np.ones((2, 2, 2)), (1, 1, 1), (0, 0, 0), ElementKind.LABEL_UINT)
    with pytest.raises(InvalidArgumentError):
        resample(v, (0.5, 0.5, 0.5), "trilinear")


def test_resample_far_outside_samples_take_padding():
    v = hu(np.full((2, 2, 2), 50), spacing=(1, 1, 1))
    out = resample(v, (1, 1, 1), "trilinear", dims=(6, 2, 2), origin=(0, 0, 0))
    assert (out.data[:2] == 50).all()
    assert (out.data[3:] == -1024).all()


def test_resample_preserves_physical_extent_within_one_voxel():
    v = hu(np.zeros((7, 9, 5)), spacing=(2.3, 0.9, 3.1))
    out = resample_to_standard(v)
    for a in range(3):
        assert abs(out.extent_mm[a] - v.extent_mm[a]) < out.spacing[a] + 1e-9


grids = st.tuples(st.integers(2, 6), st.integers(2, 6), st.integers(2, 6))
spacings = st.tuples(*[st.sampled_from([0.75, 1.0, 1.5, 2.0, 3.0])] * 3)
targets = st.tuples(*[st.sampled_from([0.8, 1.5, 2.0, 2.5])] * 3)


@settings(max_examples=40, deadline=None)
@given(dims=grids, spacing=spacings, target=targets, c=st.integers(-1000, 1000))
def test_resample_constant_volume_stays_constant(dims, spacing, target, c):
    v = hu(np.full(dims, c), spacing)
    out = resample_to_standard(v, target)
    assert out.data.min() == c and out.data.max() == c


@settings(max_examples=40, deadline=None)
@given(dims=grids, spacing=spacings, target=targets, seed=st.integers(0, 2**16))
def test_nearest_introduces_no_new_labels(dims, spacing, target, seed):
    rng = np.random.default_rng(seed)
    data = rng.choice([0, 3, 7, 44], size=dims)
    v = Volume(data, spacing, (0, 0, 0), ElementKind.LABEL_UINT)
    out = resample_to_standard(v, target)
    assert set(np.unique(out.data)) <= set(np.unique(data))


@settings(max_examples=40, deadline=None)
@given(dims=grids, spacing=spacings, target=targets, seed=st.integers(0, 2**16),
       a=st.floats(0.1, 0.9), b=st.floats(0.0, 0.1))
def test_trilinear_commutes_with_affine_intensity(dims, spacing, target, seed, a, b):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0, 1, size=dims)
    v = Volume(data, spacing, (0, 0, 0), ElementKind.PROB_FLOAT)
    w = v.with_data(a * v.data + b)
    lhs = resample_to_standard(w, target).data.astype(np.float64)
    rhs = a * resample_to_standard(v, target).data.astype(np.float64) + b
    assert np.allclose(lhs, rhs, atol=1e-5)


def test_trilinear_matches_scipy_map_coordinates_inside():
    from scipy import ndimage

    rng = np.random.default_rng(1)
    data = rng.uniform(0, 1, size=(6, 5, 4))
    v = Volume(data, (2.0, 3.0, 2.5), (0, 0, 0), ElementKind.PROB_FLOAT)
    out = resample(v, (1.0, 1.0, 1.0), "trilinear")
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in out.dims], indexing="ij"), axis=0).astype(float)
    src_idx = grid * np.array([1.0, 1.0, 1.0]).reshape(3, 1, 1, 1) / np.array(v.spacing).reshape(3, 1, 1, 1)
    expected = ndimage.map_coordinates(v.data.astype(np.float64), src_idx, order=1, mode="nearest")
    assert np.allclose(out.data, expected, atol=1e-6)
    assert math.isclose(float(out.data[2, 3, 5]), float(expected[2, 3, 5]), abs_tol=1e-6)
