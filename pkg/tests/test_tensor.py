import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sscn.tensor import (Coordinate, SparseTensor, SparseTensorError, create, densify,
                         from_coords, set_site, sparsify)


def test_empty_tensor_densifies_to_zero():
    t = create(3, (4, 4, 4), m=2)
    assert t.a == 0
    assert densify(t).shape == (1, 4, 4, 4, 2)
    assert not densify(t).any()


def test_set_site_and_overwrite():
    t = create(2, (5, 5), m=2)
    set_site(t, Coordinate((1, 2)), [1.0, 2.0])
    set_site(t, Coordinate((1, 2)), [3.0, 4.0])
    assert t.a == 1
    np.testing.assert_array_equal(densify(t)[0, 1, 2], [3.0, 4.0])


def test_batch_coordinate():
    t = create(2, (3, 3), batch_size=2)
    set_site(t, Coordinate((0, 0), batch=1), 5.0)
    assert densify(t)[1, 0, 0, 0] == 5.0
    assert densify(t)[0, 0, 0, 0] == 0.0


@pytest.mark.parametrize("bad", [(5, 0), (-1, 0), (0, 9)])
def test_out_of_bounds(bad):
    t = create(2, (5, 5))
    with pytest.raises(SparseTensorError):
        set_site(t, Coordinate(bad), 1.0)


def test_wrong_feature_length():
    t = create(2, (5, 5), m=3)
    with pytest.raises(SparseTensorError):
        set_site(t, Coordinate((0, 0)), [1.0, 2.0])


@pytest.mark.parametrize("dims", [1, 5])
def test_dims_limits(dims):
    with pytest.raises(SparseTensorError):
        SparseTensor(dims, (4,) * dims)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 3), st.integers(1, 3), st.floats(0.0, 1.0), st.integers(0, 2 ** 31))
def test_sparsify_densify_roundtrip(d, m, density, seed):
    rng = np.random.default_rng(seed)
    dense = rng.standard_normal((2,) + (4,) * d + (m,))
    dense[rng.random(dense.shape[:-1]) > density] = 0
    t = sparsify(dense)
    np.testing.assert_array_equal(densify(t), dense)
    # active iff the max-norm exceeds the threshold
    assert t.a == int((np.abs(dense).max(axis=-1) > 0).sum())


def test_sparsify_threshold_and_all_active():
    dense = np.zeros((1, 3, 3, 1))
    dense[0, 1, 1, 0] = 0.5
    dense[0, 0, 0, 0] = -2.0
    assert sparsify(dense, threshold=1.0).a == 1
    assert sparsify(dense, threshold=-1.0).a == 9


def test_from_coords_and_coords_property(rng):
    coords = np.array([[0, 1, 2], [0, 3, 0], [0, 0, 0]])
    feats = rng.standard_normal((3, 2))
    t = from_coords(coords, feats, (4, 4))
    np.testing.assert_array_equal(t.coords, coords)
    np.testing.assert_array_equal(t.features, feats)
    assert t.dtype == feats.dtype


def test_with_features_shares_index(rng):
    t = from_coords(np.array([[0, 1, 1]]), np.ones((1, 1)), (3, 3))
    u = t.with_features(np.full((1, 4), 2.0))
    assert u.index is t.index and u.m == 4
