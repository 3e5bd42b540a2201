import itertools

import numpy as np
import pytest

from sscn.rulebook import (FilterGeometry, RuleBookCache, RuleBookError, build_pool, build_sc,
                           build_ssc, invert, sc_output_size)
from sscn.tensor import SparseTensor, from_coords
from sscn.verify import grid_length, random_tensor


def pair_set(rb, t_in, out_coords):
    """Rule book as a set of (offset, input coordinate, output coordinate)."""
    out = set()
    for i, r in enumerate(rb.rules):
        for j, k in r:
            out.add((i, tuple(t_in.coords[j]), tuple(out_coords[k])))
    return out


def brute_sc(t, f, s):
    active = {tuple(c) for c in t.coords}
    out_size = sc_output_size(t.spatial_size, f, s)
    pairs = set()
    offsets = list(itertools.product(range(f), repeat=t.dims))
    for b in range(t.batch_size):
        for y in itertools.product(*[range(n) for n in out_size]):
            for i, off in enumerate(offsets):
                x = (b,) + tuple(yy * s + o for yy, o in zip(y, off))
                if x in active:
                    pairs.add((i, x, (b,) + y))
    return pairs


def brute_ssc(t, f):
    active = {tuple(c) for c in t.coords}
    c = (f - 1) // 2
    pairs = set()
    for i, off in enumerate(itertools.product(range(f), repeat=t.dims)):
        for y in active:
            x = (y[0],) + tuple(yy + o - c for yy, o in zip(y[1:], off))
            if x in active:
                pairs.add((i, x, y))
    return pairs


def coords_of(index, spatial, batch):
    return np.stack(np.unravel_index(index.keys_in_order, (batch,) + tuple(spatial)), axis=1)


@pytest.mark.parametrize("seed", range(12))
def test_sc_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    d = 2 + seed % 2
    f, s = [(2, 2), (3, 1), (3, 2), (2, 1)][seed % 4]
    size = tuple(grid_length(rng, f, s, hi=7) for _ in range(d))
    t = random_tensor(rng, d, size, 1, 0.3, batch=2)
    rb = build_sc(t, f, s)
    rb.validate()
    out_coords = coords_of(rb.out_index, rb.out_spatial_size, 2)
    assert pair_set(rb, t, out_coords) == brute_sc(t, f, s)
    # every output site has at least one input
    assert len({k for r in rb.rules for k in r[:, 1]}) == rb.a_out


@pytest.mark.parametrize("seed", range(8))
def test_ssc_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    d = 2 + seed % 2
    f = (3, 5)[seed % 2] if d == 2 else 3
    t = random_tensor(rng, d, (6,) * d, 1, 0.3, batch=2)
    rb = build_ssc(t, f)
    assert rb.out_index is t.index
    assert pair_set(rb, t, t.coords) == brute_ssc(t, f)
    # centre offset is the identity map
    np.testing.assert_array_equal(rb.rules[rb.geometry.center], np.stack([np.arange(t.a)] * 2, 1))


def test_within_offset_rows_unique(rng):
    t = random_tensor(rng, 3, (7, 7, 7), 1, 0.4)
    for rb in (build_sc(t, 3, 2), build_ssc(t, 3)):
        for r in rb.rules:
            assert len(np.unique(r[:, 0])) == len(r)
            assert len(np.unique(r[:, 1])) == len(r)


def test_invert_swaps_and_round_trips(rng):
    t = random_tensor(rng, 2, (8, 8), 1, 0.3)
    rb = build_sc(t, 2, 2)
    dc = invert(rb)
    assert dc.kind == "DC" and dc.out_index is t.index and dc.in_index is rb.out_index
    assert dc.out_spatial_size == t.spatial_size
    for a, b in zip(rb.rules, dc.rules):
        np.testing.assert_array_equal(a[:, ::-1], b)
    back = invert(dc)
    assert back.kind == "SC"
    with pytest.raises(RuleBookError):
        invert(build_ssc(t, 3))


def test_geometry_and_errors():
    g = FilterGeometry(3, 1, 2)
    assert g.volume == 9 and g.center == 4
    assert g.offsets[0].tolist() == [0, 0] and g.offsets[-1].tolist() == [2, 2]
    with pytest.raises(RuleBookError):
        sc_output_size((5,), 2, 2)
    t = SparseTensor(2, (4, 4))
    with pytest.raises(RuleBookError):
        build_ssc(t, 2)
    with pytest.raises(RuleBookError):
        build_pool(t, 2, 2, "XX")


def test_empty_input():
    t = SparseTensor(3, (4, 4, 4))
    rb = build_sc(t, 2, 2)
    assert rb.a_out == 0 and rb.n_pairs == 0
    assert build_ssc(t, 3).n_pairs == 0


def test_cache_keyed_by_active_set(rng):
    t = random_tensor(rng, 3, (8, 8, 8), 1, 0.2)
    cache = RuleBookCache()
    a = cache.get(t, 3, 1, "SSC")
    assert cache.get(t.with_features(t.features * 2), 3, 1, "SSC") is a
    assert cache.builds == 1 and cache.hits == 1
    cache.get(t, 2, 2, "SC")
    assert cache.builds == 2
    u = from_coords(t.coords, t.features, t.spatial_size)
    assert cache.get(u, 3, 1, "SSC") is not a       # new index, new generation
    off = RuleBookCache(enabled=False)
    off.get(t, 3, 1, "SSC")
    off.get(t, 3, 1, "SSC")
    assert off.builds == 2 and off.hits == 0
