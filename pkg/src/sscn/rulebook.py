"""Output hash tables and rule books for sparse convolution and pooling layers.

A rule book holds, for every filter offset ``i`` in ``{0..f-1}^d``, an integer
array of ``(input_row, output_row)`` pairs.  Executing a layer is then one
gather / matrix-multiply / scatter-add per offset.
"""
import itertools
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .hashmap import CoordinateHash
from .tensor import SparseTensor

KINDS = ("SC", "SSC", "DC", "MP", "AP")


class RuleBookError(ValueError):
    pass


@dataclass(frozen=True)
class FilterGeometry:
    f: int
    s: int
    d: int

    def __post_init__(self):
        if self.f < 1 or self.s < 1:
            raise RuleBookError(f"filter size and stride must be positive (f={self.f}, s={self.s})")

    @property
    def volume(self):
        return self.f ** self.d

    @property
    def offsets(self):
        return np.array(list(itertools.product(range(self.f), repeat=self.d)),
                        dtype=np.int64).reshape(-1, self.d)

    @property
    def center(self):
        """Index of the central offset (only meaningful for odd ``f``)."""
        c = (self.f - 1) // 2
        return int(np.ravel_multi_index((c,) * self.d, (self.f,) * self.d))


@dataclass
class RuleBook:
    geometry: FilterGeometry
    kind: str
    rules: List[np.ndarray]
    in_index: CoordinateHash
    out_index: CoordinateHash
    in_spatial_size: Tuple[int, ...]
    out_spatial_size: Tuple[int, ...]
    batch_size: int
    a_in: int = field(init=False)
    a_out: int = field(init=False)

    def __post_init__(self):
        self.a_in = len(self.in_index)
        self.a_out = len(self.out_index)

    @property
    def n_pairs(self):
        return int(sum(len(r) for r in self.rules))

    def output(self, features):
        """Wrap an ``a_out x n`` matrix as a tensor on the output active set."""
        return SparseTensor(self.geometry.d, self.out_spatial_size, self.batch_size,
                            index=self.out_index, features=features)

    def validate(self):
        for r in self.rules:
            if len(r) and (r[:, 0].max() >= self.a_in or r[:, 1].max() >= self.a_out):
                raise RuleBookError("rule references a row outside the feature matrices")


def sc_output_size(spatial_size, f, s):
    out = []
    for l in spatial_size:
        if l < f or (l - f) % s:
            raise RuleBookError(
                f"grid extent {l} incompatible with filter {f} and stride {s}: "
                f"(l - f) must be a non-negative multiple of s")
        out.append((l - f + s) // s)
    return tuple(out)


def build_sc(t: SparseTensor, f, s, kind="SC"):
    """Rule book for SC(., ., f, s), or for MP/AP pooling with the same geometry.

    An output site is active iff its ``f^d`` receptive field holds at least one
    active input.  Output rows are created in order of first discovery while
    scanning inputs in row order and offsets lexicographically.
    """
    if kind not in ("SC", "MP", "AP"):
        raise RuleBookError(f"build_sc cannot build a {kind} rule book")
    geom = FilterGeometry(f, s, t.dims)
    out_size = sc_output_size(t.spatial_size, f, s)
    offsets = geom.offsets
    out_index = CoordinateHash(capacity=2 * max(t.a, 1))
    coords = t.coords
    if t.a == 0:
        rules = [np.empty((0, 2), dtype=np.int64) for _ in range(geom.volume)]
        return RuleBook(geom, kind, rules, t.index, out_index, t.spatial_size, out_size,
                        t.batch_size)

    in_rows = np.arange(t.a, dtype=np.int64)
    if f == s:
        # non-overlapping windows: every input feeds exactly one output
        y = coords[:, 1:] // s
        off = np.ravel_multi_index(tuple((coords[:, 1:] % s).T), (f,) * t.dims)
        out_keys = np.ravel_multi_index((coords[:, 0],) + tuple(y.T), (t.batch_size,) + out_size)
        out_rows = out_index.insert(out_keys)
        order = np.argsort(off, kind="stable")
        pairs = np.stack([in_rows[order], out_rows[order]], axis=1)
        bounds = np.searchsorted(off[order], np.arange(geom.volume + 1))
    else:
        spatial = coords[:, None, 1:] - offsets[None, :, :]            # (a, F, d)
        y = spatial // s
        valid = np.all((spatial % s == 0) & (spatial >= 0) & (y < np.array(out_size)), axis=2)
        batch = np.broadcast_to(coords[:, None, :1], valid.shape + (1,))
        out_coords = np.concatenate([batch, y], axis=2)[valid]         # input-major order
        out_keys = np.ravel_multi_index(tuple(out_coords.T), (t.batch_size,) + out_size)
        out_rows = out_index.insert(out_keys)
        row_table = np.full(valid.shape, -1, dtype=np.int64)
        row_table[valid] = out_rows
        off_idx, in_idx = np.nonzero(valid.T)                           # offset-major
        pairs = np.stack([in_rows[in_idx], row_table[in_idx, off_idx]], axis=1)
        bounds = np.searchsorted(off_idx, np.arange(geom.volume + 1))
    rules = [pairs[bounds[i]:bounds[i + 1]] for i in range(geom.volume)]
    return RuleBook(geom, kind, rules, t.index, out_index, t.spatial_size, out_size,
                    t.batch_size)


def build_pool(t: SparseTensor, f, s, kind):
    if kind not in ("MP", "AP"):
        raise RuleBookError(f"unknown pooling kind {kind}")
    return build_sc(t, f, s, kind=kind)


def build_ssc(t: SparseTensor, f):
    """Rule book for SSC(., ., f): output active set and hash table = input's.

    Neighbours outside the grid or inactive are skipped, which equals zero
    padding of ``(f - 1) / 2`` under the zero ground state.
    """
    if f % 2 == 0:
        raise RuleBookError(f"submanifold convolution needs an odd filter size, got {f}")
    geom = FilterGeometry(f, 1, t.dims)
    c = (f - 1) // 2
    rules = []
    if t.a == 0:
        rules = [np.empty((0, 2), dtype=np.int64) for _ in range(geom.volume)]
    else:
        coords = t.coords
        in_rows = np.arange(t.a, dtype=np.int64)
        upper = np.array(t.spatial_size)
        for off in geom.offsets:
            # input x sits at offset i in the field of output y = x - i + c
            y = coords.copy()
            y[:, 1:] += c - off
            ok = np.all((y[:, 1:] >= 0) & (y[:, 1:] < upper), axis=1)
            out_rows = np.full(t.a, -1, dtype=np.int64)
            if ok.any():
                out_rows[ok] = t.index.lookup(t.pack(y[ok]))
            sel = out_rows >= 0
            rules.append(np.stack([in_rows[sel], out_rows[sel]], axis=1))
    return RuleBook(geom, "SSC", rules, t.index, t.index, t.spatial_size, t.spatial_size,
                    t.batch_size)


def invert(rb: RuleBook):
    """Deconvolution rule book: every SC connection reversed.

    The output active set (and hash table) of the result is the SC input's.
    Inverting a DC rule book gives back the SC one.
    """
    if rb.kind not in ("SC", "DC"):
        raise RuleBookError(f"only SC rule books can be inverted, got {rb.kind}")
    rules = [r[:, ::-1].copy() for r in rb.rules]
    kind = "DC" if rb.kind == "SC" else "SC"
    return RuleBook(rb.geometry, kind, rules, rb.out_index, rb.in_index,
                    rb.out_spatial_size, rb.in_spatial_size, rb.batch_size)


class RuleBookCache:
    """Memoizes rule books by (active-set generation, f, s, kind).

    Consecutive submanifold layers on one active set share a rule book.  A
    layer that changes the active set produces a new hash table with a new
    generation, so stale entries can never be returned.
    """

    def __init__(self, enabled=True):
        self.enabled = enabled
        self.builds = 0
        self.hits = 0
        self._store = {}

    def clear(self):
        self._store.clear()

    @staticmethod
    def signature(t: SparseTensor, f, s, kind):
        return (t.index.generation, f, s, kind)

    def lookup(self, signature):
        """Cached rule book for ``signature``, or None on a miss."""
        if not self.enabled:
            return None
        rb = self._store.get(signature)
        if rb is not None:
            self.hits += 1
        return rb

    def get(self, t: SparseTensor, f, s, kind):
        key = self.signature(t, f, s, kind)
        rb = self.lookup(key)
        if rb is not None:
            return rb
        if kind == "SSC":
            if s != 1:
                raise RuleBookError("submanifold convolutions have stride 1")
            rb = build_ssc(t, f)
        else:
            rb = build_sc(t, f, s, kind=kind)
        self.builds += 1
        if self.enabled:
            self._store[key] = rb
        return rb
