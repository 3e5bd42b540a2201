"""Sparse tensor: a coordinate hash table plus an ``a x m`` feature matrix."""
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .hashmap import CoordinateHash


class SparseTensorError(ValueError):
    pass


@dataclass(frozen=True)
class Coordinate:
    spatial: Tuple[int, ...]
    batch: int = 0


class SparseTensor:
    """Active sites of a ``dims``-dimensional grid for a mini-batch.

    ``index`` maps the packed ``(batch, spatial...)`` key of every active site
    to its row in ``features``.  Inactive sites are in the zero ground state
    and cost nothing.  Layers that keep the active set (submanifold
    convolutions, normalization, activations) share ``index`` between input
    and output.
    """

    def __init__(self, dims, spatial_size, batch_size=1, m=1, dtype=np.float32,
                 index=None, features=None):
        if dims not in (2, 3, 4):
            raise SparseTensorError(f"dims must be 2, 3 or 4, got {dims}")
        spatial_size = tuple(int(x) for x in spatial_size)
        if len(spatial_size) != dims or min(spatial_size) < 1:
            raise SparseTensorError(f"bad spatial size {spatial_size} for dims={dims}")
        if batch_size < 1 or m < 1:
            raise SparseTensorError("batch_size and m must be positive")
        self.dims = dims
        self.spatial_size = spatial_size
        self.batch_size = int(batch_size)
        self.index = index if index is not None else CoordinateHash()
        if features is None:
            features = np.zeros((len(self.index), m), dtype=dtype)
        if features.ndim != 2 or features.shape[0] != len(self.index):
            raise SparseTensorError(
                f"features shape {features.shape} does not match {len(self.index)} active sites")
        self.features = features
        self._coords = None
        self._coords_len = -1

    @property
    def a(self):
        return len(self.index)

    @property
    def m(self):
        return self.features.shape[1]

    @property
    def dtype(self):
        return self.features.dtype

    @property
    def grid_shape(self):
        return (self.batch_size,) + self.spatial_size

    def pack(self, coords):
        """Packed int64 keys for an ``(n, 1 + dims)`` array of (batch, spatial...)."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, self.dims + 1)
        return np.ravel_multi_index(tuple(coords.T), self.grid_shape)

    def unpack(self, keys):
        return np.stack(np.unravel_index(keys, self.grid_shape), axis=1).astype(np.int64)

    @property
    def coords(self):
        """``(a, 1 + dims)`` array of (batch, spatial...) in row order."""
        if self._coords_len != self.a:
            self._coords = self.unpack(self.index.keys_in_order)
            self._coords_len = self.a
        return self._coords

    def in_bounds(self, coords):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, self.dims + 1)
        upper = np.array(self.grid_shape)
        return np.all((coords >= 0) & (coords < upper), axis=1)

    def set_sites(self, coords, values):
        """Activate many sites at once; later duplicates overwrite earlier ones."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, self.dims + 1)
        values = np.asarray(values, dtype=self.dtype).reshape(len(coords), -1)
        if values.shape[1] != self.m:
            raise SparseTensorError(f"feature length {values.shape[1]} != m={self.m}")
        if not np.all(self.in_bounds(coords)):
            raise SparseTensorError("coordinate out of bounds")
        rows = self.index.insert(self.pack(coords))
        grow = self.a - self.features.shape[0]
        if grow:
            self.features = np.concatenate(
                [self.features, np.zeros((grow, self.m), dtype=self.dtype)])
        self.features[rows] = values
        return self

    def set_site(self, c, v):
        if not isinstance(c, Coordinate):
            c = Coordinate(tuple(c))
        if len(c.spatial) != self.dims:
            raise SparseTensorError(f"coordinate {c.spatial} has wrong dimension")
        v = np.atleast_1d(np.asarray(v, dtype=self.dtype))
        return self.set_sites([(c.batch,) + tuple(c.spatial)], v[None, :])

    def with_features(self, features):
        """Tensor on the same active set (shared index) with new features."""
        return SparseTensor(self.dims, self.spatial_size, self.batch_size,
                            index=self.index, features=features)

    def astype(self, dtype):
        return self.with_features(self.features.astype(dtype))

    def check(self):
        if len(self.index) != self.features.shape[0]:
            raise SparseTensorError("index / feature row count mismatch")
        if self.a and not np.all(self.in_bounds(self.coords)):
            raise SparseTensorError("active site out of bounds")

    def active_keys(self):
        return self.index.keys_in_order

    def densify(self):
        """Dense array ``batch x l1 x ... x ld x m`` with zeros at inactive sites."""
        out = np.zeros(self.grid_shape + (self.m,), dtype=self.dtype)
        if self.a:
            out[tuple(self.coords.T)] = self.features
        return out

    def __repr__(self):
        return (f"SparseTensor(dims={self.dims}, size={self.spatial_size}, "
                f"batch={self.batch_size}, a={self.a}, m={self.m}, dtype={self.dtype})")


def create(dims, spatial_size, batch_size=1, m=1, dtype=np.float32):
    return SparseTensor(dims, spatial_size, batch_size, m, dtype=dtype)


def set_site(t, c, v):
    return t.set_site(c, v)


def densify(t):
    return t.densify()


def sparsify(dense, threshold=0.0, dims=None):
    """Activate every site whose feature max-norm exceeds ``threshold``.

    ``dense`` has shape ``batch x l1 x ... x ld x m``.  Sites are inserted in
    row-major order.  A negative threshold activates every site.
    """
    dense = np.asarray(dense)
    if dims is None:
        dims = dense.ndim - 2
    norm = np.abs(dense).max(axis=-1)
    coords = np.argwhere(norm > threshold)
    t = SparseTensor(dims, dense.shape[1:-1], dense.shape[0], dense.shape[-1],
                     dtype=dense.dtype)
    if len(coords):
        t.set_sites(coords, dense[tuple(coords.T)])
    return t


def from_coords(coords, features, spatial_size, batch_size=1):
    """Build a tensor from an ``(n, 1 + d)`` coordinate array and ``(n, m)`` features."""
    features = np.asarray(features)
    if features.ndim == 1:
        features = features[:, None]
    spatial_size: Sequence[int] = tuple(spatial_size)
    t = SparseTensor(len(spatial_size), spatial_size, batch_size, features.shape[1],
                     dtype=features.dtype)
    if len(coords):
        t.set_sites(coords, features)
    return t
