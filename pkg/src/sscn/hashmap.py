"""Open-addressing hash map from packed integer coordinates to row numbers.

All operations are vectorized over numpy arrays of int64 keys.  Collisions are
resolved by linear probing; the slot for a key is chosen by a splitmix64
finalizer so that neighbouring voxel keys spread across the table.
"""
import itertools

import numpy as np

EMPTY = np.int64(-1)
_MAX_LOAD = 0.5

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)

_generations = itertools.count()


def mix64(keys):
    z = keys.astype(np.uint64)
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


class CoordinateHash:
    """Maps non-negative int64 keys to rows ``0..len-1`` in insertion order.

    ``keys_in_order`` is the side array that gives deterministic iteration:
    row ``r`` belongs to ``keys_in_order[r]``.  ``generation`` changes whenever
    the key set changes, so it identifies an active set for caching.
    """

    def __init__(self, capacity=16):
        cap = 16
        while cap < capacity:
            cap *= 2
        self._slots = np.full(cap, EMPTY, dtype=np.int64)
        self._rows = np.full(cap, EMPTY, dtype=np.int64)
        self._order = np.empty(0, dtype=np.int64)
        self.generation = next(_generations)

    def __len__(self):
        return len(self._order)

    @property
    def capacity(self):
        return len(self._slots)

    @property
    def keys_in_order(self):
        return self._order

    def copy(self):
        other = CoordinateHash.__new__(CoordinateHash)
        other._slots = self._slots.copy()
        other._rows = self._rows.copy()
        other._order = self._order.copy()
        other.generation = next(_generations)
        return other

    def lookup(self, keys):
        """Row for each key, or -1 where the key is absent."""
        keys = np.asarray(keys, dtype=np.int64).ravel()
        out = np.full(len(keys), EMPTY, dtype=np.int64)
        if len(keys) == 0 or len(self._order) == 0:
            return out
        mask = np.uint64(self.capacity - 1)
        slot = (mix64(keys) & mask).astype(np.int64)
        pending = np.arange(len(keys))
        while len(pending):
            occupant = self._slots[slot[pending]]
            hit = occupant == keys[pending]
            out[pending[hit]] = self._rows[slot[pending[hit]]]
            keep = ~hit & (occupant != EMPTY)
            pending = pending[keep]
            slot[pending] = (slot[pending] + 1) & (self.capacity - 1)
        return out

    def insert(self, keys):
        """Insert keys (duplicates allowed) and return the row of each.

        New keys receive consecutive rows in order of first appearance.
        """
        keys = np.asarray(keys, dtype=np.int64).ravel()
        if len(keys) == 0:
            return np.empty(0, dtype=np.int64)
        if keys.min() < 0:
            raise ValueError("keys must be non-negative")
        uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        order = np.argsort(first, kind="stable")
        uniq = uniq[order]
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))

        rows = self.lookup(uniq)
        new = rows == EMPTY
        n_new = int(new.sum())
        if n_new:
            start = len(self._order)
            rows[new] = np.arange(start, start + n_new)
            self._order = np.concatenate([self._order, uniq[new]])
            self.generation = next(_generations)
            if len(self._order) > _MAX_LOAD * self.capacity:
                self._rehash()
            else:
                self._place(uniq[new], rows[new])
        return rows[rank[inverse]]

    def _place(self, keys, rows):
        # keys are unique and absent from the table
        cap = self.capacity
        slot = (mix64(keys) & np.uint64(cap - 1)).astype(np.int64)
        pending = np.arange(len(keys))
        while len(pending):
            free = self._slots[slot[pending]] == EMPTY
            cand = pending[free]
            self._slots[slot[cand]] = keys[cand]
            won = cand[self._slots[slot[cand]] == keys[cand]]
            self._rows[slot[won]] = rows[won]
            claimed = np.zeros(len(keys), dtype=bool)
            claimed[won] = True
            pending = pending[~claimed[pending]]
            slot[pending] = (slot[pending] + 1) & (cap - 1)

    def _rehash(self):
        cap = self.capacity
        while len(self._order) > _MAX_LOAD * cap:
            cap *= 2
        self._slots = np.full(cap, EMPTY, dtype=np.int64)
        self._rows = np.full(cap, EMPTY, dtype=np.int64)
        self._place(self._order, np.arange(len(self._order), dtype=np.int64))
