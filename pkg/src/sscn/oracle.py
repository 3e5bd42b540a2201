"""Dense reference implementations used only to check the sparse kernels.

Grids have shape ``batch x l1 x ... x ld x channels``.  Nothing here is
optimized and nothing here touches hash tables or rule books.
"""
import itertools

import numpy as np


def _offsets(f, d):
    return list(itertools.product(range(f), repeat=d))


def _window(offset, s, out_size):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, n in zip(offset, out_size))


def active_mask(t):
    """Boolean ``batch x l1 x ... x ld`` grid marking a sparse tensor's active sites."""
    mask = np.zeros(t.grid_shape, dtype=bool)
    if t.a:
        mask[tuple(t.coords.T)] = True
    return mask


def dense_conv(g, w, f, s=1, pad=False, bias=None):
    """Direct convolution: ``out[y] = sum_i g[y*s + i - p] @ w[i]``.

    ``w`` has shape ``(f^d, m, n)`` with offsets in lexicographic order.  With
    ``pad`` the input gets ``(f - 1) / 2`` zeros on every side.
    """
    g = np.asarray(g, dtype=np.float64)
    d = g.ndim - 2
    if pad:
        p = (f - 1) // 2
        g = np.pad(g, [(0, 0)] + [(p, p)] * d + [(0, 0)])
    size = g.shape[1:-1]
    out_size = tuple((l - f) // s + 1 for l in size)
    out = np.zeros((g.shape[0],) + out_size + (w.shape[2],))
    for i, off in enumerate(_offsets(f, d)):
        patch = g[(slice(None),) + _window(off, s, out_size)]
        out += patch @ w[i].astype(np.float64)
    if bias is not None:
        out += bias
    return out


def dense_deconv(g, w, f, s, out_size):
    """Transposed convolution: ``out[y*s + i] += g[y] @ w[i]``."""
    g = np.asarray(g, dtype=np.float64)
    d = g.ndim - 2
    in_size = g.shape[1:-1]
    out = np.zeros((g.shape[0],) + tuple(out_size) + (w.shape[2],))
    for i, off in enumerate(_offsets(f, d)):
        out[(slice(None),) + _window(off, s, in_size)] += g @ w[i].astype(np.float64)
    return out


def dense_maxpool(g, f, s):
    """Max pooling that also includes the zero vector in every window."""
    g = np.asarray(g, dtype=np.float64)
    d = g.ndim - 2
    out_size = tuple((l - f) // s + 1 for l in g.shape[1:-1])
    out = np.zeros((g.shape[0],) + out_size + (g.shape[-1],))
    for off in _offsets(f, d):
        out = np.maximum(out, g[(slice(None),) + _window(off, s, out_size)])
    return out


def dense_avgpool(g, f, s):
    g = np.asarray(g, dtype=np.float64)
    d = g.ndim - 2
    out_size = tuple((l - f) // s + 1 for l in g.shape[1:-1])
    out = np.zeros((g.shape[0],) + out_size + (g.shape[-1],))
    for off in _offsets(f, d):
        out += g[(slice(None),) + _window(off, s, out_size)]
    return out / f ** d


def restrict_to(g, active):
    """Zero every site outside ``active`` (a boolean grid or a sparse tensor)."""
    if not isinstance(active, np.ndarray):
        active = active_mask(active)
    return np.where(active[..., None], g, 0.0)


def dense_relu(g):
    return np.maximum(np.asarray(g, dtype=np.float64), 0.0)


def dense_linear(g, w, b=None):
    out = np.asarray(g, dtype=np.float64) @ np.asarray(w, dtype=np.float64)
    if b is not None:
        out = out + b
    return out


def dense_ssc(g, w, f, active):
    """The submanifold oracle: padded dense convolution restricted to ``active``."""
    return restrict_to(dense_conv(g, w, f, 1, pad=True), active)
