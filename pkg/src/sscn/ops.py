"""Forward and backward kernels over feature matrices and rule books.

Every kernel is a pure function of numpy arrays.  Within one offset's rule
list the input rows are distinct and so are the output rows, so the
scatter-add ``out[k] += ...`` never writes one row twice per offset.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .rulebook import RuleBook

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


@dataclass
class ConvWeights:
    """``per_offset`` has shape ``(f^d, m, n)``; ``bias`` is length ``n`` or None."""
    per_offset: np.ndarray
    bias: Optional[np.ndarray] = None

    @property
    def m(self):
        return self.per_offset.shape[1]

    @property
    def n(self):
        return self.per_offset.shape[2]


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def fresh(cls, n, dtype=np.float32, momentum=0.9, epsilon=1e-5):
        return cls(np.ones(n, dtype), np.zeros(n, dtype), np.zeros(n, dtype),
                   np.ones(n, dtype), momentum, epsilon)


def _check_conv(rb: RuleBook, x, w):
    if w.ndim != 3 or w.shape[0] != rb.geometry.volume:
        raise ShapeError(f"weights {w.shape} do not match {rb.geometry.volume} filter offsets")
    if x.ndim != 2 or x.shape[0] != rb.a_in or x.shape[1] != w.shape[1]:
        raise ShapeError(f"input {x.shape} does not match a_in={rb.a_in}, m={w.shape[1]}")


def conv_forward(rb: RuleBook, x, w, bias=None):
    """Gather / GEMM / scatter-add over every offset of the rule book.

    Works unchanged for SC, SSC and DC (inverted) rule books.
    """
    _check_conv(rb, x, w)
    out = np.zeros((rb.a_out, w.shape[2]), dtype=np.result_type(x, w))
    for i, pairs in enumerate(rb.rules):
        if len(pairs):
            out[pairs[:, 1]] += x[pairs[:, 0]] @ w[i]
    if bias is not None:
        out += bias
    return out


def conv_backward(rb: RuleBook, x, w, grad_out, with_bias=False):
    """Returns ``(grad_in, grad_w, grad_bias)``; ``grad_bias`` is None without bias."""
    _check_conv(rb, x, w)
    if grad_out.shape != (rb.a_out, w.shape[2]):
        raise ShapeError(f"grad_out {grad_out.shape} != ({rb.a_out}, {w.shape[2]})")
    grad_in = np.zeros_like(x, dtype=np.result_type(x, w, grad_out))
    grad_w = np.zeros_like(w, dtype=grad_in.dtype)
    for i, pairs in enumerate(rb.rules):
        if len(pairs):
            j, k = pairs[:, 0], pairs[:, 1]
            g = grad_out[k]
            grad_in[j] += g @ w[i].T
            grad_w[i] = x[j].T @ g
    grad_bias = grad_out.sum(axis=0) if with_bias else None
    return grad_in, grad_w, grad_bias


def deconv_forward(inverted_rb: RuleBook, x, w, bias=None):
    if inverted_rb.kind != "DC":
        raise ShapeError(f"deconvolution needs an inverted rule book, got {inverted_rb.kind}")
    return conv_forward(inverted_rb, x, w, bias)


def deconv_backward(inverted_rb: RuleBook, x, w, grad_out, with_bias=False):
    return conv_backward(inverted_rb, x, w, grad_out, with_bias)


def maxpool_forward(rb: RuleBook, x):
    """Max of the zero vector and the gathered inputs, per output and channel.

    The argmax record holds the winning input row, or -1 where the zero clamp
    won.  Ties go to the lowest input row.
    """
    out = np.zeros((rb.a_out, x.shape[1]), dtype=x.dtype)
    arg = np.full(out.shape, -1, dtype=np.int64)
    for pairs in rb.rules:
        if not len(pairs):
            continue
        j, k = pairs[:, 0], pairs[:, 1]
        cand = x[j]
        cur = out[k]
        cur_arg = arg[k]
        jj = np.broadcast_to(j[:, None], cand.shape)
        better = (cand > cur) | ((cand == cur) & (cur_arg >= 0) & (jj < cur_arg))
        out[k] = np.where(better, cand, cur)
        arg[k] = np.where(better, jj, cur_arg)
    return out, arg


def maxpool_backward(argmax, grad_out, a_in):
    grad_in = np.zeros((a_in, grad_out.shape[1]), dtype=grad_out.dtype)
    k, c = np.nonzero(argmax >= 0)
    np.add.at(grad_in, (argmax[k, c], c), grad_out[k, c])
    return grad_in


def avgpool_forward(rb: RuleBook, x):
    """``f^-d`` times the sum of active inputs; the divisor ignores how many are active."""
    scale = x.dtype.type(1.0 / rb.geometry.volume)
    out = np.zeros((rb.a_out, x.shape[1]), dtype=x.dtype)
    for pairs in rb.rules:
        if len(pairs):
            out[pairs[:, 1]] += x[pairs[:, 0]]
    return out * scale


def avgpool_backward(rb: RuleBook, grad_out):
    scale = grad_out.dtype.type(1.0 / rb.geometry.volume)
    grad_in = np.zeros((rb.a_in, grad_out.shape[1]), dtype=grad_out.dtype)
    for pairs in rb.rules:
        if len(pairs):
            grad_in[pairs[:, 0]] += grad_out[pairs[:, 1]]
    return grad_in * scale


def batchnorm_forward(bn: BatchNormState, x, train=True):
    """Normalize each column over the active rows of the whole mini-batch.

    Returns ``(out, cache)``; ``cache`` is None when the layer was skipped
    (train mode with no active sites) or run in eval mode.
    """
    if train:
        if x.shape[0] == 0:
            log.warning("batch norm skipped: no active sites in train mode")
            return x.copy(), None
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + bn.epsilon)
        xhat = (x - mean) * inv_std
        out = xhat * bn.gamma + bn.beta
        n = x.shape[0]
        unbiased = var * (n / (n - 1)) if n > 1 else var
        bn.running_mean[...] = bn.momentum * bn.running_mean + (1 - bn.momentum) * mean
        bn.running_var[...] = bn.momentum * bn.running_var + (1 - bn.momentum) * unbiased
        return out.astype(x.dtype, copy=False), (xhat, inv_std)
    inv_std = 1.0 / np.sqrt(bn.running_var + bn.epsilon)
    out = (x - bn.running_mean) * (inv_std * bn.gamma) + bn.beta
    return out.astype(x.dtype, copy=False), None


def batchnorm_backward(bn: BatchNormState, cache, grad_out):
    """Returns ``(grad_in, grad_gamma, grad_beta)`` for a train-mode forward."""
    if cache is None:
        return grad_out.copy(), np.zeros_like(bn.gamma), np.zeros_like(bn.beta)
    xhat, inv_std = cache
    n = grad_out.shape[0]
    grad_beta = grad_out.sum(axis=0)
    grad_gamma = (grad_out * xhat).sum(axis=0)
    grad_in = (bn.gamma * inv_std / n) * (n * grad_out - grad_beta - xhat * grad_gamma)
    return grad_in.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def linear_head(x, w, b=None):
    if x.shape[1] != w.shape[0] or (b is not None and b.shape != (w.shape[1],)):
        raise ShapeError(f"linear head shapes x={x.shape} W={w.shape}")
    out = x @ w
    if b is not None:
        out = out + b
    return out


def linear_backward(x, w, grad_out):
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


def class_mask(mask, a, c):
    """Normalize a mask spec to an ``(a, c)`` boolean array (or None).

    Accepts None, a collection of allowed class ids, a length-``c`` boolean
    vector or a per-row ``(a, c)`` boolean matrix.
    """
    if mask is None:
        return None
    if isinstance(mask, np.ndarray) and mask.dtype == bool:
        arr = mask
        if arr.shape == (c,):
            return np.broadcast_to(arr, (a, c))
        if arr.shape == (a, c):
            return arr
        raise ShapeError(f"mask shape {arr.shape} does not fit ({a}, {c})")
    allowed = np.zeros(c, dtype=bool)
    ids = np.asarray(sorted(mask), dtype=np.int64)
    if len(ids) and (ids.min() < 0 or ids.max() >= c):
        raise ValueError("mask holds a class id out of range")
    allowed[ids] = True
    return np.broadcast_to(allowed, (a, c))


def log_softmax(logits, mask=None):
    z = logits.astype(np.float64) if logits.dtype != np.float64 else logits
    m = class_mask(mask, *logits.shape)
    if m is not None:
        z = np.where(m, z, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    with np.errstate(divide="ignore"):
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def softmax(logits, mask=None):
    """Class probabilities; masked-out classes get exactly zero."""
    return np.exp(log_softmax(logits, mask)).astype(logits.dtype, copy=False)


def masked_softmax_nll(logits, labels, mask=None):
    """Mean negative log-likelihood over rows and its gradient w.r.t. logits."""
    labels = np.asarray(labels, dtype=np.int64)
    a, c = logits.shape
    if labels.shape != (a,):
        raise ShapeError(f"{len(labels)} labels for {a} rows")
    if a == 0:
        return 0.0, np.zeros_like(logits)
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    m = class_mask(mask, a, c)
    if m is not None and not np.all(m[np.arange(a), labels]):
        raise ValueError("a label lies outside its class mask")
    logp = log_softmax(logits, m)
    loss = -logp[np.arange(a), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(a), labels] -= 1.0
    grad /= a
    return float(loss), grad.astype(logits.dtype, copy=False)
