"""Trainable layers over sparse tensors.

Each layer keeps what its backward pass needs from the most recent forward
call.  ``backward`` takes the gradient w.r.t. the layer's output features and
returns the gradient w.r.t. its input features, accumulating parameter
gradients into ``Parameter.grad``.
"""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import ops
from .rulebook import RuleBook, RuleBookCache, invert
from .tensor import SparseTensor


class Parameter:
    def __init__(self, data, decay=True):
        self.data = data
        self.grad = np.zeros_like(data)
        self.decay = decay

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0


@dataclass
class CostRecord:
    name: str
    kind: str
    m: int
    n: int
    rulebook: Optional[RuleBook] = None
    a_in: int = 0
    a_out: int = 0


@dataclass
class Context:
    """Per-forward-pass state: mode, rule-book cache and cost records."""
    train: bool = False
    cache: RuleBookCache = field(default_factory=RuleBookCache)
    records: List[CostRecord] = field(default_factory=list)

    def record(self, layer, kind, m, n, rb=None, a_in=0, a_out=0):
        if rb is not None:
            a_in, a_out = rb.a_in, rb.a_out
        self.records.append(CostRecord(layer.name, kind, m, n, rb, a_in, a_out))


class Module:
    name = ""

    def children(self):
        return []

    def named_modules(self, prefix=""):
        self.name = prefix
        yield prefix, self
        for child_name, child in self.children():
            full = f"{prefix}.{child_name}" if prefix else child_name
            yield from child.named_modules(full)

    def own_parameters(self):
        return []

    def parameters(self):
        out = []
        for name, mod in self.named_modules(self.name):
            for pname, p in mod.own_parameters():
                out.append((f"{name}.{pname}" if name else pname, p))
        return out

    def own_buffers(self):
        return []

    def buffers(self):
        out = []
        for name, mod in self.named_modules(self.name):
            for bname, b in mod.own_buffers():
                out.append((f"{name}.{bname}" if name else bname, b))
        return out

    def forward(self, x: SparseTensor, ctx: Context) -> SparseTensor:
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class _Conv(Module):
    kind = "SC"

    def __init__(self, d, m, n, f, s=1, bias=False, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.m, self.n, self.f, self.s = d, m, n, f, s
        self.weight = Parameter(he_normal(rng, (f ** d, m, n), f ** d * m, dtype))
        self.bias = Parameter(np.zeros(n, dtype)) if bias else None
        self.rb = None
        self._x = None

    def own_parameters(self):
        ps = [("weight", self.weight)]
        if self.bias is not None:
            ps.append(("bias", self.bias))
        return ps

    def _run(self, x, rb, ctx):
        self.rb, self._x = rb, x.features
        b = self.bias.data if self.bias is not None else None
        out = ops.conv_forward(rb, x.features, self.weight.data, b)
        ctx.record(self, self.kind, self.m, self.n, rb)
        return rb.output(out)

    def backward(self, grad):
        gin, gw, gb = ops.conv_backward(self.rb, self._x, self.weight.data, grad,
                                        self.bias is not None)
        self.weight.grad += gw
        if gb is not None:
            self.bias.grad += gb
        return gin


class SubmanifoldConv(_Conv):
    kind = "SSC"

    def __init__(self, d, m, n, f=3, bias=False, rng=None, dtype=np.float32):
        super().__init__(d, m, n, f, 1, bias, rng, dtype)

    def forward(self, x, ctx):
        return self._run(x, ctx.cache.get(x, self.f, 1, "SSC"), ctx)


class SparseConv(_Conv):
    kind = "SC"

    def forward(self, x, ctx):
        return self._run(x, ctx.cache.get(x, self.f, self.s, "SC"), ctx)


class Deconv(_Conv):
    """Inverse of a paired ``SparseConv``; restores that layer's input active set."""
    kind = "DC"

    def __init__(self, d, m, n, f, s, partner: SparseConv, bias=False, rng=None,
                 dtype=np.float32):
        super().__init__(d, m, n, f, s, bias, rng, dtype)
        self.partner = partner

    def forward(self, x, ctx):
        if self.partner.rb is None:
            raise RuntimeError("deconvolution run before its paired convolution")
        return self._run(x, invert(self.partner.rb), ctx)


class MaxPool(Module):
    def __init__(self, f, s):
        self.f, self.s = f, s

    def forward(self, x, ctx):
        self.rb = ctx.cache.get(x, self.f, self.s, "MP")
        out, self._arg = ops.maxpool_forward(self.rb, x.features)
        ctx.record(self, "MP", x.m, x.m, self.rb)
        return self.rb.output(out)

    def backward(self, grad):
        return ops.maxpool_backward(self._arg, grad, self.rb.a_in)


class AvgPool(Module):
    def __init__(self, f, s):
        self.f, self.s = f, s

    def forward(self, x, ctx):
        self.rb = ctx.cache.get(x, self.f, self.s, "AP")
        ctx.record(self, "AP", x.m, x.m, self.rb)
        return self.rb.output(ops.avgpool_forward(self.rb, x.features))

    def backward(self, grad):
        return ops.avgpool_backward(self.rb, grad)


class BatchNorm(Module):
    def __init__(self, n, dtype=np.float32, momentum=0.9, epsilon=1e-5):
        self.n = n
        self.state = ops.BatchNormState.fresh(n, dtype, momentum, epsilon)
        self.gamma = Parameter(self.state.gamma, decay=False)
        self.beta = Parameter(self.state.beta, decay=False)
        self._cache = None

    def own_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def own_buffers(self):
        return [("running_mean", self.state.running_mean),
                ("running_var", self.state.running_var)]

    def forward(self, x, ctx):
        # Parameter.data may have been replaced (e.g. by a checkpoint load)
        self.state.gamma, self.state.beta = self.gamma.data, self.beta.data
        out, self._cache = ops.batchnorm_forward(self.state, x.features, ctx.train)
        ctx.record(self, "BN", x.m, x.m, a_in=x.a, a_out=x.a)
        return x.with_features(out)

    def backward(self, grad):
        gin, gg, gb = ops.batchnorm_backward(self.state, self._cache, grad)
        self.gamma.grad += gg
        self.beta.grad += gb
        return gin


class ReLU(Module):
    def forward(self, x, ctx):
        self._x = x.features
        ctx.record(self, "ReLU", x.m, x.m, a_in=x.a, a_out=x.a)
        return x.with_features(ops.relu(x.features))

    def backward(self, grad):
        return ops.relu_backward(self._x, grad)


class Linear(Module):
    """Per-site affine map (no spatial extent)."""

    def __init__(self, m, n, bias=True, rng=None, dtype=np.float32, kind="Linear"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.m, self.n, self.kind = m, n, kind
        self.weight = Parameter((rng.standard_normal((m, n)) / np.sqrt(m)).astype(dtype))
        self.bias = Parameter(np.zeros(n, dtype)) if bias else None

    def own_parameters(self):
        ps = [("weight", self.weight)]
        if self.bias is not None:
            ps.append(("bias", self.bias))
        return ps

    def forward(self, x, ctx):
        self._x = x.features
        b = self.bias.data if self.bias is not None else None
        ctx.record(self, self.kind, self.m, self.n, a_in=x.a, a_out=x.a)
        return x.with_features(ops.linear_head(x.features, self.weight.data, b))

    def backward(self, grad):
        gin, gw, gb = ops.linear_backward(self._x, self.weight.data, grad)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gin


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def children(self):
        return [(str(i), layer) for i, layer in enumerate(self.layers)]

    def forward(self, x, ctx):
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class Identity(Module):
    def forward(self, x, ctx):
        return x

    def backward(self, grad):
        return grad


def pre_activated_ssc(d, m, n, rng, dtype, f=3):
    """BN -> ReLU -> SSC(m, n, f)."""
    return Sequential(BatchNorm(m, dtype), ReLU(), SubmanifoldConv(d, m, n, f, rng=rng, dtype=dtype))


class ResidualBlock(Module):
    """``y = x + SSC(ReLU(BN(SSC(ReLU(BN(x))))))`` with an identity shortcut."""

    def __init__(self, d, n_in, n_out, rng=None, dtype=np.float32):
        if n_in != n_out:
            raise ValueError(f"residual block needs n_in == n_out, got {n_in} != {n_out}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.branch = Sequential(pre_activated_ssc(d, n_in, n_out, rng, dtype),
                                 pre_activated_ssc(d, n_out, n_out, rng, dtype))

    def children(self):
        return [("branch", self.branch)]

    def forward(self, x, ctx):
        y = self.branch.forward(x, ctx)
        if y.index is not x.index:
            raise RuntimeError("residual branch changed the active set")
        return x.with_features(x.features + y.features)

    def backward(self, grad):
        return grad + self.branch.backward(grad)


def concat(tensors):
    """Channel-wise concatenation of tensors on one shared active set."""
    first = tensors[0]
    for t in tensors[1:]:
        if t.index is not first.index:
            raise ValueError("concatenated tensors must share an active set")
    return first.with_features(np.concatenate([t.features for t in tensors], axis=1))


def nn_upsample_rows(coarse: SparseTensor, fine: SparseTensor, factor):
    """Row of the coarse parent of every fine site, or -1 if the parent is inactive."""
    if factor < 1 or any(fs != cs * factor for fs, cs in zip(fine.spatial_size, coarse.spatial_size)):
        raise ValueError(f"factor {factor} does not map {fine.spatial_size} onto {coarse.spatial_size}")
    if fine.a == 0:
        return np.empty(0, dtype=np.int64)
    parent = fine.coords.copy()
    parent[:, 1:] //= factor
    return coarse.index.lookup(coarse.pack(parent))


class NNUpsample(Module):
    """Copies each coarse feature vector to the active fine sites it contains."""

    def __init__(self, factor):
        self.factor = factor

    def forward_to(self, coarse, fine, ctx):
        self._rows = nn_upsample_rows(coarse, fine, self.factor)
        self._a_coarse = coarse.a
        out = np.zeros((fine.a, coarse.m), dtype=coarse.dtype)
        hit = self._rows >= 0
        out[hit] = coarse.features[self._rows[hit]]
        ctx.record(self, "NN", coarse.m, coarse.m, a_in=coarse.a, a_out=fine.a)
        return fine.with_features(out)

    def backward(self, grad):
        g = np.zeros((self._a_coarse, grad.shape[1]), dtype=grad.dtype)
        hit = self._rows >= 0
        np.add.at(g, self._rows[hit], grad[hit])
        return g
