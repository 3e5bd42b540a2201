"""Submanifold sparse networks: C3 stacks, U-Nets, FCNs and a shape-context MLP.

Architectures are described by a ``NetworkSpec``; ``layer_specs`` expands one
into a flat list of ``LayerSpec`` entries (used for closed-form parameter
counting) and ``build_network`` compiles it into trainable layers.
"""
from dataclasses import asdict, dataclass, fields
from typing import List

import numpy as np

from . import ops
from .layers import (AvgPool, BatchNorm, Context, Deconv, Linear, Module, NNUpsample, ReLU,
                     ResidualBlock, Sequential, SparseConv, SubmanifoldConv, concat,
                     nn_upsample_rows, pre_activated_ssc)
from .rulebook import RuleBookCache
from .tensor import SparseTensor

ARCHS = ("C3", "FCN", "UNet", "ShapeContext")
FILTER_CHOICES = (8, 16, 32, 64)
MLP_WIDTHS = (32, 64, 128, 256, 512)
LAYER_KINDS = ("SSCBlock", "ResidualBlock", "DownsampleSC", "Deconv", "NNUpsample",
               "ShapeContext", "MLP", "LinearHead")


class SpecError(ValueError):
    pass


@dataclass
class NetworkSpec:
    arch: str = "UNet"
    d: int = 3
    m_in: int = 1
    filters0: int = 8
    levels: int = 3
    layers: int = 2
    block_reps: int = 1
    residual: bool = False
    n_classes: int = 3
    mlp_width: int = 64
    dtype: str = "float32"

    def validate(self):
        if self.arch not in ARCHS:
            raise SpecError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.d not in (2, 3, 4):
            raise SpecError(f"d must be 2, 3 or 4, got {self.d}")
        if self.m_in < 1 or self.n_classes < 1:
            raise SpecError("m_in and n_classes must be positive")
        if self.arch != "ShapeContext" and self.filters0 not in FILTER_CHOICES:
            raise SpecError(f"filters0 must be one of {FILTER_CHOICES}, got {self.filters0}")
        if self.arch in ("FCN", "UNet") and self.levels < 0:
            raise SpecError("levels must be non-negative")
        if not 1 <= self.block_reps <= 3:
            raise SpecError(f"block_reps must be 1..3, got {self.block_reps}")
        if self.arch == "C3" and self.layers < 1:
            raise SpecError("a C3 network needs at least one layer")
        if self.arch == "ShapeContext":
            if self.m_in != 1 or self.d != 3:
                raise SpecError("the shape-context baseline takes 3D single-channel input")
            if self.mlp_width not in MLP_WIDTHS:
                raise SpecError(f"mlp_width must be one of {MLP_WIDTHS}")
        if self.dtype not in ("float32", "float64"):
            raise SpecError(f"dtype must be float32 or float64, got {self.dtype}")
        return self

    @property
    def widths(self):
        """Filters per resolution level: doubled after every downsampling."""
        if self.arch == "C3":
            return [self.filters0]
        return [self.filters0 * 2 ** l for l in range(self.levels + 1)]

    @property
    def downsample_factor(self):
        if self.arch in ("FCN", "UNet"):
            return 2 ** self.levels
        if self.arch == "ShapeContext":
            return 16
        return 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SpecError(f"unknown network keys: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass
class LayerSpec:
    kind: str
    n_in: int
    n_out: int
    reps: int = 1
    level: int = 0
    preactivated: bool = True


def _block_specs(spec, n_in, n_out, level):
    out = []
    if spec.residual:
        if n_in != n_out:
            out.append(LayerSpec("SSCBlock", n_in, n_out, 1, level))
        out.append(LayerSpec("ResidualBlock", n_out, n_out, spec.block_reps, level))
    else:
        out.append(LayerSpec("SSCBlock", n_in, n_out, spec.block_reps, level))
    return out


def layer_specs(spec: NetworkSpec) -> List[LayerSpec]:
    spec.validate()
    n0 = spec.filters0
    if spec.arch == "ShapeContext":
        return [LayerSpec("ShapeContext", 1, 135, preactivated=False),
                LayerSpec("MLP", 135, spec.mlp_width, 2, preactivated=False),
                LayerSpec("LinearHead", spec.mlp_width, spec.n_classes, preactivated=False)]
    out = [LayerSpec("SSCBlock", spec.m_in, n0, 1, 0, preactivated=False)]
    if spec.arch == "C3":
        if spec.layers > 1:
            if spec.residual:
                out.append(LayerSpec("ResidualBlock", n0, n0, spec.layers - 1))
            else:
                out.append(LayerSpec("SSCBlock", n0, n0, spec.layers - 1))
    else:
        w = spec.widths
        for l, n in enumerate(w):
            out += _block_specs(spec, n, n, l)
            if l < spec.levels:
                out.append(LayerSpec("DownsampleSC", n, w[l + 1], 1, l))
        if spec.arch == "UNet":
            for l in reversed(range(spec.levels)):
                out.append(LayerSpec("Deconv", w[l + 1], w[l], 1, l))
                out += _block_specs(spec, 2 * w[l], w[l], l)
        else:
            for l in range(1, spec.levels + 1):
                out.append(LayerSpec("NNUpsample", w[l], w[l], 1, l, preactivated=False))
            out.append(LayerSpec("SSCBlock", sum(w), n0, 1, 0))
    out.append(LayerSpec("LinearHead", n0, spec.n_classes))
    return out


def closed_form_parameter_count(spec: NetworkSpec):
    """Parameter count from the layer list alone, independent of any built network."""
    vol3 = 3 ** spec.d
    vol2 = 2 ** spec.d
    total = 0
    for ls in layer_specs(spec):
        bn = 2 if ls.preactivated else 0
        if ls.kind == "SSCBlock":
            for r in range(ls.reps):
                n_in = ls.n_in if r == 0 else ls.n_out
                total += vol3 * n_in * ls.n_out + bn * n_in
        elif ls.kind == "ResidualBlock":
            total += ls.reps * 2 * (vol3 * ls.n_out * ls.n_out + 2 * ls.n_out)
        elif ls.kind in ("DownsampleSC", "Deconv"):
            total += vol2 * ls.n_in * ls.n_out + 2 * ls.n_in
        elif ls.kind == "MLP":
            w = ls.n_out
            total += (ls.n_in * w + w + 2 * w) + (w * w + w + 2 * w)
        elif ls.kind == "LinearHead":
            total += ls.n_in * ls.n_out + ls.n_out + (2 * ls.n_in if ls.preactivated else 0)
    return total


def ssc_block(d, n_in, n_out, reps, residual, rng, dtype):
    layers = []
    if residual:
        if n_in != n_out:
            layers.append(pre_activated_ssc(d, n_in, n_out, rng, dtype))
        layers += [ResidualBlock(d, n_out, n_out, rng, dtype) for _ in range(reps)]
    else:
        for r in range(reps):
            layers.append(pre_activated_ssc(d, n_in if r == 0 else n_out, n_out, rng, dtype))
    return Sequential(*layers)


def _preact(n, dtype):
    return Sequential(BatchNorm(n, dtype), ReLU())


class UNetLevel(Module):
    """Encoder block, then (down, inner level, up, skip-concat, decoder block)."""

    def __init__(self, d, widths, reps, residual, rng, dtype):
        n = widths[0]
        self.n = n
        self.enc = ssc_block(d, n, n, reps, residual, rng, dtype)
        self.inner = None
        if len(widths) > 1:
            n2 = widths[1]
            self.down_pre = _preact(n, dtype)
            self.down = SparseConv(d, n, n2, 2, 2, rng=rng, dtype=dtype)
            self.inner = UNetLevel(d, widths[1:], reps, residual, rng, dtype)
            self.up_pre = _preact(n2, dtype)
            self.up = Deconv(d, n2, n, 2, 2, partner=self.down, rng=rng, dtype=dtype)
            self.dec = ssc_block(d, 2 * n, n, reps, residual, rng, dtype)

    def children(self):
        out = [("enc", self.enc)]
        if self.inner is not None:
            out += [("down_pre", self.down_pre), ("down", self.down), ("inner", self.inner),
                    ("up_pre", self.up_pre), ("up", self.up), ("dec", self.dec)]
        return out

    def forward(self, x, ctx):
        e = self.enc.forward(x, ctx)
        if self.inner is None:
            return e
        h = self.down.forward(self.down_pre.forward(e, ctx), ctx)
        h = self.inner.forward(h, ctx)
        u = self.up.forward(self.up_pre.forward(h, ctx), ctx)
        return self.dec.forward(concat([e, u]), ctx)

    def backward(self, grad):
        if self.inner is None:
            return self.enc.backward(grad)
        g = self.dec.backward(grad)
        g_e, g_u = g[:, :self.n], g[:, self.n:]
        g_h = self.up_pre.backward(self.up.backward(g_u))
        g_h = self.inner.backward(g_h)
        g_e = g_e + self.down_pre.backward(self.down.backward(g_h))
        return self.enc.backward(g_e)


class FCNBody(Module):
    """Encoder levels whose outputs are upsampled to full resolution and merged."""

    def __init__(self, d, widths, reps, residual, rng, dtype):
        self.widths = widths
        L = len(widths) - 1
        self.enc = [ssc_block(d, n, n, reps, residual, rng, dtype) for n in widths]
        self.down_pre = [_preact(widths[l], dtype) for l in range(L)]
        self.down = [SparseConv(d, widths[l], widths[l + 1], 2, 2, rng=rng, dtype=dtype)
                     for l in range(L)]
        self.ups = [NNUpsample(2 ** l) for l in range(1, L + 1)]
        self.merge = pre_activated_ssc(d, sum(widths), widths[0], rng, dtype)

    def children(self):
        out = []
        for l, m in enumerate(self.enc):
            out.append((f"enc{l}", m))
        for l, (p, m) in enumerate(zip(self.down_pre, self.down)):
            out += [(f"down_pre{l}", p), (f"down{l}", m)]
        for l, m in enumerate(self.ups, start=1):
            out.append((f"up{l}", m))
        out.append(("merge", self.merge))
        return out

    def forward(self, x, ctx):
        outs = []
        cur = x
        for l, enc in enumerate(self.enc):
            e = enc.forward(cur, ctx)
            outs.append(e)
            if l < len(self.down):
                cur = self.down[l].forward(self.down_pre[l].forward(e, ctx), ctx)
        ups = [outs[0]] + [up.forward_to(outs[l], outs[0], ctx)
                           for l, up in enumerate(self.ups, start=1)]
        return self.merge.forward(concat(ups), ctx)

    def backward(self, grad):
        g = self.merge.backward(grad)
        splits = np.split(g, np.cumsum(self.widths)[:-1], axis=1)
        level_grads = [splits[0]] + [up.backward(s) for up, s in zip(self.ups, splits[1:])]
        carry = None
        for l in reversed(range(len(self.enc))):
            g_e = level_grads[l] if carry is None else level_grads[l] + carry
            g_in = self.enc[l].backward(g_e)
            if l > 0:
                carry = self.down_pre[l - 1].backward(self.down[l - 1].backward(g_in))
            else:
                return g_in


class ShapeContextLayer(Module):
    """135 planes per site: 3^3 neighbourhood intensities at scales 1, 2, 4, 8, 16.

    Each scale average-pools the input with size = stride = scale, gathers the
    neighbourhood with an identity-weight SSC(1, 27, 3) and copies the result
    back to the original active sites by nearest-neighbour upsampling.
    """
    scales = (1, 2, 4, 8, 16)

    def __init__(self, d=3, dtype=np.float32):
        vol = 3 ** d
        self.d = d
        self.weight = np.eye(vol, dtype=dtype).reshape(vol, 1, vol)
        self.ups = {s: NNUpsample(s) for s in self.scales if s > 1}
        self.pools = {s: AvgPool(s, s) for s in self.scales if s > 1}

    def children(self):
        return ([(f"pool{s}", p) for s, p in self.pools.items()]
                + [(f"up{s}", u) for s, u in self.ups.items()])

    def forward(self, x, ctx):
        if x.m != 1:
            raise ValueError(f"shape-context features need single-channel input, got m={x.m}")
        w = self.weight.astype(x.dtype)
        self._rbs = {}
        blocks = []
        for s in self.scales:
            src = x if s == 1 else self.pools[s].forward(x, ctx)
            rb = ctx.cache.get(src, 3, 1, "SSC")
            self._rbs[s] = (rb, src.a)
            ctx.record(self, "SSC", 1, w.shape[2], rb)
            gathered = src.with_features(ops.conv_forward(rb, src.features, w))
            blocks.append(gathered if s == 1 else self.ups[s].forward_to(gathered, x, ctx))
        return concat(blocks)

    def backward(self, grad):
        w = self.weight.astype(grad.dtype)
        vol = w.shape[2]
        g_x = None
        for b, s in enumerate(self.scales):
            g = grad[:, b * vol:(b + 1) * vol]
            if s > 1:
                g = self.ups[s].backward(g)
            rb, a_src = self._rbs[s]
            g_src, _, _ = ops.conv_backward(rb, np.zeros((a_src, 1), grad.dtype), w, g)
            if s > 1:
                g_src = self.pools[s].backward(g_src)
            g_x = g_src if g_x is None else g_x + g_src
        return g_x


class Network:
    """A compiled architecture: ``body`` (sparse layers) followed by a per-site head."""

    def __init__(self, spec: NetworkSpec, body: Module, head: Module):
        self.spec = spec
        self.body = body
        self.head = head
        self.dtype = np.dtype(spec.dtype)
        self.last_ctx = None
        self._name_modules()

    def _name_modules(self):
        list(self.body.named_modules("body"))
        list(self.head.named_modules("head"))

    def parameters(self):
        return self.body.parameters() + self.head.parameters()

    def buffers(self):
        return self.body.buffers() + self.head.buffers()

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()

    def n_parameters(self):
        return sum(p.data.size for _, p in self.parameters())

    def check_input(self, x: SparseTensor):
        if x.dims != self.spec.d or x.m != self.spec.m_in:
            raise SpecError(f"network expects d={self.spec.d}, m={self.spec.m_in}; got {x!r}")
        k = self.spec.downsample_factor
        if any(l % k for l in x.spatial_size):
            raise SpecError(f"grid size {x.spatial_size} is not divisible by {k}")

    def forward(self, x: SparseTensor, train=False, cache=True, ctx=None):
        """Per-site logits on the input's active set, as a sparse tensor."""
        self.check_input(x)
        if ctx is None:
            ctx = Context(train=train, cache=RuleBookCache(enabled=cache))
        self.last_ctx = ctx
        x = x.astype(self.dtype) if x.dtype != self.dtype else x
        h = self.body.forward(x, ctx)
        return self.head.forward(h, ctx)

    def backward(self, grad_logits):
        return self.body.backward(self.head.backward(grad_logits))

    def rulebook_builds(self):
        return self.last_ctx.cache.builds if self.last_ctx else 0


def build_network(spec: NetworkSpec, rng=None, grid_size=None) -> Network:
    """Compile a spec into a trainable network.

    Weights are drawn from a zero-mean normal with variance ``2 / (f^d m)``.
    ``grid_size``, when given, is checked against the downsampling depth.
    """
    spec.validate()
    if grid_size is not None:
        k = spec.downsample_factor
        sizes = [grid_size] * spec.d if np.isscalar(grid_size) else list(grid_size)
        if any(l % k for l in sizes):
            raise SpecError(f"grid size {grid_size} is not divisible by {k}")
    rng = rng if rng is not None else np.random.default_rng(0)
    dtype = np.dtype(spec.dtype)
    d, n0 = spec.d, spec.filters0

    if spec.arch == "ShapeContext":
        w = spec.mlp_width
        body = Sequential(ShapeContextLayer(d, dtype),
                          Linear(135, w, rng=rng, dtype=dtype, kind="MLP"), BatchNorm(w, dtype), ReLU(),
                          Linear(w, w, rng=rng, dtype=dtype, kind="MLP"), BatchNorm(w, dtype), ReLU())
        head = Linear(w, spec.n_classes, rng=rng, dtype=dtype, kind="Head")
        return Network(spec, body, head)

    first = SubmanifoldConv(d, spec.m_in, n0, 3, rng=rng, dtype=dtype)
    if spec.arch == "C3":
        rest = ssc_block(d, n0, n0, spec.layers - 1, spec.residual, rng, dtype) \
            if spec.layers > 1 else Sequential()
    elif spec.arch == "UNet":
        rest = UNetLevel(d, spec.widths, spec.block_reps, spec.residual, rng, dtype)
    else:
        rest = FCNBody(d, spec.widths, spec.block_reps, spec.residual, rng, dtype)
    body = Sequential(first, rest, BatchNorm(n0, dtype), ReLU())
    head = Linear(n0, spec.n_classes, rng=rng, dtype=dtype, kind="Head")
    return Network(spec, body, head)


def nn_upsample(coarse: SparseTensor, fine: SparseTensor, factor):
    """Give every active fine site the features of its coarse parent cell (zeros if inactive)."""
    up = NNUpsample(factor)
    return up.forward_to(coarse, fine, Context())


def residual_block_forward(block: ResidualBlock, x: SparseTensor, train=False):
    return block.forward(x, Context(train=train))


def shape_context_features(x: SparseTensor):
    return ShapeContextLayer(x.dims, x.dtype).forward(x, Context())


__all__ = ["NetworkSpec", "LayerSpec", "Network", "build_network", "layer_specs",
           "closed_form_parameter_count", "nn_upsample", "nn_upsample_rows",
           "residual_block_forward", "shape_context_features", "SpecError"]
