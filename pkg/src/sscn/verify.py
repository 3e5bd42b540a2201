"""Property suite behind ``sscn verify``.

Each check returns a ``Result``; the suite never raises on a failed property,
it reports it.  ``corrupt=True`` perturbs one weight inside the golden test
to show that the suite notices.
"""
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, config, ops, oracle
from .accounting import dense_flops, tally
from .data import voxelize
from .layers import (BatchNorm, Context, Linear, NNUpsample, ReLU, ResidualBlock, Sequential,
                     SubmanifoldConv)
from .network import NetworkSpec, ShapeContextLayer, build_network
from .rulebook import build_sc, build_ssc, invert
from .synthetic import curve_dataset, sphere_surface_cloud
from .tensor import SparseTensor, from_coords
from .train import TrainConfig, train

OPS = ("SSC", "SC", "MP", "AP", "DC")


@dataclass
class Result:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0

    def line(self):
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name:<22} {self.detail}  ({self.seconds:.1f}s)"


# ---- random inputs --------------------------------------------------------

def grid_length(rng, f, s, hi=8):
    """A side length in ``[f, hi]`` that an ``f``/``s`` convolution tiles exactly."""
    choices = [n for n in range(max(f, 2), hi + 1) if (n - f) % s == 0]
    return int(rng.choice(choices))


def random_tensor(rng, d, size, m, density, dtype=np.float64, batch=1, scale=1.0):
    """Random active set of roughly ``density`` of the grid, at least one site."""
    grid = (batch,) + tuple(size)
    mask = rng.random(grid) < density
    if not mask.any():
        mask[tuple(rng.integers(0, n) for n in grid)] = True
    coords = np.argwhere(mask)
    coords = coords[rng.permutation(len(coords))]
    feats = (rng.standard_normal((len(coords), m)) * scale).astype(dtype)
    return from_coords(coords, feats, size, batch)


def random_weights(rng, f, d, m, n, dtype=np.float64):
    return (rng.standard_normal((f ** d, m, n)) / np.sqrt(f ** d * m)).astype(dtype)


# ---- oracle equivalence ---------------------------------------------------

def oracle_case(rng, op, d, dtype):
    """``(sparse_dense, oracle_dense)`` for one random instance of ``op``."""
    f = 3 if op == "SSC" else int(rng.choice([2, 3]))
    s = 1 if op == "SSC" else int(rng.choice([1, 2]))
    size = tuple(grid_length(rng, f, s) for _ in range(d))
    m, n = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    batch = int(rng.integers(1, 3))
    x = random_tensor(rng, d, size, m, rng.uniform(0.05, 0.5), dtype, batch)
    g = x.densify()
    w = random_weights(rng, f, d, m, n, dtype)
    if op == "SSC":
        rb = build_ssc(x, f)
        return rb.output(ops.conv_forward(rb, x.features, w)).densify(), oracle.dense_ssc(g, w, f, x)
    rb = build_sc(x, f, s, kind="SC" if op in ("SC", "DC") else op)
    if op == "SC":
        return rb.output(ops.conv_forward(rb, x.features, w)).densify(), oracle.dense_conv(g, w, f, s)
    if op == "MP":
        out, _ = ops.maxpool_forward(rb, x.features)
        return rb.output(out).densify(), oracle.dense_maxpool(g, f, s)
    if op == "AP":
        return rb.output(ops.avgpool_forward(rb, x.features)).densify(), oracle.dense_avgpool(g, f, s)
    coarse = rb.output(rng.standard_normal((rb.a_out, n)).astype(dtype))
    w = random_weights(rng, f, d, n, m, dtype)
    inv = invert(rb)
    out = inv.output(ops.deconv_forward(inv, coarse.features, w)).densify()
    ref = oracle.restrict_to(oracle.dense_deconv(coarse.densify(), w, f, s, size), x)
    return out, ref


def check_oracle(n_cases=500, seed=0):
    rng = np.random.default_rng(seed)
    worst = {np.float32: 0.0, np.float64: 0.0}
    for i in range(n_cases):
        dtype = (np.float32, np.float64)[i % 2]
        got, ref = oracle_case(rng, OPS[(i // 2) % len(OPS)], int(rng.choice([2, 3])), dtype)
        worst[dtype] = max(worst[dtype], float(np.abs(got - ref).max(initial=0.0)))
    ok = worst[np.float32] <= 1e-5 and worst[np.float64] <= 1e-12
    return ok, f"{n_cases} cases; max diff f32 {worst[np.float32]:.2e}, f64 {worst[np.float64]:.2e}"


# ---- submanifold dilation -------------------------------------------------

def dilation_counts(d, n, kind):
    size = (2 * n + 5,) * d
    t = SparseTensor(d, size, m=1, dtype=np.float64)
    t.set_sites([[0] + [n + 2] * d], [[1.0]])
    for _ in range(n):
        if kind == "SSC":
            rb = build_ssc(t, 3)
        else:
            # padded SC(3, 1): shift into a grid two larger so outputs can grow outward
            big = SparseTensor(d, tuple(l + 2 for l in t.spatial_size), m=1, dtype=np.float64)
            big.set_sites(t.coords + np.r_[0, [1] * d], t.features)
            rb = build_sc(big, 3, 1)
        t = rb.output(np.ones((rb.a_out, 1)))
    return t.a


def check_dilation():
    bad = []
    for d in (2, 3):
        for n in (1, 2, 3):
            sc, ssc = dilation_counts(d, n, "SC"), dilation_counts(d, n, "SSC")
            if sc != (2 * n + 1) ** d or ssc != 1:
                bad.append(f"d={d} n={n}: SC {sc}, SSC {ssc}")
    return not bad, "; ".join(bad) or "SC gives (2n+1)^d, SSC keeps 1 site"


# ---- gradients ------------------------------------------------------------

def fd_relative_error(loss, arrays, analytic, rng, eps=1e-6, max_entries=24):
    """Norm-wise relative error between central differences and ``analytic``.

    ``loss()`` recomputes the scalar from the current contents of ``arrays``
    (which are perturbed in place and restored).
    """
    fd_all, an_all = [], []
    for arr, g in zip(arrays, analytic):
        flat = arr.reshape(-1)
        picks = np.arange(flat.size) if flat.size <= max_entries else \
            rng.choice(flat.size, max_entries, replace=False)
        for k in picks:
            old = flat[k]
            flat[k] = old + eps
            up = loss()
            flat[k] = old - eps
            down = loss()
            flat[k] = old
            fd_all.append((up - down) / (2 * eps))
            an_all.append(g.reshape(-1)[k])
    fd_all, an_all = np.array(fd_all), np.array(an_all)
    denom = max(np.linalg.norm(fd_all) + np.linalg.norm(an_all), 1e-8)
    return float(np.linalg.norm(fd_all - an_all) / denom)


def _layer_instance(layer, x, rng, params=None):
    """Check input and parameter gradients of a ``Module`` on input ``x``."""
    params = params if params is not None else [p for _, p in layer.parameters()]
    R = [None]

    def run():
        return layer.forward(x, Context(train=True))

    out = run()
    R[0] = rng.standard_normal(out.features.shape)
    for p in params:
        p.zero_grad()
    gin = layer.backward(R[0])
    loss = lambda: float((run().features * R[0]).sum())
    return fd_relative_error(loss, [x.features] + [p.data for p in params],
                             [gin] + [p.grad for p in params], rng)


def gradient_instance(op, rng):
    d = int(rng.choice([2, 3]))
    m, n = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    if op in ("SSC", "SC", "DC", "MP", "AP"):
        f = 3 if op == "SSC" else int(rng.choice([2, 3]))
        s = 1 if op == "SSC" else int(rng.choice([1, 2]))
        size = tuple(grid_length(rng, f, s, hi=6) for _ in range(d))
        x = random_tensor(rng, d, size, m, rng.uniform(0.1, 0.5))
        rb = build_ssc(x, f) if op == "SSC" else build_sc(x, f, s, "SC" if op == "DC" else op)
        if op == "DC":
            rb = invert(rb)
            feats = rng.standard_normal((rb.a_in, m))
        else:
            feats = x.features
        w = random_weights(rng, f, d, m, n)
        b = rng.standard_normal(n)
        if op in ("SSC", "SC", "DC"):
            R = rng.standard_normal((rb.a_out, n))
            fwd = ops.deconv_forward if op == "DC" else ops.conv_forward
            bwd = ops.deconv_backward if op == "DC" else ops.conv_backward
            gin, gw, gb = bwd(rb, feats, w, R, True)
            loss = lambda: float((fwd(rb, feats, w, b) * R).sum())
            return fd_relative_error(loss, [feats, w, b], [gin, gw, gb], rng)
        R = rng.standard_normal((rb.a_out, m))
        if op == "MP":
            _, arg = ops.maxpool_forward(rb, feats)
            gin = ops.maxpool_backward(arg, R, rb.a_in)
            loss = lambda: float((ops.maxpool_forward(rb, feats)[0] * R).sum())
        else:
            gin = ops.avgpool_backward(rb, R)
            loss = lambda: float((ops.avgpool_forward(rb, feats) * R).sum())
        return fd_relative_error(loss, [feats], [gin], rng)
    x = random_tensor(rng, d, (5,) * d, m, rng.uniform(0.2, 0.6))
    if op == "BN":
        bn = BatchNorm(m, np.float64)
        bn.gamma.data[...] = rng.uniform(0.5, 1.5, m)
        bn.beta.data[...] = rng.standard_normal(m)
        return _layer_instance(bn, x, rng)
    if op == "ReLU":
        return _layer_instance(ReLU(), x, rng)
    if op == "Linear":
        lin = Linear(m, n, rng=rng, dtype=np.float64)
        lin.bias.data[...] = rng.standard_normal(n)
        return _layer_instance(lin, x, rng)
    if op == "Residual":
        block = ResidualBlock(d, m, m, rng=rng, dtype=np.float64)
        for _, p in block.parameters():
            if p.data.ndim == 1:
                p.data[...] = rng.uniform(0.5, 1.5, p.data.shape)
        return _layer_instance(block, x, rng)
    if op == "ShapeContext":
        x3 = random_tensor(rng, 3, (16, 16, 16), 1, rng.uniform(0.01, 0.05))
        return _layer_instance(ShapeContextLayer(3, np.float64), x3, rng, params=[])
    if op == "NNUpsample":
        fine = random_tensor(rng, d, (4,) * d, m, rng.uniform(0.2, 0.6))
        coarse = random_tensor(rng, d, (2,) * d, m, 0.7)
        up = NNUpsample(2)
        out = up.forward_to(coarse, fine, Context())
        R = rng.standard_normal(out.features.shape)
        gin = up.backward(R)
        loss = lambda: float((up.forward_to(coarse, fine, Context()).features * R).sum())
        return fd_relative_error(loss, [coarse.features], [gin], rng)
    if op == "SoftmaxNLL":
        c = int(rng.integers(2, 6))
        logits = rng.standard_normal((int(rng.integers(1, 12)), c)) * 2
        labels = rng.integers(0, c, len(logits))
        _, g = ops.masked_softmax_nll(logits, labels)
        loss = lambda: ops.masked_softmax_nll(logits, labels)[0]
        return fd_relative_error(loss, [logits], [g], rng)
    raise ValueError(op)


GRADIENT_OPS = ("SSC", "SC", "DC", "MP", "AP", "BN", "ReLU", "Linear", "Residual",
                "NNUpsample", "ShapeContext", "SoftmaxNLL")


def check_gradients(instances=20, seed=1, tol=1e-6):
    rng = np.random.default_rng(seed)
    worst = {}
    for op in GRADIENT_OPS:
        worst[op] = max(gradient_instance(op, rng) for _ in range(instances))
    bad = {k: v for k, v in worst.items() if not v < tol}
    detail = f"{instances} instances x {len(GRADIENT_OPS)} ops; worst {max(worst.values()):.1e}"
    if bad:
        detail += "; failing " + ", ".join(f"{k} {v:.1e}" for k, v in bad.items())
    return not bad, detail


# ---- cost model -----------------------------------------------------------

def neighbour_counts(x, f=3):
    """Active sites inside each active site's ``f^d`` neighbourhood, by brute force."""
    mask = oracle.active_mask(x)
    p = (f - 1) // 2
    padded = np.pad(mask, [(0, 0)] + [(p, p)] * x.dims)
    counts = []
    for c in x.coords:
        window = padded[(c[0],) + tuple(slice(ci, ci + f) for ci in c[1:])]
        counts.append(int(window.sum()))
    return np.array(counts)


def check_cost_model(cases=40, seed=2):
    rng = np.random.default_rng(seed)
    for _ in range(cases):
        d = int(rng.choice([2, 3]))
        m, n = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        x = random_tensor(rng, d, (int(rng.integers(3, 9)),) * d, 1, rng.uniform(0.05, 0.6))
        flops, mem = tally(build_ssc(x, 3), m, n)
        if flops != m * n * int(neighbour_counts(x).sum()) or mem != n * x.a:
            return False, f"SSC tally {flops} != m*n*sum(a) on d={d}"
    for d in (2, 3):
        L = 6
        full = random_tensor(rng, d, (L,) * d, 1, 1.1)
        rb = build_ssc(full, 3)
        counts = np.zeros((1,) + (L,) * d, dtype=np.int64)
        counts[tuple(full.coords.T)] = neighbour_counts(full)
        interior = counts[(0,) + (slice(1, -1),) * d]
        if not np.all(interior == 3 ** d):
            return False, "interior sites of a dense input do not see 3^d neighbours"
        m, n = 4, 5
        flops = tally(rb, m, n)[0]
        if flops != m * n * int(counts.sum()) or flops > dense_flops(rb, m, n):
            return False, "dense-input tally disagrees with 3^d*m*n per interior site"
    return True, f"{cases} random inputs match m*n*sum(a); dense interior = 3^d*m*n"


# ---- rule-book reuse ------------------------------------------------------

def check_rulebook_reuse(seed=3):
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(arch="C3", layers=6, filters0=8, n_classes=4, dtype="float64")
    net = build_network(spec, rng)
    x = random_tensor(rng, 3, (16,) * 3, 1, 0.05)
    a = net.forward(x, cache=True).features
    builds = net.rulebook_builds()
    b = net.forward(x, cache=False).features
    uncached = net.rulebook_builds()
    ok = builds == 1 and uncached == 6 and np.array_equal(a, b)
    return ok, f"6-layer C3: {builds} build cached, {uncached} uncached, bitwise equal {np.array_equal(a, b)}"


# ---- sparsity -------------------------------------------------------------

def check_sparsity(samples=10, seed=4, S=48):
    rng = np.random.default_rng(seed)
    fractions = []
    for i in range(samples):
        pc = sphere_surface_cloud(int(rng.integers(2000, 3001)), rng, radius=S / 2 - 1e-9)
        vs = voxelize(pc, S, 4 * S, rng)
        fractions.append(vs.tensor.a / S ** 3)
    lo, hi = min(fractions), max(fractions)
    return 0.003 <= lo and hi <= 0.03, f"active fraction of S^3 in [{lo:.4f}, {hi:.4f}]"


# ---- golden network -------------------------------------------------------

def _leaves(module):
    return [m for _, m in module.named_modules(module.name) if not m.children()]


def dense_forward(net, x):
    """Evaluate a C3 network layer by layer with the dense oracle."""
    g = x.densify().astype(np.float64)
    active = oracle.active_mask(x)
    for layer in _leaves(net.body) + [net.head]:
        if isinstance(layer, SubmanifoldConv):
            g = oracle.dense_ssc(g, layer.weight.data, layer.f, active)
        elif isinstance(layer, BatchNorm):
            st = layer.state
            g = (g - st.running_mean) / np.sqrt(st.running_var + st.epsilon) * layer.gamma.data + layer.beta.data
            g = oracle.restrict_to(g, active)
        elif isinstance(layer, ReLU):
            g = oracle.dense_relu(g)
        elif isinstance(layer, Linear):
            g = oracle.restrict_to(oracle.dense_linear(g, layer.weight.data, layer.bias.data), active)
        elif isinstance(layer, Sequential):
            continue
        else:
            raise TypeError(f"no dense oracle for {type(layer).__name__}")
    return g


def golden_network(seed=5):
    rng = np.random.default_rng(seed)
    net = build_network(NetworkSpec(arch="C3", layers=3, filters0=8, n_classes=3, dtype="float64"), rng)
    for name, b in net.buffers():
        b[...] = rng.uniform(0.5, 1.5, b.shape) if "var" in name else rng.standard_normal(b.shape) * 0.1
    for name, p in net.parameters():
        if p.data.ndim == 1:
            p.data[...] = rng.uniform(0.5, 1.5, p.data.shape)
    x = random_tensor(rng, 3, (8, 8, 8), 1, 0.2, batch=2)
    return net, x


def check_golden(corrupt=False):
    net, x = golden_network()
    ref = dense_forward(net, x)
    if corrupt:
        w = net.parameters()[0][1].data
        w.reshape(-1)[0] += 0.5
    got = net.forward(x).densify()
    err = float(np.abs(got - ref).max())
    return err <= 1e-12, f"C3 net vs layer-by-layer dense oracle, max diff {err:.2e}"


# ---- checkpoints, config, determinism ---------------------------------------

def check_checkpoint(seed=6):
    rng = np.random.default_rng(seed)
    ok = True
    with tempfile.TemporaryDirectory() as tmp:
        for dtype in ("float32", "float64"):
            for arch in ("C3", "UNet"):
                net = build_network(NetworkSpec(arch=arch, filters0=8, levels=2, dtype=dtype), rng)
                for _, b in net.buffers():
                    b[...] = rng.uniform(0.5, 1.5, b.shape)
                x = random_tensor(rng, 3, (16,) * 3, 1, 0.05, np.dtype(dtype).type)
                path = Path(tmp) / f"{arch}_{dtype}.ckpt"
                checkpoint.save(path, net)
                again, _, _ = checkpoint.load(path)
                ok &= np.array_equal(net.forward(x).features, again.forward(x).features)
    return ok, "save/load reproduces the forward pass bitwise (f4 and f8)"


def check_config():
    cfg = config.RunConfig()
    cfg.set("network.arch", "FCN").set("lr", "0.05").set("eval.mask", "no")
    back = config.parse(cfg.to_text())
    return back == cfg, "parse(to_text(cfg)) == cfg"


def short_training(seed=7):
    """Bytes of the checkpoint after a small 64-bit training run."""
    cfg = TrainConfig(epochs=2, batch_size=4, S=8, grid_multiplier=4, seed=seed)
    spec = NetworkSpec(arch="UNet", filters0=8, levels=2, n_classes=3, dtype="float64")
    net, opt, _ = train(spec, curve_dataset(8, seed), cfg)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "run.ckpt"
        checkpoint.save(path, net, opt, seed=seed, epoch=cfg.epochs)
        return path.read_bytes()


def check_determinism():
    a, b = short_training(), short_training()
    return a == b, f"two identical runs give {'identical' if a == b else 'different'} checkpoints ({len(a)} bytes)"


def run_suite(quick=False, corrupt=False):
    checks = [
        ("oracle-equivalence", lambda: check_oracle(120 if quick else 500)),
        ("dilation-law", check_dilation),
        ("gradients", lambda: check_gradients(5 if quick else 20)),
        ("cost-model", check_cost_model),
        ("rulebook-reuse", check_rulebook_reuse),
        ("sparsity", check_sparsity),
        ("golden-network", lambda: check_golden(corrupt)),
        ("checkpoint-roundtrip", check_checkpoint),
        ("config-roundtrip", check_config),
        ("determinism", check_determinism),
    ]
    results = []
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # a crash is a failed property, not a crashed suite
            ok, detail = False, f"{type(e).__name__}: {e}"
        results.append(Result(name, bool(ok), detail, time.perf_counter() - t0))
    return results
