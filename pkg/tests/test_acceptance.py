"""The nine acceptance criteria, each printed as one PASS/FAIL line."""
import tempfile
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from sscn import checkpoint, verify
from sscn.accounting import dense_flops, tally
from sscn.data import collate, normalize_to_sphere, split_by_hash, voxelize
from sscn.network import NetworkSpec, build_network
from sscn.rulebook import build_ssc
from sscn.synthetic import curve_dataset, sphere_surface_cloud
from sscn.train import TrainConfig, evaluate_multiview, train


def test_1_oracle_equivalence(acceptance):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {np.float32: 0.0, np.float64: 0.0}
    cases = 0
    for i in range(600):
        dtype = (np.float32, np.float64)[i % 2]
        op = verify.OPS[(i // 2) % len(verify.OPS)]
        got, ref = verify.oracle_case(rng, op, int(rng.choice([2, 3])), dtype)
        worst[dtype] = max(worst[dtype], float(np.abs(got - ref).max(initial=0.0)))
        cases += 1
    seconds = time.perf_counter() - t0
    ok = worst[np.float32] <= 1e-5 and worst[np.float64] <= 1e-12 and seconds < 60
    assert acceptance(1, "oracle equivalence", ok,
                      f"{cases} cases, max diff f32 {worst[np.float32]:.1e} f64 "
                      f"{worst[np.float64]:.1e}, {seconds:.1f}s")


def test_2_dilation_law(acceptance):
    rows = []
    ok = True
    for d in (2, 3):
        for n in (1, 2, 3):
            sc, ssc = verify.dilation_counts(d, n, "SC"), verify.dilation_counts(d, n, "SSC")
            ok &= sc == (2 * n + 1) ** d and ssc == 1
            rows.append(f"d{d}n{n}:{sc}/{ssc}")
    assert acceptance(2, "submanifold dilation", ok, "SC/SSC active sites " + " ".join(rows))


def test_3_gradients(acceptance):
    rng = np.random.default_rng(99)
    worst = {}
    for op in verify.GRADIENT_OPS:
        worst[op] = max(verify.gradient_instance(op, rng) for _ in range(20))
    ok = all(v < 1e-6 for v in worst.values())
    assert acceptance(3, "gradient checks", ok,
                      f"20 instances x {len(worst)} ops, worst rel err {max(worst.values()):.1e} "
                      f"({max(worst, key=worst.get)})")


def test_4_cost_model(acceptance):
    rng = np.random.default_rng(4)
    exact = True
    for _ in range(50):
        d = int(rng.choice([2, 3]))
        m, n = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        x = verify.random_tensor(rng, d, (int(rng.integers(3, 9)),) * d, 1, rng.uniform(0.02, 0.6))
        exact &= tally(build_ssc(x, 3), m, n)[0] == m * n * int(verify.neighbour_counts(x).sum())
    dense_ok = True
    for d in (2, 3):
        L, m, n = 7, 3, 5
        full = verify.random_tensor(rng, d, (L,) * d, 1, 1.1)
        counts = verify.neighbour_counts(full)
        interior = np.all((full.coords[:, 1:] > 0) & (full.coords[:, 1:] < L - 1), axis=1)
        rb = build_ssc(full, 3)
        # per interior site: 3^d m n, the dense per-site cost
        dense_ok &= bool(np.all(m * n * counts[interior] == 3 ** d * m * n))
        dense_ok &= tally(rb, m, n)[0] == m * n * int(counts.sum()) <= dense_flops(rb, m, n)
    assert acceptance(4, "cost model", exact and dense_ok,
                      f"50 random inputs exact m*n*sum(a): {exact}; dense interior 3^d*m*n: {dense_ok}")


def test_5_rulebook_reuse(acceptance):
    rng = np.random.default_rng(5)
    net = build_network(NetworkSpec(arch="C3", layers=6, filters0=16, n_classes=4,
                                    dtype="float64"), rng)
    x = verify.random_tensor(rng, 3, (32,) * 3, 1, 0.02)
    on = net.forward(x, cache=True).features
    builds = net.rulebook_builds()
    off = net.forward(x, cache=False).features
    same = np.array_equal(on, off)
    assert acceptance(5, "rule-book reuse", builds == 1 and same,
                      f"{builds} rule book built per forward; cache on/off bitwise equal: {same}")


def test_6_sparsity(acceptance):
    rng = np.random.default_rng(6)
    S = 48
    fractions = []
    for _ in range(20):
        pc = normalize_to_sphere(sphere_surface_cloud(int(rng.integers(2000, 3001)), rng), S)
        fractions.append(voxelize(pc, S, 4 * S, rng).tensor.a / S ** 3)
    lo, hi = min(fractions), max(fractions)
    assert acceptance(6, "sparsity", 0.003 <= lo and hi <= 0.03,
                      f"active fraction of S^3 over 20 clouds in [{lo:.2%}, {hi:.2%}]")


def test_7_desk_scale_learning(acceptance):
    clouds = curve_dataset(400, seed=0)
    tr = [c for c in clouds if split_by_hash(c.name) == "train"]
    va = [c for c in clouds if split_by_hash(c.name) == "validation"]
    cfg = TrainConfig(epochs=30, seed=0)
    spec = NetworkSpec(arch="UNet", filters0=8, levels=3, block_reps=1, n_classes=3)
    t0 = time.perf_counter()
    net, _, _ = train(spec, tr, cfg)
    rep = evaluate_multiview(net, va, cfg, K=1)
    seconds = time.perf_counter() - t0
    acc, miou = rep.pixel_accuracy, rep.mean_class_iou
    ok = acc >= 0.90 and miou >= 0.75 and seconds < 600
    assert acceptance(7, "desk-scale learning", ok,
                      f"{len(tr)} train / {len(va)} held out, 30 epochs, point accuracy {acc:.1%}, "
                      f"mean IoU {miou:.3f} (per-example {rep.weighted_iou:.3f}), {seconds:.0f}s")


def test_8_linear_time(acceptance):
    rng = np.random.default_rng(8)
    net = build_network(NetworkSpec(arch="C3", layers=6, filters0=16, n_classes=4), rng)
    samples = [voxelize(normalize_to_sphere(sphere_surface_cloud(2500, rng), 32), 32, 128, rng)
               for _ in range(16)]
    sizes, times = [], []
    with threadpool_limits(1):
        for k in (1, 2, 4, 8, 12, 16):
            x = collate(samples[:k]).tensor
            net.forward(x)
            runs = []
            for _ in range(5):
                t0 = time.perf_counter()
                net.forward(x)
                runs.append(time.perf_counter() - t0)
            sizes.append(x.a)
            times.append(min(runs))
    A = np.vstack([sizes, np.ones(len(sizes))]).T
    coef = np.linalg.lstsq(A, times, rcond=None)[0]
    t = np.array(times)
    r2 = 1 - ((t - A @ coef) ** 2).sum() / ((t - t.mean()) ** 2).sum()
    assert acceptance(8, "linear scaling", r2 >= 0.98,
                      f"a from {sizes[0]} to {sizes[-1]} (16x), R^2 = {r2:.4f}")


def _run_bytes(seed):
    cfg = TrainConfig(epochs=3, batch_size=8, seed=seed)
    spec = NetworkSpec(arch="UNet", filters0=8, levels=3, n_classes=3, dtype="float64")
    with threadpool_limits(1):
        net, opt, _ = train(spec, curve_dataset(24, seed), cfg)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "run.ckpt"
        checkpoint.save(path, net, opt, seed=seed, epoch=cfg.epochs)
        return path.read_bytes()


def test_9_determinism(acceptance):
    a, b = _run_bytes(11), _run_bytes(11)
    other = _run_bytes(12)
    ok = a == b and a != other
    assert acceptance(9, "determinism", ok,
                      f"identical seeds -> identical {len(a)}-byte checkpoints: {a == b}; "
                      f"different seed differs: {a != other}")
