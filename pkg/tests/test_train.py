import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sscn.data import Manifest, PointCloud
from sscn.layers import Parameter
from sscn.network import NetworkSpec
from sscn.synthetic import curve_dataset
from sscn.train import (NonFiniteError, OptimizerState, TrainConfig, apply_mask, iou,
                        learning_rate, predict_points, score, sgd_step, train)


def test_zero_gradient_leaves_params():
    p = Parameter(np.array([1.0, -2.0]))
    sgd_step([("p", p)], OptimizerState(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


@pytest.mark.parametrize("wd", [0.0, 1e-4, 0.1])
def test_scalar_nesterov_trajectory(wd):
    """Five steps on f(p) = (p - 3)^2 against the look-ahead form of Nesterov momentum.

    With theta the "true" iterate, v_{t+1} = mu v_t - lr grad(theta_t + mu v_t),
    theta_{t+1} = theta_t + v_{t+1}; the optimizer's parameter is theta + mu v.
    """
    lr, mu = 0.05, 0.9
    grad = lambda x: 2 * (x - 3) + wd * x
    theta, v = 0.5, 0.0
    p = Parameter(np.array([0.5]))
    opt = OptimizerState(lr=lr, momentum=mu, weight_decay=wd)
    for _ in range(5):
        p.grad[...] = 2 * (p.data - 3)
        sgd_step([("p", p)], opt)
        v = mu * v - lr * grad(theta + mu * v)
        theta = theta + v
        assert p.data[0] == pytest.approx(theta + mu * v, rel=1e-13)


def test_batchnorm_params_skip_weight_decay():
    p = Parameter(np.array([2.0]), decay=False)
    sgd_step([("g", p)], OptimizerState(lr=1.0, weight_decay=0.5))
    assert p.data[0] == 2.0


def test_zero_lr_and_decay_fix_params(rng):
    p = Parameter(rng.standard_normal(4))
    before = p.data.copy()
    opt = OptimizerState(lr=0.0, weight_decay=0.0)
    for _ in range(10):
        p.grad[...] = rng.standard_normal(4)
        sgd_step([("p", p)], opt)
    np.testing.assert_array_equal(p.data, before)


def test_non_finite_gradient_aborts():
    p = Parameter(np.array([1.0]))
    p.grad[...] = np.nan
    with pytest.raises(NonFiniteError):
        sgd_step([("p", p)], OptimizerState())
    with pytest.raises(ValueError):
        OptimizerState(lr=-1)


def test_learning_rate_schedule():
    assert learning_rate(0.1, 100) == pytest.approx(0.1 * math.exp(-4), rel=1e-15)
    assert learning_rate(0.1, 100) == pytest.approx(0.00183, abs=1e-5)
    for t in range(50):
        assert learning_rate(0.1, t) == 0.1 * math.exp(-0.04 * t)


def brute_iou(pred, gt, part):
    p = {i for i, v in enumerate(pred) if v == part}
    g = {i for i, v in enumerate(gt) if v == part}
    return 1.0 if not p | g else len(p & g) / len(p | g)


def test_iou_examples():
    per, cat = iou([0, 1, 1], [0, 1, 1], {0, 1})
    assert cat == 1.0
    per, _ = iou([1, 1], [0, 0], {0, 1})
    assert per[0] == 0.0
    # half of part A correct, part B perfect, part C absent everywhere
    pred = [0, 0, 2, 1, 1, 1]
    gt = [0, 0, 0, 0, 1, 1]
    per, cat = iou(pred, gt, {0, 1, 2})
    assert per[0] == brute_iou(pred, gt, 0) == 0.5
    assert cat == pytest.approx(np.mean([brute_iou(pred, gt, p) for p in (0, 1, 2)]))
    with pytest.raises(ValueError):
        iou([], [], {0})


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40),
       st.randoms(use_true_random=False))
def test_iou_matches_sets_and_is_permutation_invariant(pairs, r):
    pred, gt = zip(*pairs)
    per, cat = iou(pred, gt, {0, 1, 2, 3})
    for p in range(4):
        assert per[p] == pytest.approx(brute_iou(pred, gt, p))
    idx = list(range(len(pairs)))
    r.shuffle(idx)
    _, cat2 = iou([pred[i] for i in idx], [gt[i] for i in idx], {0, 1, 2, 3})
    assert cat2 == pytest.approx(cat)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 6))
def test_masking_never_hurts_when_label_allowed(seed, c):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(c), size=30)
    labels = rng.integers(0, c, 30)
    allowed = set(labels.tolist()) | {int(rng.integers(0, c))}
    masked = apply_mask(probs, allowed)
    np.testing.assert_allclose(masked.sum(1), 1)
    assert np.mean(masked.argmax(1) == labels) >= np.mean(probs.argmax(1) == labels)


def test_singleton_mask_gives_perfect_iou(rng):
    pc = PointCloud(rng.standard_normal((10, 3)), labels=np.full(10, 2), category=5, name="s")
    man = Manifest({"s": 5}, {5: {2}})
    rep = score([rng.dirichlet(np.ones(4), 10)], [pc], man, mask=True, n_classes=4)
    assert rep.per_category_iou[5] == 1.0 and rep.pixel_accuracy == 1.0


def test_weighted_iou_uses_given_weights():
    a = PointCloud(np.zeros((2, 3)), labels=[0, 0], category=0, name="a")
    b = PointCloud(np.zeros((2, 3)), labels=[1, 1], category=1, name="b")
    man = Manifest({"a": 0, "b": 1}, {0: {0, 1}, 1: {0, 1}})
    perfect = np.array([[1.0, 0.0], [1.0, 0.0]])
    wrong = np.array([[1.0, 0.0], [1.0, 0.0]])
    rep = score([perfect, wrong], [a, b], man, category_weights={0: 0.75, 1: 0.25})
    assert rep.per_category_iou == {0: 1.0, 1: 0.0}
    assert rep.weighted_iou == pytest.approx(0.75)


def tiny_run(epochs, n=6, seed=0, **kw):
    cfg = TrainConfig(epochs=epochs, batch_size=4, S=8, seed=seed, **kw)
    spec = NetworkSpec(arch="UNet", levels=2, n_classes=3, dtype="float64")
    return train(spec, curve_dataset(n, seed), cfg), cfg


def test_one_epoch_changes_parameters():
    (net, _, recs), cfg = tiny_run(0)
    before = [p.data.copy() for _, p in net.parameters()]
    (net, _, recs), _ = tiny_run(1)
    assert math.isfinite(recs[0].train_loss)
    assert any(not np.array_equal(b, p.data) for b, (_, p) in zip(before, net.parameters()))


def test_loss_curve_bit_identical():
    (_, _, a), _ = tiny_run(2)
    (_, _, b), _ = tiny_run(2)
    assert [r.train_loss for r in a] == [r.train_loss for r in b]


def test_resume_matches_uninterrupted():
    (full, _, _), cfg = tiny_run(3)
    (half, opt, _), _ = tiny_run(2)
    net, _, _ = train(half.spec, curve_dataset(6, 0), cfg, net=half, opt=opt, start_epoch=2)
    for (_, p), (_, q) in zip(full.parameters(), net.parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_log_lines(tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=4, S=8)
    train(NetworkSpec(arch="C3", layers=2), curve_dataset(4, 0), cfg, log_path=tmp_path / "log")
    lines = (tmp_path / "log").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,train_acc,val_iou,seconds"
    assert [l.split(",")[0] for l in lines[1:]] == ["0", "1"]


def test_view_order_does_not_matter():
    (net, _, _), cfg = tiny_run(1)
    clouds = curve_dataset(3, 9)
    a = predict_points(net, clouds, cfg, view_seeds=[0, 1, 2])
    b = predict_points(net, clouds, cfg, view_seeds=[2, 0, 1])
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        predict_points(net, clouds, cfg, K=0)


def test_loss_halves_within_twenty_epochs():
    cfg = TrainConfig(epochs=20, seed=0)
    _, _, recs = train(NetworkSpec(arch="UNet", levels=3, n_classes=3), curve_dataset(200, 1), cfg)
    assert min(r.train_loss for r in recs) <= 0.5 * recs[0].train_loss
