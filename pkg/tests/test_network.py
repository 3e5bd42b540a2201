import numpy as np
import pytest

from sscn.layers import Context, ResidualBlock, concat
from sscn.network import (ARCHS, NetworkSpec, SpecError, build_network,
                          closed_form_parameter_count, nn_upsample, shape_context_features)
from sscn.tensor import create, from_coords
from sscn.verify import random_tensor


def sample(rng, n=40, size=16, dtype=np.float32):
    return random_tensor(rng, 3, (size,) * 3, 1, n / size ** 3, dtype)


@pytest.mark.parametrize("arch", ARCHS)
@pytest.mark.parametrize("residual", [False, True])
def test_parameter_count_closed_form(arch, residual):
    spec = NetworkSpec(arch=arch, filters0=16, levels=2, layers=4, block_reps=2,
                       residual=residual, n_classes=5)
    net = build_network(spec)
    assert net.n_parameters() == closed_form_parameter_count(spec)


def test_c3_parameter_count_by_hand():
    # first SSC 27*1*8, two pre-activated blocks (BN 2*8 + SSC 27*8*8), final BN, head 8*3+3
    spec = NetworkSpec(arch="C3", layers=3, filters0=8, n_classes=3)
    assert build_network(spec).n_parameters() == 27 * 8 + 2 * (16 + 27 * 64) + 16 + 27


@pytest.mark.parametrize("arch", ARCHS)
def test_output_on_input_active_set(arch, rng):
    net = build_network(NetworkSpec(arch=arch, filters0=8, levels=2, n_classes=4), rng)
    x = sample(rng)
    out = net.forward(x)
    assert out.index is x.index or np.array_equal(out.coords, x.coords)
    assert out.features.shape == (x.a, 4)
    assert out.features.dtype == np.float32


def test_rulebook_builds(rng):
    x = sample(rng)
    c3 = build_network(NetworkSpec(arch="C3", layers=6), rng)
    c3.forward(x)
    assert c3.rulebook_builds() == 1
    unet = build_network(NetworkSpec(arch="UNet", levels=3), rng)
    unet.forward(x)
    # one SSC book per level (4) and one SC book per downsampling (3)
    assert unet.rulebook_builds() == 7


def test_float64_network(rng):
    net = build_network(NetworkSpec(arch="UNet", levels=1, dtype="float64"), rng)
    assert net.forward(sample(rng)).features.dtype == np.float64


def test_empty_input(rng):
    net = build_network(NetworkSpec(arch="UNet", levels=2), rng)
    out = net.forward(create(3, (16, 16, 16)))
    assert out.a == 0


def test_eval_forward_is_deterministic(rng):
    net = build_network(NetworkSpec(arch="FCN", levels=2), rng)
    x = sample(rng)
    np.testing.assert_array_equal(net.forward(x).features, net.forward(x).features)


@pytest.mark.parametrize("kwargs", [dict(arch="VGG"), dict(filters0=12), dict(block_reps=4),
                                    dict(d=5), dict(dtype="float16"),
                                    dict(arch="ShapeContext", m_in=2), dict(arch="C3", layers=0)])
def test_spec_validation(kwargs):
    with pytest.raises(SpecError):
        build_network(NetworkSpec(**kwargs))


def test_spec_dict_roundtrip_and_unknown_keys():
    spec = NetworkSpec(arch="FCN", residual=True)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(SpecError):
        NetworkSpec.from_dict({"arch": "UNet", "depth": 3})


def test_grid_divisibility(rng):
    net = build_network(NetworkSpec(arch="UNet", levels=3))
    with pytest.raises(SpecError):
        net.forward(random_tensor(rng, 3, (12, 12, 12), 1, 0.05, np.float32))
    with pytest.raises(SpecError):
        build_network(NetworkSpec(arch="UNet", levels=3), grid_size=12)


def test_input_planes_checked(rng):
    net = build_network(NetworkSpec(m_in=2))
    with pytest.raises(SpecError):
        net.forward(sample(rng))


def test_nn_upsample_copies_parent():
    coarse = from_coords(np.array([[0, 0, 0], [0, 1, 1]]), np.array([[1.0], [2.0]]), (2, 2))
    fine = from_coords(np.array([[0, 0, 1], [0, 3, 3], [0, 2, 0]]), np.zeros((3, 1)), (4, 4))
    up = nn_upsample(coarse, fine, 2)
    assert up.index is fine.index
    np.testing.assert_array_equal(up.features[:, 0], [1.0, 2.0, 0.0])


def test_concat_requires_shared_index(rng):
    a, b = sample(rng), sample(rng)
    with pytest.raises(ValueError):
        concat([a, b])
    assert concat([a, a]).m == 2


def test_residual_block_width_check_and_identity(rng):
    with pytest.raises(ValueError):
        ResidualBlock(3, 8, 16)
    block = ResidualBlock(3, 4, 4, rng=rng, dtype=np.float64)
    for _, p in block.parameters():
        p.data[...] = 0
    x = random_tensor(rng, 3, (6, 6, 6), 4, 0.3)
    np.testing.assert_array_equal(block.forward(x, Context()).features, x.features)


def test_shape_context_planes(rng):
    x = random_tensor(rng, 3, (16, 16, 16), 1, 0.02)
    f = shape_context_features(x)
    assert f.m == 135 and f.index is x.index
    # scale-1 block is the raw 3x3x3 neighbourhood; its centre is the site itself
    np.testing.assert_array_equal(f.features[:, 13], x.features[:, 0])
