import numpy as np
import pytest

import bssgan.tensor as T
from bssgan.errors import ConfigError
from bssgan.networks import (
    NetworkSpec,
    build_discriminator,
    build_generator,
    discriminator_features,
    discriminator_spec,
    generator_spec,
)


def test_output_width_semi_supervised_vs_plain():
    assert build_discriminator(2, True, 32).spec.output_dim == 3
    assert build_discriminator(2, False, 32).spec.output_dim == 2


def test_discriminator_rejects_single_class():
    with pytest.raises(ConfigError):
        discriminator_spec(1, False)


def test_discriminator_full_size_forward():
    net = build_discriminator(2, True, 128, np.random.default_rng(0))
    x = T.Tensor(np.random.default_rng(1).uniform(-1, 1, size=(5, 128, 128, 3)))
    p = net.forward(x, training=False)
    assert p.shape == (5, 3)
    np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-5)
    assert net.features.shape == (5, 65536)


def test_discriminator_layer_shapes_follow_table():
    net = build_discriminator(3, False, 128)
    shapes = {k: v.shape for k, v in net.params.items()}
    assert shapes["d.conv1.kernel"] == (3, 3, 3, 32)
    assert shapes["d.conv2.kernel"] == (3, 3, 32, 64)
    assert shapes["d.conv3.kernel"] == (3, 3, 64, 64)
    assert shapes["d.fc.kernel"] == (65536, 3)
    assert shapes["d.bn2.gamma"] == (64,)


def test_parameter_names_have_no_orphans():
    net = build_discriminator(2, True, 32)
    expected = {
        f"d.{layer}.{what}" for layer in ("conv1", "conv2", "conv3", "fc") for what in ("kernel", "bias")
    } | {"d.bn2.gamma", "d.bn2.beta", "running/d.bn2.mean", "running/d.bn2.var"}
    assert set(net.params) == expected
    assert set(net.trainable) == expected - {"running/d.bn2.mean", "running/d.bn2.var"}


def test_generator_full_size_dense_width():
    spec = generator_spec(128)
    assert spec.layers[0].filters == 131072
    assert spec.layers[1].shape == (32, 32, 128)


@pytest.mark.parametrize("size", [32, 64])
def test_generator_proportional_shapes(size):
    g = build_generator(size, rng=np.random.default_rng(0))
    z = T.Tensor(np.random.default_rng(1).normal(size=(4, 100)))
    out = g.forward(z, training=True)
    assert out.shape == (4, size, size, 3)
    assert g.params["g.fc.kernel"].shape == (100, (size // 4) ** 2 * 128)


def test_generator_table_channel_progression():
    g = build_generator(32)
    assert g.params["g.deconv1.kernel"].shape == (3, 3, 64, 128)
    assert g.params["g.deconv2.kernel"].shape == (3, 3, 3, 64)
    assert g.params["g.deconv3.kernel"].shape == (3, 3, 3, 3)


def test_generator_rejects_bad_size():
    with pytest.raises(ConfigError):
        generator_spec(30)


@pytest.mark.parametrize("scale", [0.1, 1.0, 100.0])
def test_generator_output_in_tanh_range(scale):
    g = build_generator(32, rng=np.random.default_rng(2))
    out = g.forward(T.Tensor(np.random.default_rng(3).normal(0, scale, size=(6, 100))), training=False)
    assert np.all(np.abs(out.data) <= 1.0)


def test_features_nonnegative_and_deterministic():
    net = build_discriminator(2, True, 32, np.random.default_rng(0))
    x = T.Tensor(np.random.default_rng(4).uniform(-1, 1, size=(3, 32, 32, 3)))
    f1 = discriminator_features(net, x).data
    f2 = discriminator_features(net, x).data
    assert f1.shape == (3, 8 * 8 * 64)
    assert np.all(f1 >= 0)
    np.testing.assert_array_equal(f1, f2)


def test_xavier_bounds_and_zero_biases():
    net = build_discriminator(2, False, 32, np.random.default_rng(0))
    bound = np.sqrt(6.0 / (27 + 288))
    k = net.params["d.conv1.kernel"].data
    assert np.abs(k).max() <= bound
    assert np.abs(k).max() > 0.9 * bound
    for name, p in net.params.items():
        if name.endswith(".bias") or name.endswith(".beta"):
            assert np.all(p.data == 0)
        if name.endswith(".gamma"):
            assert np.all(p.data == 1)


def test_different_seeds_give_different_bytes():
    a = build_discriminator(2, False, 32, np.random.default_rng(0))
    b = build_discriminator(2, False, 32, np.random.default_rng(1))
    assert a.params["d.conv1.kernel"].data.tobytes() != b.params["d.conv1.kernel"].data.tobytes()


def test_input_shape_checked():
    net = build_discriminator(2, False, 32)
    with pytest.raises(ConfigError):
        net.forward(T.Tensor(np.zeros((1, 64, 64, 3))))


def test_fingerprint_distinguishes_specs_and_round_trips():
    a, b = discriminator_spec(2, True, 32), discriminator_spec(2, False, 32)
    assert a.fingerprint() != b.fingerprint()
    assert NetworkSpec.from_dict(a.to_dict()).fingerprint() == a.fingerprint()
    g = generator_spec(32)
    assert NetworkSpec.from_dict(g.to_dict()) == g


def test_frozen_forward_records_no_parameter_gradients():
    net = build_discriminator(2, True, 32, np.random.default_rng(0))
    x = T.Tensor(np.zeros((2, 32, 32, 3)), name="x", requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(net.forward(x, training=False, frozen=True))
    grads = T.backward(tape, loss, {"x": x, **net.trainable})
    assert all(np.all(grads[k] == 0) for k in net.trainable)


def test_update_stats_flag_keeps_running_stats():
    g = build_generator(32, rng=np.random.default_rng(0))
    before = g.params["running/g.bn1.mean"].data.copy()
    g.forward(T.Tensor(np.random.default_rng(0).normal(size=(3, 100))), training=True, update_stats=False)
    np.testing.assert_array_equal(g.params["running/g.bn1.mean"].data, before)
    g.forward(T.Tensor(np.random.default_rng(0).normal(size=(3, 100))), training=True)
    assert not np.array_equal(g.params["running/g.bn1.mean"].data, before)
