"""Tests for subnets, coupling layers, channel mixing, and the block stack."""

import numpy as np
import pytest

from conftest import randomized_model
from flowfuse.errors import ShapeError
from flowfuse.flow import (
    Coupling,
    FlowModel,
    build_model,
    coupling_forward,
    coupling_inverse,
    init_model,
    mixing_forward,
    mixing_inverse,
    model_astype,
    model_forward,
    model_inverse,
    named_parameters,
    set_parameter,
    soft_clamp,
    subnet_apply,
    subnet_zero,
)
from flowfuse.numerics import make_rng


def constant_subnet(in_ch, out_ch, value, hidden=2):
    """Zero subnet whose final bias makes it a constant function."""
    net = subnet_zero(in_ch, out_ch, hidden)
    net.biases[-1] = np.full(out_ch, value, dtype=np.float32)
    return net


def delta_subnet():
    """1-channel, width-1 subnet that is the identity on positive inputs."""
    net = subnet_zero(1, 1, 1)
    for layer in range(5):
        net.weights[layer] = np.zeros((1, 1, 3, 3), dtype=np.float32)
        net.weights[layer][0, 0, 1, 1] = 1.0
    return net


class TestSubnet:
    def test_zero_subnet_outputs_zeros(self, rng):
        net = subnet_zero(3, 2, 4)
        x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
        np.testing.assert_array_equal(subnet_apply(net, x), np.zeros((2, 2, 5, 5)))

    def test_identity_chain_on_positive_input(self, rng):
        net = delta_subnet()
        x = rng.uniform(0.5, 2.0, size=(1, 1, 4, 4)).astype(np.float32)
        np.testing.assert_allclose(subnet_apply(net, x), x, rtol=1e-6)

    def test_batch_equivariance(self, rng):
        gen = make_rng(3)
        net = subnet_zero(2, 2, 4)
        for layer in range(5):
            net.weights[layer] = gen.normal(size=net.weights[layer].shape).astype(np.float32) * 0.2
            net.biases[layer] = gen.normal(size=net.biases[layer].shape).astype(np.float32) * 0.2
        x = rng.normal(size=(3, 2, 4, 4)).astype(np.float32)
        y = subnet_apply(net, x)
        perm = [2, 0, 1]
        np.testing.assert_array_equal(subnet_apply(net, x[perm]), y[perm])

    def test_channel_mismatch(self, rng):
        net = subnet_zero(2, 2, 4)
        with pytest.raises(ShapeError):
            subnet_apply(net, rng.normal(size=(1, 3, 4, 4)).astype(np.float32))


class TestSoftClamp:
    def test_bounded_everywhere(self):
        u = np.array([-1e9, -5.0, 0.0, 5.0, 1e9], dtype=np.float64)
        clamped = soft_clamp(u, 2.0)
        assert np.all(np.abs(clamped) <= 2.0)
        assert clamped[2] == 0.0

    def test_monotone(self):
        u = np.linspace(-20, 20, 101)
        assert np.all(np.diff(soft_clamp(u, 2.0)) > 0)


def stub_coupling():
    """D=2, d=1 coupling with constant subnets r=1, s_raw=0, t=0.25."""
    return Coupling(split=1,
                    r=constant_subnet(1, 1, 1.0),
                    s=constant_subnet(1, 1, 0.0),
                    t=constant_subnet(1, 1, 0.25))


class TestCoupling:
    def test_zero_subnets_identity(self, rng):
        layer = Coupling(1, subnet_zero(1, 1, 2), subnet_zero(1, 1, 2),
                         subnet_zero(1, 1, 2))
        m = rng.normal(size=(2, 2, 3, 3)).astype(np.float32)
        np.testing.assert_allclose(coupling_forward(layer, m), m, atol=1e-7)
        np.testing.assert_allclose(coupling_inverse(layer, m), m, atol=1e-7)

    def test_constant_subnet_example(self):
        # m = (2, 3): n1 = 2 + 1 = 3; n2 = 3 * exp(0) + 0.25 = 3.25
        m = np.array([[[[2.0]], [[3.0]]]], dtype=np.float32)
        n = coupling_forward(stub_coupling(), m)
        np.testing.assert_allclose(n[0, :, 0, 0], [3.0, 3.25], rtol=1e-6)

    def test_constant_subnet_inverse_example(self):
        n = np.array([[[[3.0]], [[3.25]]]], dtype=np.float32)
        m = coupling_inverse(stub_coupling(), n)
        np.testing.assert_allclose(m[0, :, 0, 0], [2.0, 3.0], rtol=1e-6)

    def test_random_roundtrip(self, rng):
        model = randomized_model(channels=4, blocks=1, seed=11)
        layer = model.blocks[0].coupling
        m = rng.normal(size=(2, 4, 6, 6)).astype(np.float32)
        back = coupling_inverse(layer, coupling_forward(layer, m))
        assert np.abs(back - m).max() <= 1e-4
        forth = coupling_forward(layer, coupling_inverse(layer, m))
        assert np.abs(forth - m).max() <= 1e-4

    def test_channel_split_conservation(self, rng):
        m = rng.normal(size=(1, 4, 3, 3)).astype(np.float32)
        np.testing.assert_array_equal(np.concatenate([m[:, :2], m[:, 2:]], axis=1), m)


class TestMixing:
    def test_identity(self, rng):
        x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(mixing_forward(np.eye(3, dtype=np.float32), x), x)

    def test_permutation_swaps_channels(self, rng):
        x = rng.normal(size=(1, 2, 3, 3)).astype(np.float32)
        swap = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float32)
        y = mixing_forward(swap, x)
        np.testing.assert_array_equal(y[:, 0], x[:, 1])
        np.testing.assert_array_equal(y[:, 1], x[:, 0])

    def test_roundtrip_with_inverse(self, rng):
        w = rng.normal(size=(4, 4)).astype(np.float32) + 2 * np.eye(4, dtype=np.float32)
        x = rng.normal(size=(2, 4, 5, 5)).astype(np.float32)
        back = mixing_inverse(w, mixing_forward(w, x))
        assert np.abs(back - x).max() <= 1e-4


class TestModel:
    def test_identity_model_is_identity(self, rng):
        model = build_model(4, 3, hidden=4)
        x = rng.normal(size=(2, 4, 5, 5)).astype(np.float32)
        np.testing.assert_allclose(model_forward(model, x), x, atol=1e-7)
        np.testing.assert_allclose(model_inverse(model, x), x, atol=1e-6)

    def test_single_block_equals_block_forward(self, rng):
        model = randomized_model(channels=2, blocks=1, seed=5)
        x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
        block = model.blocks[0]
        manual = coupling_forward(block.coupling, mixing_forward(block.mixing, x))
        np.testing.assert_array_equal(model_forward(model, x), manual)

    def test_three_blocks_equal_manual_composition(self, rng):
        model = randomized_model(channels=4, blocks=3, seed=6)
        x = rng.normal(size=(1, 4, 4, 4)).astype(np.float32)
        manual = x
        for block in model.blocks:
            manual = coupling_forward(block.coupling, mixing_forward(block.mixing, manual))
        np.testing.assert_array_equal(model_forward(model, x), manual)

    def test_roundtrip_float32(self, rng):
        model = randomized_model(channels=4, blocks=8, seed=3)
        x = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
        assert np.abs(model_inverse(model, model_forward(model, x)) - x).max() <= 1e-3

    def test_roundtrip_float64(self, rng):
        model = model_astype(randomized_model(channels=4, blocks=8, seed=3), np.float64)
        x = rng.normal(size=(2, 4, 8, 8)).astype(np.float64)
        assert np.abs(model_inverse(model, model_forward(model, x)) - x).max() <= 1e-8

    def test_clamped_scale_bounded_for_any_weights(self, rng):
        # even an absurdly scaled s-subnet cannot push |sc| past s_clamp
        from flowfuse.flow import subnet_apply as apply_net

        model = randomized_model(channels=2, blocks=1, seed=8, scale=50.0)
        coupling = model.blocks[0].coupling
        half = (1e3 * rng.normal(size=(1, 1, 6, 6))).astype(np.float32)
        raw = apply_net(coupling.s, half)
        clamped = soft_clamp(raw, coupling.s_clamp)
        assert np.abs(clamped).max() <= coupling.s_clamp
        assert np.abs(raw).max() > coupling.s_clamp  # the clamp actually engaged

    def test_wrong_channel_count(self, rng):
        model = build_model(4, 1)
        with pytest.raises(ShapeError):
            model_forward(model, rng.normal(size=(1, 3, 4, 4)).astype(np.float32))


class TestInit:
    def test_forward_equals_mixing_only(self, rng):
        model = init_model(4, 3, hidden=4, rng=make_rng(21))
        x = rng.normal(size=(2, 4, 6, 6)).astype(np.float32)
        manual = x
        for block in model.blocks:
            manual = mixing_forward(block.mixing, manual)
        np.testing.assert_allclose(model_forward(model, x), manual, atol=1e-6)

    def test_same_seed_bitwise_identical(self):
        a = init_model(4, 2, hidden=4, rng=make_rng(77))
        b = init_model(4, 2, hidden=4, rng=make_rng(77))
        for (name_a, arr_a), (_, arr_b) in zip(named_parameters(a), named_parameters(b)):
            np.testing.assert_array_equal(arr_a, arr_b, err_msg=name_a)

    def test_mixings_orthogonal(self):
        model = init_model(6, 4, hidden=4, rng=make_rng(13))
        for block in model.blocks:
            w = block.mixing.astype(np.float64)
            assert np.abs(w.T @ w - np.eye(6)).max() <= 1e-5
            assert abs(abs(np.linalg.det(w)) - 1.0) <= 1e-5

    def test_odd_channels_rejected(self):
        with pytest.raises(ShapeError):
            init_model(3, 1)

    def test_zero_blocks_rejected(self):
        with pytest.raises(ShapeError):
            init_model(2, 0)


class TestParameters:
    def test_named_parameters_cover_model(self):
        model = build_model(4, 2, hidden=4)
        names = [name for name, _ in named_parameters(model)]
        assert len(names) == len(set(names))
        assert len(names) == 2 * (1 + 3 * 10)  # per block: mixing + 3 subnets x 5 (w, b)

    def test_set_parameter_roundtrip(self, rng):
        model = build_model(2, 1, hidden=3)
        value = rng.normal(size=(2, 2)).astype(np.float32)
        set_parameter(model, "block0.mixing", value)
        np.testing.assert_array_equal(dict(named_parameters(model))["block0.mixing"], value)

    def test_set_parameter_shape_guard(self):
        model = build_model(2, 1, hidden=3)
        with pytest.raises(ShapeError):
            set_parameter(model, "block0.mixing", np.zeros((3, 3), dtype=np.float32))

    def test_astype_roundtrip_values(self):
        model = randomized_model(channels=2, blocks=2, seed=4)
        double = model_astype(model, np.float64)
        assert double.dtype == np.float64
        for (name, arr32), (_, arr64) in zip(named_parameters(model),
                                             named_parameters(double)):
            np.testing.assert_allclose(arr64, arr32, rtol=1e-7, err_msg=name)


class TestInvertibilitySweep:
    @pytest.mark.parametrize("channels,blocks,size", [(2, 1, 8), (4, 4, 16), (6, 8, 8)])
    def test_roundtrip_grid(self, channels, blocks, size):
        model = randomized_model(channels=channels, blocks=blocks, hidden=4,
                                 seed=channels * 100 + blocks)
        x = make_rng(size).normal(size=(2, channels, size, size)).astype(np.float32)
        err = np.abs(model_inverse(model, model_forward(model, x)) - x).max()
        assert err <= 1e-3
