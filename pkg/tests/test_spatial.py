import numpy as np
import pytest

from inner_imaging.gfilters import ConfigError
from inner_imaging.spatial import (
    SpatialAttention,
    apply_spatial,
    apply_spatial_then_channel,
    channel_block,
    compute_spatial_maps,
    spatial_param_count,
)
from inner_imaging.tensor import Tensor, hadamard, no_grad
from inner_imaging.verification import check_gradients


def _u(C=8, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(2, C, 5, 5)))


def test_zero_conv_weights_give_half():
    sp = SpatialAttention(8, 2, np.random.default_rng(0))
    for conv in sp.convs:
        conv.weight.data[...] = 0.0
        conv.bias.data[...] = 0.0
    for m in sp.maps(_u()):
        np.testing.assert_array_equal(m.data, 0.5)


def test_single_map_covers_all_channels():
    sp = SpatialAttention(8, 1, np.random.default_rng(1))
    maps = sp.maps(_u())
    assert len(maps) == 1 and maps[0].shape == (2, 1, 5, 5)


@pytest.mark.parametrize("tau", [1, 2, 4, 8])
def test_map_entries_inside_unit_interval(tau):
    sp = SpatialAttention(8, tau, np.random.default_rng(tau))
    for m in sp.maps(_u(seed=tau)):
        assert np.all((m.data > 0) & (m.data < 1))


def test_tau_must_divide_channels():
    with pytest.raises(ConfigError):
        SpatialAttention(8, 3, np.random.default_rng(0))


def test_identity_gates_leave_input():
    u = _u()
    maps = [Tensor(np.ones((2, 1, 5, 5)))]
    np.testing.assert_array_equal(apply_spatial_then_channel(u, maps, Tensor(np.ones((2, 8)))).data, u.data)


def test_second_block_zeroed():
    u = _u()
    maps = [Tensor(np.ones((2, 1, 5, 5))), Tensor(np.zeros((2, 1, 5, 5)))]
    out = apply_spatial(u, maps).data
    np.testing.assert_array_equal(out[:, :4], u.data[:, :4])
    assert np.all(out[:, 4:] == 0)


def test_matches_per_channel_definition():
    rng = np.random.default_rng(3)
    u, tau, C = _u(12), 3, 12
    maps = [Tensor(rng.uniform(size=(2, 1, 5, 5))) for _ in range(tau)]
    s = rng.uniform(size=(2, C))
    out = apply_spatial_then_channel(u, maps, Tensor(s)).data
    for c in range(C):
        g = channel_block(c, C, tau)
        np.testing.assert_allclose(out[:, c], s[:, c, None, None] * maps[g].data[:, 0] * u.data[:, c], atol=1e-15)


def test_gate_order_commutes():
    rng = np.random.default_rng(4)
    u = _u()
    maps = [Tensor(rng.uniform(size=(2, 1, 5, 5))) for _ in range(2)]
    s = Tensor(rng.uniform(size=(2, 8)))
    a = apply_spatial_then_channel(u, maps, s).data
    b = apply_spatial(hadamard(s, u), maps).data
    np.testing.assert_allclose(a, b, atol=1e-15)


@pytest.mark.parametrize("C,tau", [(8, 1), (8, 2), (12, 3), (16, 8)])
def test_block_assignment_total_and_balanced(C, tau):
    blocks = [channel_block(c, C, tau) for c in range(C)]
    assert sorted(set(blocks)) == list(range(tau))
    assert all(blocks.count(g) == C // tau for g in range(tau))
    assert blocks == sorted(blocks)


@pytest.mark.parametrize("tau", [1, 2, 4, 8])
def test_param_count(tau):
    sp = SpatialAttention(16, tau, np.random.default_rng(0))
    assert sp.num_parameters() == spatial_param_count(tau) == tau * 99


def test_gradients_to_maps_gates_and_input():
    rng = np.random.default_rng(5)
    u = Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True)
    maps = [Tensor(rng.uniform(size=(2, 1, 3, 3)), requires_grad=True) for _ in range(2)]
    s = Tensor(rng.uniform(size=(2, 4)), requires_grad=True)
    r = Tensor(rng.normal(size=(2, 4, 3, 3)))
    err = check_gradients(lambda: (apply_spatial_then_channel(u, maps, s) * r).sum(), [u, s] + maps)
    assert err < 1e-4


def test_compute_maps_checks_conv_count():
    sp = SpatialAttention(8, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        compute_spatial_maps(_u(), 4, sp.convs)


def test_forward_preserves_shape():
    sp = SpatialAttention(8, 4, np.random.default_rng(0))
    with no_grad():
        assert sp(_u()).shape == (2, 8, 5, 5)
