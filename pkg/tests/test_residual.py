import numpy as np
import pytest

from inner_imaging.block import InnerImageConfig, InnerImaging
from inner_imaging.gfilters import ConfigError, GFilterSpec, preset
from inner_imaging.residual import JointInnerImaging, PreActBlock, alt_fold, simplified_scan, stack_signals
from inner_imaging.tensor import ShapeError, Tensor, no_grad
from inner_imaging.verification import enumerate_groups, fd_gradient

S = GFilterSpec


def test_stack_layout():
    m = stack_signals(Tensor(np.array([[1.0, 2]])), Tensor(np.array([[3.0, 4]])))
    np.testing.assert_array_equal(m.data, [[[[1, 2], [3, 4]]]])


def test_stack_equal_rows_and_recovery():
    v = np.random.default_rng(0).normal(size=(3, 5))
    w = np.random.default_rng(1).normal(size=(3, 5))
    m = stack_signals(Tensor(v), Tensor(v)).data
    np.testing.assert_array_equal(m[:, 0, 0], m[:, 0, 1])
    m = stack_signals(Tensor(v), Tensor(w)).data
    np.testing.assert_array_equal(m[:, 0, 0], v)
    np.testing.assert_array_equal(m[:, 0, 1], w)
    with pytest.raises(ShapeError):
        stack_signals(Tensor(v), Tensor(w[:, :4]))


def test_alt_fold_single_alternation():
    u = np.array([[1.0, 2, 3, 4]])
    x = np.array([[5.0, 6, 7, 8]])
    m = alt_fold(Tensor(u), Tensor(x), 2, 4).data[0, 0]
    np.testing.assert_array_equal(m, [x[0], u[0]])


def test_alt_fold_two_alternations():
    u = np.arange(1, 9, dtype=float)[None]
    x = -np.arange(1, 9, dtype=float)[None]
    m = alt_fold(Tensor(u), Tensor(x), 4, 4).data[0, 0]
    np.testing.assert_array_equal(m, [x[0, :4], u[0, :4], x[0, 4:], u[0, 4:]])


def test_alt_fold_is_a_permutation():
    rng = np.random.default_rng(2)
    u, x = rng.normal(size=(2, 12)), rng.normal(size=(2, 12))
    m = alt_fold(Tensor(u), Tensor(x), 4, 6).data
    for b in range(2):
        np.testing.assert_array_equal(np.sort(m[b].ravel()), np.sort(np.concatenate([u[b], x[b]])))


def test_alt_fold_rejects_bad_shapes():
    v = Tensor(np.zeros((1, 6)))
    with pytest.raises(ShapeError):
        alt_fold(v, v, 3, 4)
    with pytest.raises(ShapeError):
        alt_fold(v, v, 2, 5)


def test_two_row_filter_pairs_same_channel_in_alt_fold():
    C = 8
    groups = enumerate_groups(S(2, 1), 4, 4, "alt")
    for (x, y), members in groups.items():
        if x % 2 == 0:
            chan = (x // 2) * 4 + y
            assert members == {chan, C + chan}


# -- simplified scan -------------------------------------------------------------------

def _weights(specs, eps, rng):
    return [Tensor(rng.normal(size=(eps, 1, s.a, s.b))) for s in specs]


def test_simple1_gives_one_value_per_channel():
    rng = np.random.default_rng(3)
    C = 6
    u, x = rng.normal(size=(2, C)), rng.normal(size=(2, C))
    w = _weights([S(2, 1)], 1, rng)
    out = simplified_scan(stack_signals(Tensor(u), Tensor(x)), [S(2, 1)], w).data
    assert out.shape == (2, C)
    k = w[0].data[0, 0, :, 0]
    np.testing.assert_allclose(out, k[0] * u + k[1] * x, atol=1e-15)


def test_onehot_flattens_full_stacked_map():
    rng = np.random.default_rng(4)
    C = 5
    u, x = rng.normal(size=(1, C)), rng.normal(size=(1, C))
    w = [Tensor(np.ones((1, 1, 1, 1)))]
    out = simplified_scan(stack_signals(Tensor(u), Tensor(x)), [S(1, 1)], w).data
    np.testing.assert_array_equal(out, np.concatenate([u, x], axis=1))


def test_simple3_group_count():
    rng = np.random.default_rng(5)
    C = 7
    specs = list(preset("simple-3").specs)
    u, x = rng.normal(size=(1, C)) + 5, rng.normal(size=(1, C)) + 5
    w = [Tensor(np.abs(rng.normal(size=(2, 1, s.a, s.b))) + 0.1) for s in specs]
    out = simplified_scan(stack_signals(Tensor(u), Tensor(x)), specs, w).data
    # zero fill pads the 2C | C | C-1 parts to two rows
    assert out.shape == (1, 2 * (3 * C - 1))
    assert np.count_nonzero(out) == 2 * C + C + (C - 1)


def test_simplified_scan_rejects_tall_filters():
    with pytest.raises(ConfigError):
        simplified_scan(Tensor(np.zeros((1, 1, 2, 4))), [S(3, 1)], [Tensor(np.zeros((1, 1, 3, 1)))])


def test_stacked_block_validates_presets():
    with pytest.raises(ConfigError):
        JointInnerImaging(16, InnerImageConfig(preset="square-3"), np.random.default_rng(0), "stacked")
    with pytest.raises(ConfigError):
        JointInnerImaging(16, InnerImageConfig(), np.random.default_rng(0), "zigzag")
    blk = JointInnerImaging(16, InnerImageConfig(preset="simple-1", reduction=4), np.random.default_rng(0), "stacked")
    assert blk.encoder.num_groups == 16


def test_alt_folded_block_accepts_full_presets():
    blk = JointInnerImaging(16, InnerImageConfig(preset="mix-5"), np.random.default_rng(0))
    assert blk.map_shape == (2, 16)
    assert blk.encoder.specs == (S(1, 1), S(1, 5))
    blk = JointInnerImaging(16, InnerImageConfig(preset="mix-5", fold_shape=(4, 8)), np.random.default_rng(0))
    assert blk.encoder.specs == (S(1, 1), S(1, 5), S(3, 3))


# -- residual unit ----------------------------------------------------------------------

def _unit(joint=True, attention="ini", cin=8, cout=8, stride=1, seed=0, joint_map="alt_folded", preset_name="square-3"):
    cfg = InnerImageConfig(preset=preset_name, reduction=4)
    return PreActBlock(cin, cout, stride, np.random.default_rng(seed), attention=attention, ini=cfg,
                       joint=joint, joint_map=joint_map)


def test_zero_residual_returns_input():
    unit = _unit()
    unit.conv2.weight.data[...] = 0.0
    x = Tensor(np.random.default_rng(1).normal(size=(2, 8, 4, 4)))
    np.testing.assert_array_equal(unit(x).data, x.data)


def test_open_gates_give_plain_residual_unit():
    unit = _unit()
    unit.attention.encoder.force_open = True
    x = Tensor(np.random.default_rng(2).normal(size=(2, 8, 4, 4)))
    identity, u = unit.residual(x)
    np.testing.assert_array_equal(unit(x).data, (identity + u).data)


def test_identity_path_has_unit_jacobian():
    unit = _unit()
    unit.conv2.weight.data[...] = 0.0
    unit.eval()
    x0 = np.random.default_rng(3).normal(size=(1, 8, 3, 3))
    n = x0.size
    jac = np.zeros((n, n))
    for k in range(n):
        def f(v, k=k):
            with no_grad():
                return float(unit(Tensor(v)).data.ravel()[k])
        jac[k] = fd_gradient(f, x0).ravel()
    np.testing.assert_allclose(jac, np.eye(n), atol=1e-9)


def _gate_jacobian_wrt_identity(gates, x0, u):
    rows = []
    for k in range(gates(Tensor(x0), u).size):
        def f(v, k=k):
            with no_grad():
                return float(gates(Tensor(v), u).data.ravel()[k])
        rows.append(fd_gradient(f, x0).ravel())
    return np.array(rows)


@pytest.mark.parametrize("joint_map,preset_name", [("alt_folded", "square-3"), ("stacked", "simple-3")])
def test_joint_gates_depend_on_identity(joint_map, preset_name):
    rng = np.random.default_rng(4)
    blk = JointInnerImaging(8, InnerImageConfig(preset=preset_name, reduction=4, batchnorm=False),
                            np.random.default_rng(5), joint_map)
    blk.encoder.fc1.bias.data[...] = 1.0  # keep the hidden units active
    u = Tensor(rng.normal(size=(1, 8, 3, 3)))
    x0 = rng.normal(size=(1, 8, 3, 3))
    jac = _gate_jacobian_wrt_identity(blk.gates, x0, u)
    assert np.max(np.abs(jac)) > 1e-8


def test_plain_gates_ignore_identity():
    rng = np.random.default_rng(6)
    blk = InnerImaging(8, InnerImageConfig(reduction=4, fold_shape=(2, 4), batchnorm=False), np.random.default_rng(7))
    u = Tensor(rng.normal(size=(1, 8, 3, 3)))
    jac = _gate_jacobian_wrt_identity(lambda x, u: blk.gates(u), rng.normal(size=(1, 8, 3, 3)), u)
    assert np.max(np.abs(jac)) == 0.0


def test_downsampling_unit_projects_identity():
    unit = _unit(cin=8, cout=16, stride=2)
    x = Tensor(np.random.default_rng(8).normal(size=(2, 8, 6, 6)))
    identity, u = unit.residual(x)
    assert identity.shape == u.shape == (2, 16, 3, 3)
    assert unit(x).shape == (2, 16, 3, 3)


@pytest.mark.parametrize("attention,joint", [("none", False), ("se", False), ("ini", False), ("ini", True)])
def test_unit_variants_preserve_shape(attention, joint):
    unit = _unit(attention=attention, joint=joint)
    x = Tensor(np.random.default_rng(9).normal(size=(2, 8, 4, 4)))
    assert unit(x).shape == x.shape
