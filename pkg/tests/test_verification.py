import numpy as np
import pytest

from inner_imaging import tensor as T
from inner_imaging.gfilters import GFilterSpec, effective_specs, preset
from inner_imaging.tensor import Tensor
from inner_imaging.verification import (
    CheckResult,
    channel_index_map,
    check_gradients,
    enumerate_groups,
    fd_gradient,
    gradient_suite,
    inspect_groups,
    overlap_counts,
    rel_error,
    run_suites,
    sensitivity_groups,
    theory_suite,
)

S = GFilterSpec


def test_rel_error_metric():
    assert rel_error([1.0], [1.0]) == 0.0
    assert rel_error([0.0], [0.5]) == 0.5  # denominator floors at 1
    assert rel_error([100.0], [101.0]) == pytest.approx(1 / 101)


def test_fd_gradient_of_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = fd_gradient(lambda v: float(np.sum(v ** 2) + v[0] * v[1]), x)
    np.testing.assert_allclose(g, [2 * 1 - 2, 2 * -2 + 1, 1.0], atol=1e-8)


def test_check_gradients_catches_wrong_sign(monkeypatch):
    def bad_sigmoid(x):
        out = 1.0 / (1.0 + np.exp(-x.data))
        return Tensor._from_op(out, (x,), lambda g: (-g * out * (1 - out),), "sigmoid")

    z = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
    assert check_gradients(lambda: bad_sigmoid(z).sum(), [z]) > 1e-2
    assert check_gradients(lambda: T.sigmoid(z).sum(), [z]) < 1e-8


def test_row_major_groups_by_formula():
    rows, cols = 4, 8
    for spec in (S(1, 1), S(2, 3), S(3, 3), S(1, 5), S(2, 2, 2)):
        n, m = spec.output_shape(rows, cols)
        groups = enumerate_groups(spec, rows, cols)
        assert len(groups) == n * m
        d = spec.dilation
        for (x, y), members in groups.items():
            assert members == {(x + d * r) * cols + (y + d * c) for r in range(spec.a) for c in range(spec.b)}


def test_hand_checked_groups():
    g = enumerate_groups(S(2, 2), 2, 3)
    assert g == {(0, 0): {0, 1, 3, 4}, (0, 1): {1, 2, 4, 5}}
    stacked = enumerate_groups(S(2, 1), 2, 3, "stacked")
    assert stacked[(0, 2)] == {2, 5}


def test_index_maps():
    np.testing.assert_array_equal(channel_index_map("row_major", 2, 3), [[0, 1, 2], [3, 4, 5]])
    np.testing.assert_array_equal(channel_index_map("stacked", 2, 3), [[0, 1, 2], [3, 4, 5]])
    # alternating fold: identity ids (C..2C) on even rows
    np.testing.assert_array_equal(channel_index_map("alt", 4, 2), [[4, 5], [0, 1], [6, 7], [2, 3]])
    with pytest.raises(ValueError):
        channel_index_map("alt", 3, 2)


def test_sensitivity_matches_enumeration_with_dilation():
    spec = S(5, 5, 2)
    assert sensitivity_groups(spec, 10, 12) == enumerate_groups(spec, 10, 12)


def test_onehot_singleton_groups():
    report = inspect_groups("onehot", 4, 8)
    assert all(len(c["channels"]) == 1 for c in report["specs"][0]["cells"])
    assert report["overlap_histogram"] == {"1": 32}


def test_square3_overlap_histogram_matches_oracle():
    report = inspect_groups("square-3", 4, 8)
    total = np.zeros(32, dtype=int)
    for spec in effective_specs(preset("square-3"), 4, 8):
        total += overlap_counts(sensitivity_groups(spec, 4, 8), 32)
    hist = {str(k): int(v) for k, v in zip(*np.unique(total, return_counts=True))}
    assert report["overlap_histogram"] == hist
    assert report["overlap"] == total.tolist()
    assert report["kept"] == ["1x1", "3x3"] and report["discarded"] == ["5x5"]


def test_square5_on_2x16_report_lists_discards():
    report = inspect_groups("square-5", 2, 16)
    assert report["discarded"] == ["3x3", "4x4", "5x5"]


def test_theory_suite_passes():
    results = theory_suite()
    assert all(r.passed for r in results), [r for r in results if not r.passed]
    by = {r.name: r for r in results}
    assert by["theory.se_equivalence"].max_err == 0.0


def test_op_gradients_pass():
    results = gradient_suite(include_blocks=False)
    assert len(results) >= 13
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_unknown_scope():
    with pytest.raises(ValueError):
        run_suites("everything")


def test_check_result_record():
    r = CheckResult("x", "pass", 0.0, 1e-4)
    assert r.to_dict() == {"name": "x", "status": "pass", "max_err": 0.0, "tolerance": 1e-4}
