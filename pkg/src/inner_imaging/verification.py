"""Independent oracles: finite differences, group enumeration, parameter counts
and the algebraic properties of the grouping pipeline.

The enumerator works from index maps only and never calls the convolution.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .backbones import ArchDescriptor
from .block import (
    InnerImageConfig,
    InnerImaging,
    SqueezeExcitation,
    aggregate_multi_shape,
    fold,
    gfilter_scan,
    ini_param_count,
    squeeze,
)
from .gfilters import GFilterSpec, default_fold_shape, effective_specs, hidden_units
from .nn import Module
from .residual import JointInnerImaging, alt_fold, stack_signals
from .spatial import SpatialAttention, apply_spatial_then_channel, spatial_param_count
from .tensor import Tensor, no_grad

__all__ = [
    "FOLD_KINDS",
    "CheckResult",
    "rel_error",
    "fd_gradient",
    "check_gradients",
    "channel_index_map",
    "enumerate_groups",
    "sensitivity_groups",
    "overlap_counts",
    "count_params",
    "theory_suite",
    "gradient_suite",
    "groups_suite",
    "run_suites",
    "inspect_groups",
]

FOLD_KINDS = ("row_major", "stacked", "alt")
FD_EPS = 1e-5
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    status: str
    max_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> dict:
        return asdict(self)


def _result(name: str, err: float, tol: float, strict_zero: bool = False) -> CheckResult:
    ok = (err == 0.0) if strict_zero else (np.isfinite(err) and err <= tol)
    return CheckResult(name, "pass" if ok else "fail", float(err), tol)


def rel_error(a, b) -> float:
    """``max |a-b| / max(1, |a|, |b|)`` elementwise."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = FD_EPS) -> np.ndarray:
    """Central differences ``(f(x+eps e_i) - f(x-eps e_i)) / (2 eps)``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise T.NonFiniteError(f"objective is not finite around coordinate {i}")
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = FD_EPS) -> float:
    """Largest relative error between tape and finite-difference gradients.

    ``loss_fn`` must rebuild the scalar loss from the current ``tensors``.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    tape = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, g in zip(tensors, tape):
        def f(values, t=t):
            saved = t.data
            t.data = values
            try:
                with no_grad():
                    return float(loss_fn().data)
            finally:
                t.data = saved

        worst = max(worst, rel_error(g, fd_gradient(f, t.data, eps)))
    return worst


# -- group enumeration ------------------------------------------------------------------

def channel_index_map(fold_kind: str, rows: int, cols: int) -> np.ndarray:
    """Channel id held by each map cell.

    Plain row-major folds use ids ``[0, C)``. The joint maps use ``[0, C)`` for
    residual signals and ``[C, 2C)`` for identity signals.
    """
    r = np.arange(rows)[:, None]
    c = np.arange(cols)[None, :]
    if fold_kind == "row_major":
        return r * cols + c
    if fold_kind == "stacked":
        if rows != 2:
            raise ValueError("the stacked map has exactly two rows")
        return np.where(r == 0, c, cols + c) + 0 * r
    if fold_kind == "alt":
        if rows % 2:
            raise ValueError("the alternating fold needs an even row count")
        C = rows * cols // 2
        chunk = (r // 2) * cols + c
        return np.where(r % 2 == 0, C + chunk, chunk)
    raise ValueError(f"unknown fold kind {fold_kind!r}")


def enumerate_groups(spec: GFilterSpec, rows: int, cols: int, fold_kind: str = "row_major") -> dict:
    """``{(x, y): frozenset(channel ids)}`` covered by the filter at each output cell."""
    if not spec.fits(rows, cols):
        raise ValueError(f"G-filter {spec} overflows the {rows}x{cols} map")
    idx = channel_index_map(fold_kind, rows, cols)
    n, m = spec.output_shape(rows, cols)
    d = spec.dilation
    groups = {}
    for x in range(n):
        for y in range(m):
            groups[(x, y)] = frozenset(
                int(idx[x + d * i, y + d * j]) for i in range(spec.a) for j in range(spec.b)
            )
    return groups


def _map_from_signals(fold_kind: str, rows: int, cols: int, signals: np.ndarray) -> Tensor:
    """Build the main-path map for a batch of signal vectors over all channel ids."""
    if fold_kind == "row_major":
        return fold(Tensor(signals), rows, cols)
    C = signals.shape[1] // 2
    u, x = Tensor(signals[:, :C]), Tensor(signals[:, C:])
    if fold_kind == "stacked":
        return stack_signals(u, x)
    return alt_fold(u, x, rows, cols)


def sensitivity_groups(spec: GFilterSpec, rows: int, cols: int, fold_kind: str = "row_major") -> dict:
    """Groups recovered from the forward path: a unit impulse at channel ``k``
    marks every output cell it reaches through an all-ones filter."""
    total = rows * cols
    impulses = np.eye(total)
    with no_grad():
        vmap = _map_from_signals(fold_kind, rows, cols, impulses)
        out = gfilter_scan(vmap, spec, Tensor(np.ones((1, 1, spec.a, spec.b)))).data[:, 0]
    groups: dict = {}
    n, m = out.shape[1:]
    for x in range(n):
        for y in range(m):
            groups[(x, y)] = frozenset(int(k) for k in np.flatnonzero(out[:, x, y] != 0))
    return groups


def overlap_counts(groups: dict, total: int) -> np.ndarray:
    """How many groups each channel id belongs to."""
    counts = np.zeros(total, dtype=int)
    for members in groups.values():
        for k in members:
            counts[k] += 1
    return counts


# -- parameter accounting -----------------------------------------------------------------

def _conv(cin, cout, k):
    return cin * cout * k * k


def _attention_params(desc: ArchDescriptor, c: int, residual: bool) -> int:
    if desc.attention == "none":
        return 0
    if desc.attention == "se":
        h = hidden_units(c, desc.se_reduction)
        return c * h + h + h * c + c
    cfg = desc.ini
    family = "allcnn" if desc.family == "allcnn" else ("wrn" if desc.family == "wrn" else "generic")
    gset = cfg.filter_set()
    if residual and desc.joint:
        if desc.joint_map == "stacked":
            rows, cols = 2, c
        else:
            rows, cols = cfg.fold_shape or default_fold_shape(2 * c, family, even_rows=True)
    elif cfg.fold:
        rows, cols = cfg.fold_shape or default_fold_shape(c, family)
    else:
        rows, cols = 1, c
    specs = effective_specs(gset, rows, cols)
    return ini_param_count(c, specs, rows, cols, cfg.reduction, cfg.batchnorm)


def count_params(desc: ArchDescriptor) -> int:
    """Closed-form parameter count of the network ``desc`` describes."""
    chans = desc.stage_channels()
    total = 0
    if desc.family == "allcnn":
        cin = desc.in_channels
        for c in chans:
            total += _conv(cin, c, 3) + 2 * c + _conv(c, c, 3) + 2 * c
            total += _attention_params(desc, c, residual=False)
            cin = c
        return total + cin * desc.num_classes + desc.num_classes
    cin = desc.widths[0]
    total += _conv(desc.in_channels, cin, 3)
    for i, c in enumerate(chans):
        for k in range(desc.blocks_per_stage):
            stride = 2 if (i > 0 and k == 0) else 1
            total += 2 * cin + _conv(cin, c, 3) + 2 * c + _conv(c, c, 3)
            if stride != 1 or cin != c:
                total += _conv(cin, c, 1)
            total += _attention_params(desc, c, residual=True)
            if desc.spatial:
                total += spatial_param_count(desc.spatial_tau)
            cin = c
    return total + 2 * cin + cin * desc.num_classes + desc.num_classes


# -- theory -------------------------------------------------------------------------------

def _onehot_proportionality(draws: int = 100, seed: int = 1) -> float:
    rng = np.random.default_rng(seed)
    spec = GFilterSpec(1, 1)
    worst = 0.0
    for _ in range(draws):
        rows, cols = [(4, 8), (2, 16), (8, 4), (1, 32)][rng.integers(4)]
        alpha = rng.normal() * rng.choice([1e-3, 1.0, 1e3])
        v = rng.normal(size=(3, rows * cols))
        with no_grad():
            g = gfilter_scan(fold(Tensor(v), rows, cols), spec, Tensor(np.full((1, 1, 1, 1), alpha)))
        flat = g.data.reshape(3, -1)
        worst = max(worst, float(np.max(np.abs(flat - alpha * v))))
    return worst


def _se_equivalence(seed: int = 2) -> float:
    rng = np.random.default_rng(seed)
    C, t = 32, 16
    u = Tensor(rng.normal(size=(4, C, 5, 5)))
    se = SqueezeExcitation(C, t, np.random.default_rng(seed))
    cfg = InnerImageConfig(preset="onehot", fold_shape=(4, 8), reduction=t, batchnorm=False)
    ini = InnerImaging(C, cfg, np.random.default_rng(seed + 1))
    enc = ini.encoder
    for w in enc.weights:
        w.data[...] = 1.0
    for b in enc.biases:
        b.data[...] = 0.0
    for src, dst in ((se.fc1, enc.fc1), (se.fc2, enc.fc2)):
        dst.weight.data[...] = src.weight.data
        dst.bias.data[...] = src.bias.data
    with no_grad():
        s_se = se.gates(u).data
        s_ini = ini.gates(u).data
    return float(np.max(np.abs(s_se - s_ini)))


def _channel_group_split(seed: int = 3) -> tuple[float, float]:
    """Encoder pre-activation over a {1x1, 3x3} grouping splits into a channel part and a group part."""
    rng = np.random.default_rng(seed)
    rows, cols, C, eps = 4, 8, 32, 2
    specs = [GFilterSpec(1, 1), GFilterSpec(3, 3)]
    alpha = rng.normal(size=eps)
    w_onehot = Tensor(alpha.reshape(eps, 1, 1, 1))
    w_group = Tensor(rng.normal(size=(eps, 1, 3, 3)))
    v = rng.normal(size=(5, C))
    with no_grad():
        g = aggregate_multi_shape(fold(Tensor(v), rows, cols), specs, [w_onehot, w_group])
    vbar = g.data.reshape(5, -1)
    n, m = g.shape[2:]
    col = np.tile(np.arange(m), n)
    channel_mask = col < cols
    w1 = rng.normal(size=(7, n * m))
    e = vbar @ w1.T
    e_channels = vbar @ (w1 * channel_mask).T
    e_groups = vbar @ (w1 * ~channel_mask).T
    split_residual = float(np.max(np.abs(e - (e_channels + e_groups))))
    # the channel part only sees the averaged one-hot scale times each channel signal
    rowcol = np.flatnonzero(channel_mask)
    cell_rows, cell_cols = rowcol // m, rowcol % m
    channel_ids = cell_rows * cols + cell_cols
    direct = (alpha.mean() * v[:, channel_ids]) @ w1[:, rowcol].T
    proportional = float(np.max(np.abs(e_channels - direct)))
    return split_residual, proportional


def theory_suite() -> list[CheckResult]:
    split_res, prop = _channel_group_split()
    return [
        _result("theory.onehot_proportionality", _onehot_proportionality(), 1e-12),
        _result("theory.se_equivalence", _se_equivalence(), 0.0, strict_zero=True),
        _result("theory.channels_plus_groups_split", split_res, 1e-12),
        _result("theory.channel_term_proportional", prop, 1e-12),
    ]


# -- gradient suite -----------------------------------------------------------------------

def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * Tensor(weights)).sum()


def _op_cases(rng) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    def leaf(*shape, scale=1.0):
        return Tensor(rng.normal(size=shape) * scale, requires_grad=True)

    cases = []
    x, k = leaf(2, 2, 6, 5), leaf(3, 2, 3, 2)
    r1 = rng.normal(size=(2, 3, 3, 3))
    cases.append(("conv2d", lambda: _weighted_sum(T.conv2d(x, k, stride=2, dilation=1, padding=1), r1), [x, k]))
    xd, kd = leaf(1, 1, 7, 7), leaf(2, 1, 3, 3)
    r2 = rng.normal(size=(1, 2, 3, 3))
    cases.append(("conv2d_dilated", lambda: _weighted_sum(T.conv2d(xd, kd, dilation=2), r2), [xd, kd]))
    p = leaf(2, 3, 3, 5)
    r3 = rng.normal(size=(2, 3))
    cases.append(("global_avg_pool", lambda: _weighted_sum(T.global_avg_pool(p), r3), [p]))
    a, b = leaf(4, 6), leaf(6, 3)
    r4 = rng.normal(size=(4, 3))
    cases.append(("matmul", lambda: _weighted_sum(T.matmul(a, b), r4), [a, b]))
    z = leaf(3, 4, scale=2.0)
    r5 = rng.normal(size=(3, 4))
    cases.append(("sigmoid", lambda: _weighted_sum(T.sigmoid(z), r5), [z]))
    zr = Tensor(np.sign(rng.normal(size=(3, 4))) * rng.uniform(0.1, 1.0, size=(3, 4)), requires_grad=True)
    cases.append(("relu", lambda: _weighted_sum(T.relu(zr), r5), [zr]))
    ua, va = leaf(2, 3, 2, 2), leaf(3, 1, 1)
    r6 = rng.normal(size=(2, 3, 2, 2))
    cases.append(("add", lambda: _weighted_sum(T.add(ua, va), r6), [ua, va]))
    sh = leaf(2, 3)
    cases.append(("hadamard", lambda: _weighted_sum(T.hadamard(sh, ua), r6), [sh, ua]))
    rs = leaf(2, 6)
    r7 = rng.normal(size=(2, 1, 2, 3))
    cases.append(("reshape", lambda: _weighted_sum(T.reshape(rs, (2, 1, 2, 3)), r7), [rs]))
    b1, b2, b3 = leaf(2, 3, 1), leaf(2, 2, 2), leaf(2, 1, 3)
    r8 = rng.normal(size=(2, 3, 6))
    cases.append(("concat_zero_fill", lambda: _weighted_sum(T.concat_zero_fill([b1, b2, b3]), r8), [b1, b2, b3]))
    bx, gam, bet = leaf(4, 3, 2, 2), leaf(3), leaf(3)
    rm, rv = np.zeros(3), np.ones(3)
    r9 = rng.normal(size=(4, 3, 2, 2))
    cases.append(("batchnorm", lambda: _weighted_sum(T.batchnorm(bx, gam, bet, rm, rv, True), r9), [bx, gam, bet]))
    mx = leaf(2, 4, 3)
    r10 = rng.normal(size=(2, 3))
    cases.append(("max", lambda: _weighted_sum(mx.max(axis=1), r10), [mx]))
    lg = leaf(5, 4)
    labels = rng.integers(0, 4, size=5)
    cases.append(("cross_entropy", lambda: T.cross_entropy(lg, labels), [lg]))
    return cases


def _block_case(name: str, module: Module, forward: Callable[[Tensor], Tensor], inputs: list[Tensor], rng):
    params = module.parameters()
    out_shape = forward(*inputs).shape
    r = rng.normal(size=out_shape)
    return (name, lambda: _weighted_sum(forward(*inputs), r), inputs + params)


def _block_cases(rng) -> list:
    cases = []
    C, B = 32, 3

    def feat(c=C, h=3, w=3):
        return Tensor(rng.normal(size=(B, c, h, w)), requires_grad=True)

    for name in ("square-1", "square-3", "mix-5", "mix-5-d"):
        blk = InnerImaging(C, InnerImageConfig(preset=name, fold_shape=(4, 8), reduction=8), np.random.default_rng(5))
        cases.append(_block_case(f"ini[{name}]", blk, blk, [feat()], rng))
    for name in ("simple-1", "simple-3"):
        blk = JointInnerImaging(16, InnerImageConfig(preset=name, reduction=4), np.random.default_rng(6), "stacked")
        cases.append(_block_case(f"joint_stacked[{name}]", blk, blk, [feat(16), feat(16)], rng))
    blk = JointInnerImaging(16, InnerImageConfig(preset="square-3", fold_shape=(4, 8), reduction=4),
                            np.random.default_rng(7), "alt_folded")
    cases.append(_block_case("joint_alt[square-3]", blk, blk, [feat(16), feat(16)], rng))
    for tau in (1, 4):
        sp = SpatialAttention(8, tau, np.random.default_rng(8))
        gate = Tensor(rng.uniform(0.1, 0.9, size=(B, 8)), requires_grad=True)

        def fwd(u, s, sp=sp):
            return apply_spatial_then_channel(u, sp.maps(u), s)

        cases.append(_block_case(f"spatial[tau={tau}]", sp, fwd, [feat(8, 4, 4), gate], rng))
    return cases


def gradient_suite(seed: int = 0, include_blocks: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cases = _op_cases(rng) + (_block_cases(rng) if include_blocks else [])
    results = []
    for name, loss_fn, tensors in cases:
        try:
            err = check_gradients(loss_fn, tensors)
        except Exception as exc:  # a crashing op is a failed check, not a crashed suite
            results.append(CheckResult(f"grad.{name}", f"fail: {exc}", float("nan"), GRAD_TOL))
            continue
        results.append(_result(f"grad.{name}", err, GRAD_TOL))
    return results


# -- group suite --------------------------------------------------------------------------

GROUPING_PRESETS = (
    "square-1", "square-2", "square-3", "square-4", "square-5",
    "mix-1", "mix-2", "mix-3", "mix-4", "mix-5",
    "horizon-3", "horizon-5", "vertical-3", "vertical-5",
    "simple-1", "simple-3", "square-3-d", "mix-5-d",
)
GROUP_MAPS = ((2, 16), (4, 8), (8, 4))


def groups_suite(presets: Iterable[str] = GROUPING_PRESETS, maps=GROUP_MAPS) -> list[CheckResult]:
    from .gfilters import ConfigError, preset

    results = []
    for name in presets:
        for rows, cols in maps:
            try:
                specs = effective_specs(preset(name), rows, cols)
            except ConfigError:
                continue
            mismatches = sum(
                sensitivity_groups(s, rows, cols) != enumerate_groups(s, rows, cols) for s in specs
            )
            results.append(_result(f"groups.{name}@{rows}x{cols}", float(mismatches), 0.0, strict_zero=True))
    for kind, (rows, cols) in (("stacked", (2, 8)), ("alt", (4, 8)), ("alt", (2, 16))):
        for spec in (GFilterSpec(1, 1), GFilterSpec(2, 1), GFilterSpec(2, 2), GFilterSpec(3, 3)):
            if not spec.fits(rows, cols):
                continue
            bad = float(sensitivity_groups(spec, rows, cols, kind) != enumerate_groups(spec, rows, cols, kind))
            results.append(_result(f"groups.{kind}.{spec}@{rows}x{cols}", bad, 0.0, strict_zero=True))
    return results


def run_suites(scope: str = "all") -> list[CheckResult]:
    """Run ``grad``, ``groups``, ``theory`` or ``all`` checks."""
    if scope not in ("grad", "groups", "theory", "all"):
        raise ValueError(f"unknown verification scope {scope!r}")
    results: list[CheckResult] = []
    if scope in ("grad", "all"):
        results += gradient_suite()
    if scope in ("groups", "all"):
        results += groups_suite()
    if scope in ("theory", "all"):
        results += theory_suite()
    return results


def timed(fn, *args, **kwargs):
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start


def inspect_groups(preset_name: str, rows: int, cols: int, fold_kind: str = "row_major") -> dict:
    """Per-spec group membership plus overlap statistics for a preset on a map."""
    from .gfilters import discarded_specs, preset

    gset = preset(preset_name)
    kept = effective_specs(gset, rows, cols)
    total = rows * cols
    per_spec = []
    overlap = np.zeros(total, dtype=int)
    for spec in kept:
        groups = enumerate_groups(spec, rows, cols, fold_kind)
        overlap += overlap_counts(groups, total)
        per_spec.append({
            "spec": str(spec),
            "cells": [{"cell": list(cell), "channels": sorted(members)} for cell, members in sorted(groups.items())],
        })
    hist: dict[str, int] = {}
    for c in overlap:
        hist[str(int(c))] = hist.get(str(int(c)), 0) + 1
    return {
        "preset": preset_name,
        "map": [rows, cols],
        "fold": fold_kind,
        "kept": [str(s) for s in kept],
        "discarded": [str(s) for s in discarded_specs(gset, rows, cols)],
        "specs": per_spec,
        "overlap": [int(c) for c in overlap],
        "overlap_histogram": dict(sorted(hist.items(), key=lambda kv: int(kv[0]))),
    }
