"""Inner-Imaging channel attention.

Channel signals are squeezed out of a feature map, folded into a small
pseudo-image, scanned by grouping filters (G-filters) of one or several shapes,
and the resulting group signals are encoded into one sigmoid gate per channel.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .gfilters import (
    ConfigError,
    GFilterSet,
    GFilterSpec,
    default_fold_shape,
    effective_specs,
    filter_count,
    hidden_units,
    preset,
)
from .nn import BatchNorm, Linear, Module, Parameter, fan_in_uniform
from .tensor import (
    ShapeError,
    Tensor,
    concat_zero_fill,
    conv2d,
    global_avg_pool,
    relu,
    reshape,
    scale_channels,
    sigmoid,
)

__all__ = [
    "InnerImageConfig",
    "squeeze",
    "fold",
    "gfilter_scan",
    "average_over_filters",
    "aggregate_multi_shape",
    "grouping_shape",
    "encode_attention",
    "apply_attention",
    "GroupEncoder",
    "InnerImaging",
    "SqueezeExcitation",
    "ini_param_count",
]


@dataclass(frozen=True)
class InnerImageConfig:
    """Settings of one InI block.

    ``fold_shape`` of ``None`` picks the family default. With ``fold=False`` the
    signals stay a single row, so only one-row G-filters survive. Turning
    ``aggregation`` off requires a set that keeps exactly one shape.
    """

    preset: str = "square-3"
    fold_shape: tuple[int, int] | None = None
    reduction: int = 16
    aggregation: bool = True
    fold: bool = True
    dilated: bool = False
    batchnorm: bool = True

    def filter_set(self) -> GFilterSet:
        name = self.preset
        if self.dilated and not name.endswith("-d"):
            name += "-d"
        return preset(name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fold_shape"] = list(self.fold_shape) if self.fold_shape else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InnerImageConfig":
        d = dict(d)
        if d.get("fold_shape") is not None:
            d["fold_shape"] = tuple(d["fold_shape"])
        return cls(**d)


# -- pipeline stages -------------------------------------------------------------------

def squeeze(u: Tensor) -> Tensor:
    """Channel signals [B,C] by global average pooling of [B,C,H,W]."""
    return global_avg_pool(u)


def fold(signals: Tensor, rows: int, cols: int) -> Tensor:
    """Row-major fold of [B,C] signals into a [B,1,rows,cols] map."""
    B, C = signals.shape
    if rows * cols != C:
        raise ShapeError(f"fold {rows}x{cols} does not hold {C} channel signals")
    return reshape(signals, (B, 1, rows, cols))


def gfilter_scan(vmap: Tensor, spec: GFilterSpec, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid, stride-1 scan of every filter instance: [B,1,N,M] -> [B,eps,n,m]."""
    if weights.shape[1:] != (1, spec.a, spec.b):
        raise ShapeError(f"weights {weights.shape} do not match G-filter {spec}")
    out = conv2d(vmap, weights, stride=1, dilation=spec.dilation, padding=0)
    if bias is not None:
        out = out + reshape(bias, (1, -1, 1, 1))
    return out


def average_over_filters(per_filter: Tensor) -> Tensor:
    """Mean over the filter-instance axis: [B,eps,n,m] -> [B,1,n,m]."""
    return per_filter.mean(axis=1, keepdims=True)


def grouping_shape(specs: Sequence[GFilterSpec], rows: int, cols: int) -> tuple[int, int]:
    """Shape of the (zero-filled) grouping map produced by ``specs`` on a rows x cols map."""
    shapes = [s.output_shape(rows, cols) for s in specs]
    return max(n for n, _ in shapes), sum(m for _, m in shapes)


def aggregate_multi_shape(
    vmap: Tensor,
    specs: Sequence[GFilterSpec],
    weights: Sequence[Tensor],
    biases: Sequence[Tensor | None] | None = None,
) -> Tensor:
    """Scan with each spec, join per filter instance with zero fill, then average.

    Returns [B,1,max_j n_j, sum_j m_j].
    """
    if not specs:
        raise ConfigError("aggregation needs at least one G-filter spec")
    if biases is None:
        biases = [None] * len(specs)
    scans = [gfilter_scan(vmap, s, w, b) for s, w, b in zip(specs, weights, biases)]
    eps = {t.shape[1] for t in scans}
    if len(eps) != 1:
        raise ShapeError(f"every G-filter shape needs the same instance count, got {sorted(eps)}")
    joined = scans[0] if len(scans) == 1 else concat_zero_fill(scans)
    return average_over_filters(joined)


def encode_attention(vbar: Tensor, fc1: Linear, fc2: Linear) -> Tensor:
    """Gates ``sigmoid(fc2(relu(fc1(vbar))))`` for [B,Cg] group signals."""
    if vbar.shape[1] != fc1.weight.shape[1]:
        raise ShapeError(
            f"{vbar.shape[1]} group signals but the encoder expects {fc1.weight.shape[1]}"
        )
    return sigmoid(fc2(relu(fc1(vbar))))


def apply_attention(u: Tensor, s: Tensor) -> Tensor:
    """Re-weight channels: ``out[b,c] = s[b,c] * u[b,c]``."""
    return scale_channels(u, s)


def ini_param_count(
    channels: int,
    specs: Sequence[GFilterSpec],
    rows: int,
    cols: int,
    reduction: int,
    batchnorm: bool = True,
) -> int:
    """Closed-form parameter count of one InI block."""
    eps = filter_count(channels, reduction)
    h = hidden_units(channels, reduction)
    n, m = grouping_shape(specs, rows, cols)
    cg = n * m
    gfilters = eps * sum(s.a * s.b for s in specs) + eps * len(specs)
    encoder = cg * h + h + h * channels + channels
    return gfilters + encoder + (2 if batchnorm else 0)


# -- modules ------------------------------------------------------------------------------

class GroupEncoder(Module):
    """Grouping map -> per-channel gates, shared by the plain and joint blocks."""

    def __init__(
        self,
        channels: int,
        map_shape: tuple[int, int],
        specs: Sequence[GFilterSpec],
        reduction: int,
        rng: np.random.Generator,
        use_batchnorm: bool = True,
    ):
        rows, cols = map_shape
        self.channels = channels
        self.map_shape = (rows, cols)
        self._specs = tuple(specs)
        self.eps = filter_count(channels, reduction)
        self.hidden = hidden_units(channels, reduction)
        self.weights = [
            Parameter(fan_in_uniform(rng, (self.eps, 1, s.a, s.b), s.a * s.b)) for s in specs
        ]
        self.biases = [Parameter(np.zeros(self.eps), decay=False) for _ in specs]
        self.group_shape = grouping_shape(specs, rows, cols)
        self.num_groups = self.group_shape[0] * self.group_shape[1]
        self.bn = BatchNorm(1) if use_batchnorm else None
        self.fc1 = Linear(self.num_groups, self.hidden, rng)
        self.fc2 = Linear(self.hidden, channels, rng)
        self.force_open = False  # test-only: gates forced to exactly 1

    @property
    def specs(self) -> tuple[GFilterSpec, ...]:
        return self._specs

    def grouping_map(self, vmap: Tensor) -> Tensor:
        if vmap.shape[1:] != (1,) + self.map_shape:
            raise ShapeError(f"expected a [B,1,{self.map_shape[0]},{self.map_shape[1]}] map, got {vmap.shape}")
        return aggregate_multi_shape(vmap, self._specs, self.weights, self.biases)

    def group_signals(self, vmap: Tensor) -> Tensor:
        g = self.grouping_map(vmap)
        if self.bn is not None:
            g = self.bn(g)
        return reshape(g, (g.shape[0], self.num_groups))

    def forward(self, vmap: Tensor) -> Tensor:
        s = encode_attention(self.group_signals(vmap), self.fc1, self.fc2)
        if self.force_open:
            s = s * 0.0 + 1.0
        return s


def _resolve_specs(config: InnerImageConfig, rows: int, cols: int) -> list[GFilterSpec]:
    specs = effective_specs(config.filter_set(), rows, cols)
    if not config.aggregation and len(specs) != 1:
        raise ConfigError(
            f"aggregation is off but {config.filter_set().name!r} keeps {len(specs)} shapes on a {rows}x{cols} map"
        )
    return specs


class InnerImaging(Module):
    """Plain InI block: squeeze, fold, group, encode and re-weight ``U``."""

    def __init__(self, channels: int, config: InnerImageConfig, rng: np.random.Generator, family: str = "generic"):
        if config.fold:
            rows, cols = config.fold_shape or default_fold_shape(channels, family)
        else:
            rows, cols = 1, channels
        if rows * cols != channels:
            raise ConfigError(f"fold shape {rows}x{cols} does not hold {channels} channels")
        self.config = config
        self.encoder = GroupEncoder(
            channels, (rows, cols), _resolve_specs(config, rows, cols), config.reduction, rng, config.batchnorm
        )

    @property
    def map_shape(self) -> tuple[int, int]:
        return self.encoder.map_shape

    def inner_imaged_map(self, u: Tensor) -> Tensor:
        return fold(squeeze(u), *self.map_shape)

    def gates(self, u: Tensor) -> Tensor:
        return self.encoder(self.inner_imaged_map(u))

    def forward(self, u: Tensor) -> Tensor:
        return apply_attention(u, self.gates(u))

    def expected_parameters(self) -> int:
        rows, cols = self.map_shape
        return ini_param_count(
            self.encoder.channels, self.encoder.specs, rows, cols, self.config.reduction, self.config.batchnorm
        )


class SqueezeExcitation(Module):
    """Plain channel attention: squeeze, two-layer encoder, sigmoid gates."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        h = hidden_units(channels, reduction)
        self.fc1 = Linear(channels, h, rng)
        self.fc2 = Linear(h, channels, rng)

    def gates(self, u: Tensor) -> Tensor:
        return encode_attention(squeeze(u), self.fc1, self.fc2)

    def forward(self, u: Tensor) -> Tensor:
        return apply_attention(u, self.gates(u))
