"""Joint residual/identity modelling for pre-activation residual units."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .block import (
    GroupEncoder,
    InnerImageConfig,
    InnerImaging,
    SqueezeExcitation,
    aggregate_multi_shape,
    apply_attention,
    squeeze,
)
from .gfilters import ConfigError, GFilterSpec, default_fold_shape, effective_specs
from .nn import BatchNorm, Conv2d, Module
from .spatial import SpatialAttention
from .tensor import ShapeError, Tensor, concat, relu, reshape

__all__ = [
    "JOINT_MAPS",
    "stack_signals",
    "alt_fold",
    "simplified_scan",
    "JointInnerImaging",
    "PreActBlock",
]

JOINT_MAPS = ("stacked", "alt_folded")


def stack_signals(u_hat: Tensor, x_hat: Tensor) -> Tensor:
    """[B,C] residual and identity signals -> [B,1,2,C], residual row on top."""
    if u_hat.shape != x_hat.shape:
        raise ShapeError(f"residual signals {u_hat.shape} and identity signals {x_hat.shape} differ")
    B, C = u_hat.shape
    return reshape(concat([u_hat, x_hat], axis=1), (B, 1, 2, C))


def alt_fold(u_hat: Tensor, x_hat: Tensor, rows: int, cols: int) -> Tensor:
    """Fold both signal rows into [B,1,rows,cols] with alternating rows.

    Row ``2k`` holds identity chunk ``k`` and row ``2k+1`` the residual chunk
    ``k``; chunks are consecutive runs of ``cols`` channels.
    """
    if u_hat.shape != x_hat.shape:
        raise ShapeError(f"residual signals {u_hat.shape} and identity signals {x_hat.shape} differ")
    B, C = u_hat.shape
    if rows % 2 or rows * cols != 2 * C:
        raise ShapeError(f"alternating fold needs an even row count and rows*cols == 2C ({2 * C}), got {rows}x{cols}")
    half = rows // 2
    xs = reshape(x_hat, (B, half, 1, cols))
    us = reshape(u_hat, (B, half, 1, cols))
    return reshape(concat([xs, us], axis=2), (B, 1, rows, cols))


def simplified_scan(
    stacked: Tensor,
    specs: Sequence[GFilterSpec],
    weights: Sequence[Tensor],
    biases: Sequence[Tensor | None] | None = None,
) -> Tensor:
    """Scan a [B,1,2,C] stacked map with filters of at most two rows; return [B,Cg]."""
    for s in specs:
        if s.a > 2:
            raise ConfigError(f"G-filter {s} has more than two rows; the stacked map only allows a <= 2")
    g = aggregate_multi_shape(stacked, specs, weights, biases)
    # two-row filters leave one row, which is already the transposed vector;
    # any one-row filter leaves a two-row map that is flattened row-major
    return reshape(g, (g.shape[0], -1))


class JointInnerImaging(Module):
    """InI gates computed from both residual and identity channel signals."""

    def __init__(
        self,
        channels: int,
        config: InnerImageConfig,
        rng: np.random.Generator,
        joint_map: str = "alt_folded",
        family: str = "generic",
    ):
        if joint_map not in JOINT_MAPS:
            raise ConfigError(f"joint_map must be one of {JOINT_MAPS}, got {joint_map!r}")
        self.joint_map = joint_map
        self.config = config
        gset = config.filter_set()
        if joint_map == "stacked":
            rows, cols = 2, channels
            tall = [s for s in gset.specs if s.a > 2]
            if tall:
                raise ConfigError(
                    f"stacked joint map only accepts G-filters with a <= 2; {gset.name!r} has {', '.join(map(str, tall))}"
                )
        else:
            rows, cols = config.fold_shape or default_fold_shape(2 * channels, family, even_rows=True)
            if rows % 2 or rows * cols != 2 * channels:
                raise ConfigError(f"alternating fold {rows}x{cols} must have even rows and hold {2 * channels} signals")
        specs = effective_specs(gset, rows, cols)
        if not config.aggregation and len(specs) != 1:
            raise ConfigError(f"aggregation is off but {gset.name!r} keeps {len(specs)} shapes")
        self.encoder = GroupEncoder(channels, (rows, cols), specs, config.reduction, rng, config.batchnorm)

    @property
    def map_shape(self) -> tuple[int, int]:
        return self.encoder.map_shape

    def joint_map_of(self, x: Tensor, u: Tensor) -> Tensor:
        u_hat, x_hat = squeeze(u), squeeze(x)
        if self.joint_map == "stacked":
            return stack_signals(u_hat, x_hat)
        return alt_fold(u_hat, x_hat, *self.map_shape)

    def gates(self, x: Tensor, u: Tensor) -> Tensor:
        return self.encoder(self.joint_map_of(x, u))

    def forward(self, x: Tensor, u: Tensor) -> Tensor:
        return apply_attention(u, self.gates(x, u))


class PreActBlock(Module):
    """Pre-activation residual unit with optional channel and spatial attention.

    ``attention`` is ``"none"``, ``"se"`` or ``"ini"``; with ``"ini"`` and
    ``joint=True`` the gates see the identity signals as well. The gate only
    multiplies the residual branch.
    """

    def __init__(
        self,
        cin: int,
        cout: int,
        stride: int,
        rng: np.random.Generator,
        attention: str = "none",
        ini: InnerImageConfig | None = None,
        joint: bool = True,
        joint_map: str = "alt_folded",
        se_reduction: int = 16,
        spatial: bool = False,
        spatial_tau: int = 1,
        family: str = "generic",
    ):
        self.bn1 = BatchNorm(cin)
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, padding=1)
        self.bn2 = BatchNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, padding=1)
        self.shortcut = Conv2d(cin, cout, 1, rng, stride=stride) if (stride != 1 or cin != cout) else None
        self.spatial = SpatialAttention(cout, spatial_tau, rng) if spatial else None
        self.joint = attention == "ini" and joint
        if attention == "none":
            self.attention = None
        elif attention == "se":
            self.attention = SqueezeExcitation(cout, se_reduction, rng)
        elif attention == "ini":
            cfg = ini or InnerImageConfig()
            if self.joint:
                self.attention = JointInnerImaging(cout, cfg, rng, joint_map, family)
            else:
                self.attention = InnerImaging(cout, cfg, rng, family)
        else:
            raise ConfigError(f"unknown attention {attention!r}")

    def residual(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(identity, U)`` where the identity is projected when shapes change."""
        o = relu(self.bn1(x))
        identity = self.shortcut(o) if self.shortcut is not None else x
        u = self.conv2(relu(self.bn2(self.conv1(o))))
        if self.spatial is not None:
            u = self.spatial(u)
        return identity, u

    def gates(self, identity: Tensor, u: Tensor) -> Tensor | None:
        if self.attention is None:
            return None
        if self.joint:
            return self.attention.gates(identity, u)
        return self.attention.gates(u)

    def forward(self, x: Tensor) -> Tensor:
        identity, u = self.residual(x)
        s = self.gates(identity, u)
        if s is not None:
            u = apply_attention(u, s)
        if identity.shape != u.shape:
            raise ShapeError(f"identity {identity.shape} and residual {u.shape} differ")
        return identity + u
