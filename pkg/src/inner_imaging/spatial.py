"""Spatial attention maps over contiguous channel blocks, combined with channel gates."""

from __future__ import annotations

import numpy as np

from .gfilters import ConfigError
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor, concat, reshape, scale_channels, sigmoid

__all__ = [
    "channel_block",
    "compute_spatial_maps",
    "apply_spatial",
    "apply_spatial_then_channel",
    "SpatialAttention",
    "spatial_param_count",
]


def channel_block(c: int, channels: int, tau: int) -> int:
    """Index of the map that multiplies channel ``c`` (0-based)."""
    return (c * tau) // channels


def spatial_param_count(tau: int, kernel: int = 7) -> int:
    """Each map has its own 2->1 convolution with bias."""
    return tau * (2 * kernel * kernel + 1)


def _check_tau(channels: int, tau: int) -> None:
    if tau < 1 or channels % tau:
        raise ConfigError(f"tau={tau} must be positive and divide {channels} channels")


def compute_spatial_maps(u: Tensor, tau: int, convs) -> list[Tensor]:
    """One (0,1)-valued [B,1,H,W] map per channel block.

    Each map comes from the per-position mean and max over its block, passed
    through that block's convolution and a sigmoid.
    """
    B, C, H, W = u.shape
    _check_tau(C, tau)
    if len(convs) != tau:
        raise ShapeError(f"{len(convs)} map convolutions for tau={tau}")
    width = C // tau
    maps = []
    for g, conv in enumerate(convs):
        block = u[:, g * width:(g + 1) * width]
        pooled = concat([block.mean(axis=1, keepdims=True), block.max(axis=1, keepdims=True)], axis=1)
        maps.append(sigmoid(conv(pooled)))
    return maps


def apply_spatial(u: Tensor, maps: list[Tensor]) -> Tensor:
    """``out[b,c] = maps[g(c)][b,0] * u[b,c]`` with contiguous equal channel blocks."""
    B, C, H, W = u.shape
    tau = len(maps)
    _check_tau(C, tau)
    for m in maps:
        if m.shape != (B, 1, H, W):
            raise ShapeError(f"spatial map {m.shape} does not match feature map {u.shape}")
    bank = reshape(concat(maps, axis=1), (B, tau, 1, H, W))
    grouped = reshape(u, (B, tau, C // tau, H, W))
    return reshape(grouped * bank, (B, C, H, W))


def apply_spatial_then_channel(u: Tensor, maps: list[Tensor], s: Tensor) -> Tensor:
    return scale_channels(apply_spatial(u, maps), s)


class SpatialAttention(Module):
    def __init__(self, channels: int, tau: int, rng: np.random.Generator, kernel: int = 7):
        _check_tau(channels, tau)
        self.tau = tau
        self.convs = [Conv2d(2, 1, kernel, rng, padding=kernel // 2, bias=True) for _ in range(tau)]

    def maps(self, u: Tensor) -> list[Tensor]:
        return compute_spatial_maps(u, self.tau, self.convs)

    def forward(self, u: Tensor) -> Tensor:
        return apply_spatial(u, self.maps(u))
