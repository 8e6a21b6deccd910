"""Grouping-filter shapes, the named preset families, and map-shape rules."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

__all__ = [
    "ConfigError",
    "GFilterSpec",
    "GFilterSet",
    "DILATED",
    "preset",
    "preset_names",
    "effective_specs",
    "discarded_specs",
    "filter_count",
    "hidden_units",
    "default_fold_shape",
]


class ConfigError(ValueError):
    """Raised for configurations that cannot be built."""


@dataclass(frozen=True)
class GFilterSpec:
    a: int
    b: int
    dilation: int = 1

    def __post_init__(self):
        if self.a < 1 or self.b < 1 or self.dilation < 1:
            raise ConfigError(f"invalid G-filter {self.a}x{self.b} (dilation {self.dilation})")

    @property
    def extent(self) -> tuple[int, int]:
        return self.dilation * (self.a - 1) + 1, self.dilation * (self.b - 1) + 1

    def fits(self, rows: int, cols: int) -> bool:
        ea, eb = self.extent
        return ea <= rows and eb <= cols

    def output_shape(self, rows: int, cols: int) -> tuple[int, int]:
        ea, eb = self.extent
        return rows - ea + 1, cols - eb + 1

    def __str__(self) -> str:
        return f"{self.a}x{self.b}" + (f"/d{self.dilation}" if self.dilation > 1 else "")


@dataclass(frozen=True)
class GFilterSet:
    name: str
    specs: tuple[GFilterSpec, ...]

    @property
    def max_rows(self) -> int:
        return max(s.a for s in self.specs)


DILATED = GFilterSpec(5, 5, dilation=2)

_sq = lambda *ks: tuple(GFilterSpec(k, k) for k in ks)  # noqa: E731

_FIXED: dict[str, tuple[GFilterSpec, ...]] = {
    "square-1": _sq(3),
    "square-2": _sq(1, 3),
    "square-3": _sq(1, 3, 5),
    "square-4": _sq(1, 2, 3, 5),
    "square-5": _sq(1, 2, 3, 4, 5),
    "mix-1": _sq(3),
    "mix-2": (GFilterSpec(1, 5), GFilterSpec(3, 3)),
    "mix-3": (GFilterSpec(1, 5), GFilterSpec(3, 3), GFilterSpec(5, 1)),
    "mix-4": (GFilterSpec(1, 1), GFilterSpec(1, 5), GFilterSpec(3, 3), GFilterSpec(5, 1)),
    "mix-5": (GFilterSpec(1, 1), GFilterSpec(1, 5), GFilterSpec(3, 3), GFilterSpec(5, 1), GFilterSpec(5, 5)),
    "simple-1": (GFilterSpec(2, 1),),
    "simple-3": (GFilterSpec(1, 1), GFilterSpec(2, 1), GFilterSpec(2, 2)),
    # plain channel-wise attention expressed as a one-hot grouping
    "onehot": (GFilterSpec(1, 1),),
}

_SLENDER = re.compile(r"^(horizon|vertical)-(\d+)$")


def preset_names() -> list[str]:
    """Fixed preset ids; ``horizon-n``/``vertical-n`` accept any n >= 1 and every id takes a ``-d`` suffix."""
    return sorted(_FIXED) + ["horizon-n", "vertical-n"]


def preset(name: str) -> GFilterSet:
    """Resolve a preset id such as ``"square-3"`` or ``"mix-5-d"``."""
    base, dilated = name, False
    if name.endswith("-d"):
        base, dilated = name[:-2], True
    if base in ("d", ""):
        raise ConfigError("the dilated G-filter can only be attached to another set, e.g. 'square-3-d'")
    if base in _FIXED:
        specs = _FIXED[base]
    else:
        m = _SLENDER.match(base)
        if not m or int(m.group(2)) < 1:
            raise ConfigError(f"unknown G-filter preset {name!r}")
        n = int(m.group(2))
        if m.group(1) == "horizon":
            specs = tuple(GFilterSpec(1, k) for k in range(1, n + 1))
        else:
            specs = tuple(GFilterSpec(k, 1) for k in range(1, n + 1))
    if dilated:
        specs = specs + (DILATED,)
    return GFilterSet(name, specs)


def effective_specs(gset: GFilterSet, rows: int, cols: int) -> list[GFilterSpec]:
    """Specs whose receptive field fits a ``rows x cols`` map, in preset order."""
    kept = [s for s in gset.specs if s.fits(rows, cols)]
    if not kept:
        raise ConfigError(
            f"every G-filter of {gset.name!r} exceeds the {rows}x{cols} inner-imaged map"
        )
    return kept


def discarded_specs(gset: GFilterSet, rows: int, cols: int) -> list[GFilterSpec]:
    return [s for s in gset.specs if not s.fits(rows, cols)]


def filter_count(channels: int, reduction: int) -> int:
    """Number of G-filter instances per shape: ``max(1, C // t)``."""
    return max(1, channels // reduction)


hidden_units = filter_count


def _most_square(total: int, even_rows: bool = False) -> tuple[int, int]:
    best = None
    for n in range(1, int(math.isqrt(total)) + 1):
        if total % n:
            continue
        for rows in (n, total // n):
            if even_rows and rows % 2:
                continue
            cols = total // rows
            key = (abs(rows - cols), rows)
            if best is None or key < best[0]:
                best = (key, (rows, cols))
    if best is None:
        raise ConfigError(f"no fold of {total} signals has an even row count")
    return best[1]


def default_fold_shape(total: int, family: str = "generic", even_rows: bool = False) -> tuple[int, int]:
    """Default ``(rows, cols)`` for folding ``total`` channel signals.

    ``total`` is C for a plain block and 2C for the joint residual map. The
    family rules fix one side (16 columns generically, 20 rows for wide
    networks, 8 rows for all-convolutional ones); when that does not divide
    ``total``, or would leave a single row, the most-square factorisation
    (rows <= cols) is used instead.
    """
    if family == "wrn":
        rows = 20
    elif family == "allcnn":
        rows = 8
    else:
        rows = total // 16 if total % 16 == 0 else 0
    if rows >= 2 and total % rows == 0 and not (even_rows and rows % 2):
        return rows, total // rows
    return _most_square(total, even_rows)
