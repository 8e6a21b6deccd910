"""Flat ``key = value`` experiment configuration.

Lines starting with ``#`` are comments. Unknown keys are rejected, and every
key has a default, listed by :func:`describe`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import get_type_hints

from .backbones import ArchDescriptor
from .block import InnerImageConfig
from .gfilters import ConfigError
from .training import TrainConfig

__all__ = ["ExperimentConfig", "parse_config", "load_config", "apply_overrides", "describe"]


def _doc(text: str, default):
    return field(default=default, metadata={"doc": text})


@dataclass(frozen=True)
class ExperimentConfig:
    family: str = _doc("allcnn | preact_resnet | wrn", "preact_resnet")
    in_channels: int = _doc("input image channels", 3)
    image_size: int = _doc("input height and width", 16)
    num_classes: int = _doc("number of classes", 10)
    widths: str = _doc("comma-separated stage widths", "16,32,64")
    blocks_per_stage: int = _doc("residual units per stage", 1)
    widen: int = _doc("width multiplier", 1)
    attention: str = _doc("none | se | ini", "ini")
    preset: str = _doc("G-filter preset id, '-d' attaches the dilated filter", "square-3")
    fold_rows: int = _doc("inner-imaged map rows, 0 = family default", 0)
    fold_cols: int = _doc("inner-imaged map cols, 0 = family default", 0)
    reduction: int = _doc("reduction ratio t", 16)
    aggregation: bool = _doc("aggregate multi-shape G-filters", True)
    fold: bool = _doc("fold channel signals into a 2-D map", True)
    dilated: bool = _doc("attach the dilated 5x5 (s=2) G-filter", False)
    ini_batchnorm: bool = _doc("batch-normalise the grouping map", True)
    joint: bool = _doc("model identity and residual signals jointly", True)
    joint_map: str = _doc("stacked | alt_folded", "alt_folded")
    se_reduction: int = _doc("reduction ratio of the SE baseline", 16)
    spatial: bool = _doc("spatial attention before the channel gates", False)
    spatial_tau: int = _doc("number of spatial maps", 1)
    epochs: int = _doc("training epochs", 400)
    batch_size: int = _doc("mini-batch size", 128)
    base_lr: float = _doc("initial learning rate", 0.1)
    momentum: float = _doc("Nesterov momentum", 0.9)
    nesterov: bool = _doc("use Nesterov momentum", True)
    lr_drops: str = _doc("comma-separated epoch fractions where lr is divided by 10", "0.5,0.75,0.9")
    weight_decay: float = _doc("L2 penalty on conv/FC weights", 5e-4)
    seed: int = _doc("seed for init, shuffling and augmentation", 0)
    augment: str = _doc("none | flip_translate", "flip_translate")
    dataset: str = _doc("synthetic | raw_u8 | csv | cifar", "synthetic")
    train_path: str = _doc("training file (relative to $INI_DATA_ROOT if set)", "")
    test_path: str = _doc("test file", "")
    synth_train: int = _doc("synthetic training images", 4000)
    synth_test: int = _doc("synthetic test images", 1000)
    synth_seed: int = _doc("seed of the synthetic dataset", 1234)
    synth_noise: float = _doc("noise level of the synthetic dataset", 0.15)
    out_dir: str = _doc("directory for metrics and checkpoints", "runs/default")
    metrics_log: str = _doc("metrics file name inside out_dir", "metrics.jsonl")
    checkpoint: str = _doc("checkpoint file name inside out_dir", "checkpoint.bin")

    def descriptor(self) -> ArchDescriptor:
        fold_shape = (self.fold_rows, self.fold_cols) if self.fold_rows and self.fold_cols else None
        ini = InnerImageConfig(
            preset=self.preset, fold_shape=fold_shape, reduction=self.reduction,
            aggregation=self.aggregation, fold=self.fold, dilated=self.dilated, batchnorm=self.ini_batchnorm,
        )
        return ArchDescriptor(
            family=self.family, in_channels=self.in_channels, image_size=self.image_size,
            num_classes=self.num_classes, widths=tuple(int(w) for w in self.widths.split(",")),
            blocks_per_stage=self.blocks_per_stage, widen=self.widen, attention=self.attention, ini=ini,
            joint=self.joint, joint_map=self.joint_map, se_reduction=self.se_reduction,
            spatial=self.spatial, spatial_tau=self.spatial_tau,
        )

    def train_config(self) -> TrainConfig:
        drops = tuple(float(f) for f in self.lr_drops.split(",") if f.strip())
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, base_lr=self.base_lr, momentum=self.momentum,
            nesterov=self.nesterov, lr_drops=drops, weight_decay=self.weight_decay, seed=self.seed,
            augment=self.augment,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


_TYPES = get_type_hints(ExperimentConfig)


def _coerce(key: str, raw: str):
    typ = _TYPES[key]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ.__name__}") from None


def apply_overrides(cfg: ExperimentConfig, pairs: dict[str, str]) -> ExperimentConfig:
    unknown = sorted(set(pairs) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return replace(cfg, **{k: _coerce(k, v) for k, v in pairs.items()})


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return apply_overrides(base or ExperimentConfig(), pairs)


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    cfg = parse_config(Path(path).read_text()) if path else ExperimentConfig()
    return apply_overrides(cfg, overrides or {})


def describe() -> list[tuple[str, str, str]]:
    return [(f.name, _fmt(f.default), f.metadata.get("doc", "")) for f in fields(ExperimentConfig)]
