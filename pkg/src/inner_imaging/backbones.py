"""Small host networks: all-convolutional, pre-activation ResNet and wide ResNet."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .block import InnerImageConfig, InnerImaging, SqueezeExcitation
from .gfilters import ConfigError
from .nn import BatchNorm, Conv2d, Linear, Module
from .residual import JOINT_MAPS, JointInnerImaging, PreActBlock
from .spatial import SpatialAttention
from .tensor import NonFiniteError, ShapeError, Tensor, as_tensor, global_avg_pool, relu

__all__ = ["FAMILIES", "ATTENTIONS", "ArchDescriptor", "Network", "build"]

FAMILIES = ("allcnn", "preact_resnet", "wrn")
ATTENTIONS = ("none", "se", "ini")


@dataclass(frozen=True)
class ArchDescriptor:
    family: str = "preact_resnet"
    in_channels: int = 3
    image_size: int = 32
    num_classes: int = 10
    widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    widen: int = 1
    attention: str = "none"
    ini: InnerImageConfig = field(default_factory=InnerImageConfig)
    joint: bool = True
    joint_map: str = "alt_folded"
    se_reduction: int = 16
    spatial: bool = False
    spatial_tau: int = 1

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.attention not in ATTENTIONS:
            raise ConfigError(f"unknown attention {self.attention!r}; expected one of {ATTENTIONS}")
        if self.joint_map not in JOINT_MAPS:
            raise ConfigError(f"unknown joint_map {self.joint_map!r}")
        if not self.widths or min(self.widths) < 1 or self.blocks_per_stage < 1 or self.widen < 1:
            raise ConfigError("widths, blocks_per_stage and widen must be positive")
        if self.image_size % (2 ** (len(self.widths) - 1)):
            raise ConfigError(f"image size {self.image_size} cannot be halved {len(self.widths) - 1} times")
        if self.spatial and self.family == "allcnn":
            raise ConfigError("spatial attention is only wired into residual families")

    def stage_channels(self) -> list[int]:
        return [w * self.widen for w in self.widths]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["ini"] = self.ini.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["ini"] = InnerImageConfig.from_dict(d["ini"])
        return cls(**d)


class _AllCNNStage(Module):
    def __init__(self, cin, cout, rng, attention, desc: ArchDescriptor):
        self.conv_a = Conv2d(cin, cout, 3, rng, padding=1)
        self.bn_a = BatchNorm(cout)
        self.conv_b = Conv2d(cout, cout, 3, rng, stride=2, padding=1)
        self.bn_b = BatchNorm(cout)
        if attention == "se":
            self.attention = SqueezeExcitation(cout, desc.se_reduction, rng)
        elif attention == "ini":
            self.attention = InnerImaging(cout, desc.ini, rng, family="allcnn")
        else:
            self.attention = None

    def forward(self, x):
        x = relu(self.bn_a(self.conv_a(x)))
        x = relu(self.bn_b(self.conv_b(x)))
        if self.attention is not None:
            x = self.attention(x)
        return x


class Network(Module):
    """Sequential host network; ``forward`` returns [B, classes] logits."""

    def __init__(self, desc: ArchDescriptor, rng: np.random.Generator):
        desc.validate()
        self.descriptor = desc
        chans = desc.stage_channels()
        layers: list[Module] = []
        if desc.family == "allcnn":
            cin = desc.in_channels
            for c in chans:
                layers.append(_AllCNNStage(cin, c, rng, desc.attention, desc))
                cin = c
            self.head = Conv2d(cin, desc.num_classes, 1, rng, bias=True)
            self.final_bn = None
        else:
            stem_out = desc.widths[0]
            self.stem = Conv2d(desc.in_channels, stem_out, 3, rng, padding=1)
            cin = stem_out
            for i, c in enumerate(chans):
                for k in range(desc.blocks_per_stage):
                    stride = 2 if (i > 0 and k == 0) else 1
                    layers.append(
                        PreActBlock(
                            cin, c, stride, rng,
                            attention=desc.attention, ini=desc.ini, joint=desc.joint,
                            joint_map=desc.joint_map, se_reduction=desc.se_reduction,
                            spatial=desc.spatial, spatial_tau=desc.spatial_tau,
                            family="wrn" if desc.family == "wrn" else "generic",
                        )
                    )
                    cin = c
            self.final_bn = BatchNorm(cin)
            self.head = Linear(cin, desc.num_classes, rng)
        self.layers = layers

    def _named_stages(self):
        if hasattr(self, "stem"):
            yield "stem", self.stem
        for i, layer in enumerate(self.layers):
            yield f"layers.{i}", layer

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != (self.descriptor.in_channels, self.descriptor.image_size, self.descriptor.image_size):
            d = self.descriptor
            raise ShapeError(f"input {x.shape} does not match [B,{d.in_channels},{d.image_size},{d.image_size}]")
        for name, stage in self._named_stages():
            x = stage(x)
            _finite(x, name)
        if self.descriptor.family == "allcnn":
            logits = global_avg_pool(self.head(x))
        else:
            logits = self.head(global_avg_pool(relu(self.final_bn(x))))
        return _finite(logits, "head")

    def attention_modules(self) -> list[Module]:
        return [
            m for m in self.modules()
            if isinstance(m, (InnerImaging, JointInnerImaging, SqueezeExcitation, SpatialAttention))
        ]


def _finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite activations after {where}")
    return t


def build(desc: ArchDescriptor, seed: int = 0) -> Network:
    return Network(desc, np.random.default_rng(seed))
