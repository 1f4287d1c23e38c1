"""Toy three-level convolutional feature extractor.

Stem: 7x7 conv stride 2 + 3x3 max pool stride 2 (overall stride 4).  Level 1
keeps that resolution; levels 2 and 3 each open with a stride-2 3x3 conv, so
the three outputs sit at strides 4, 8 and 16.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .ops import conv2d, max_pool2d
from .tensor import Parameter, ShapeError, Tensor, relu

TOY_CHANNELS = (16, 32, 64)
WIDE_CHANNELS = (256, 512, 1024)


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, int, int] = TOY_CHANNELS
    blocks_per_level: tuple[int, int, int] = (1, 1, 1)
    stem_channels: int = 8
    seed: int = 0
    stem_stride: int = field(default=4, init=False)

    def __post_init__(self):
        c = tuple(int(x) for x in self.channels)
        b = tuple(int(x) for x in self.blocks_per_level)
        if len(c) != 3 or any(x <= 0 for x in c):
            raise ValueError(f"channels must be three positive ints, got {self.channels}")
        if not c[0] < c[1] < c[2]:
            raise ValueError(f"channels must be strictly increasing, got {c}")
        if len(b) != 3 or any(x < 1 for x in b):
            raise ValueError(f"blocks_per_level must be three ints >= 1, got {self.blocks_per_level}")
        object.__setattr__(self, "channels", c)
        object.__setattr__(self, "blocks_per_level", b)

    @classmethod
    def wide(cls, seed: int = 0) -> "BackboneConfig":
        """Channel widths of ResNet conv2_x..conv4_x outputs."""
        return cls(channels=WIDE_CHANNELS, stem_channels=64, seed=seed)

    @classmethod
    def from_file(cls, path) -> "BackboneConfig":
        """Read ``key = value`` lines; keys: channels, blocks_per_level, stem_channels, seed."""
        values = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key in ("channels", "blocks_per_level"):
                values[key] = tuple(int(v) for v in val.replace(",", " ").split())
            elif key in ("seed", "stem_channels"):
                values[key] = int(val)
            else:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        return cls(**values)


class FeatureLevels(NamedTuple):
    f1: Tensor
    f2: Tensor
    f3: Tensor


def kaiming(rng: np.random.Generator, shape: tuple[int, ...], dtype=np.float64) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Backbone:
    def __init__(self, config: BackboneConfig = BackboneConfig(), dtype=np.float64, prefix: str = "backbone"):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, Parameter] = {}

        def add(name, data):
            self.params[name] = Parameter(data, f"{prefix}.{name}", dtype=dtype)
            return self.params[name]

        add("stem.weight", kaiming(rng, (config.stem_channels, 3, 7, 7), dtype))
        add("stem.bias", np.zeros(config.stem_channels, dtype))
        self.levels: list[list[tuple[Parameter, Parameter, int]]] = []
        cin = config.stem_channels
        for lvl, (cout, nblocks) in enumerate(zip(config.channels, config.blocks_per_level), 1):
            blocks = []
            for j in range(nblocks):
                w = add(f"level{lvl}.conv{j}.weight", kaiming(rng, (cout, cin, 3, 3), dtype))
                b = add(f"level{lvl}.conv{j}.bias", np.zeros(cout, dtype))
                stride = 2 if (j == 0 and lvl > 1) else 1
                blocks.append((w, b, stride))
                cin = cout
            self.levels.append(blocks)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def __call__(self, image: Tensor) -> FeatureLevels:
        return backbone_forward(image, self)


def backbone_forward(image: Tensor, backbone: Backbone) -> FeatureLevels:
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"backbone expects (N, 3, H, W) input, got {image.shape}")
    h, w = image.shape[2:]
    if h % 16 or w % 16:
        raise ShapeError(f"input extents {h}x{w} must be divisible by 16")
    p = backbone.params
    x = relu(conv2d(image, p["stem.weight"], p["stem.bias"], stride=2, padding=3))
    x = max_pool2d(x, 3, 2, padding=1)
    outs = []
    for blocks in backbone.levels:
        for weight, bias, stride in blocks:
            x = relu(conv2d(x, weight, bias, stride=stride, padding=1))
        outs.append(x)
    return FeatureLevels(*outs)


def select_level(levels: FeatureLevels, i: int) -> Tensor:
    if i not in (1, 2, 3):
        raise ValueError(f"level index must be 1, 2 or 3, got {i}")
    return levels[i - 1]


def random_level(seed: int) -> int:
    """Seeded uniform choice of a level, for hard-attention baselines."""
    return int(np.random.default_rng(seed).integers(1, 4))
