"""Model configuration, stage-shape propagation and the flat-text config format.

Down-sampling uses k=3 convolutions with padding 1, so an extent n under
stride 2 becomes ceil(n/2) (no voxel dropped); up-sampling mirrors this
by cropping the deconvolution output back to the encoder stage extent.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .errors import ConfigError

Triple = tuple[int, int, int]


def _ceil_div(n: int, s: int) -> int:
    return -(-n // s)


@dataclass
class ModelConfig:
    """Everything that determines the network."""

    crop_size: Triple
    embed_dim: int
    stage_heads: tuple[int, int, int, int]
    embed_strides: tuple[Triple, Triple]
    down_strides: tuple[Triple, Triple, Triple]
    volume_size: Triple
    num_classes: int
    in_channels: int = 1
    mlp_ratio: float = 4.0
    blocks: tuple[int, ...] = (2, 2, 6, 2, 2)  # enc0, enc1, bottleneck, dec2, dec1

    @property
    def stage_channels(self) -> tuple[int, int, int, int]:
        c = self.embed_dim
        return (c, 2 * c, 4 * c, 8 * c)

    @property
    def embed_reduction(self) -> Triple:
        a, b = self.embed_strides
        return tuple(x * y for x, y in zip(a, b))

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be positive")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        if len(self.stage_heads) != 4:
            raise ConfigError("stage_heads must list 4 head counts")
        for c, h in zip(self.stage_channels, self.stage_heads):
            if h < 1 or c % h:
                raise ConfigError(f"stage channels {c} not divisible by heads {h}")
        for tri in list(self.embed_strides) + list(self.down_strides):
            if any(s not in (1, 2) for s in tri):
                raise ConfigError(f"stride components must be 1 or 2, got {tri}")
        if any(v < 1 for v in self.volume_size):
            raise ConfigError("volume_size components must be positive")
        if any(e % 2 for e in self.blocks[:2] + self.blocks[3:]):
            raise ConfigError("encoder/decoder blocks pair one plain and one shifted layer")
        for st in stage_plan(self):
            if any(e < 1 for e in st.extents):
                raise ConfigError(
                    f"stage {st.index} ({st.role}) has non-positive extent {st.extents}: "
                    "over-down-sampling"
                )


@dataclass
class StageShape:
    index: int
    extents: Triple
    channels: int
    role: str  # encoder | bottleneck | decoder


def _apply_stride(extents: Triple, stride: Triple) -> Triple:
    # k=3 / pad 1 convolution: stride 1 keeps n, stride 2 gives ceil(n/2)
    return tuple(n if s == 1 else _ceil_div(n, s) for n, s in zip(extents, stride))


def stage_plan(cfg: ModelConfig) -> list[StageShape]:
    """Extents and widths of the four scales s0..s3 (s3 is the bottleneck)."""
    ext = tuple(cfg.crop_size)
    for s in cfg.embed_strides:
        ext = _apply_stride(ext, s)
    plan = [StageShape(0, ext, cfg.stage_channels[0], "encoder")]
    for i, s in enumerate(cfg.down_strides):
        ext = _apply_stride(ext, s)
        role = "bottleneck" if i == 2 else "encoder"
        plan.append(StageShape(i + 1, ext, cfg.stage_channels[i + 1], role))
    return plan


def mirror_plan(cfg: ModelConfig) -> list[StageShape]:
    """Decoder stages, mirroring encoder extents exactly: s2, s1, s0."""
    enc = stage_plan(cfg)
    return [
        StageShape(2, enc[2].extents, enc[2].channels, "decoder"),
        StageShape(1, enc[1].extents, enc[1].channels, "decoder"),
        StageShape(0, enc[0].extents, enc[0].channels, "decoder"),
    ]


# ---------------------------------------------------------------------------
# presets (crop sizes, strides and head counts of the three reference setups)

PRESETS: dict[str, ModelConfig] = {
    "tumor": ModelConfig(
        crop_size=(128, 128, 128),
        embed_dim=96,
        stage_heads=(3, 6, 12, 24),
        embed_strides=((2, 2, 2), (2, 2, 2)),
        down_strides=((2, 2, 2), (2, 2, 2), (2, 2, 2)),
        volume_size=(4, 4, 4),
        num_classes=4,
        in_channels=4,
    ),
    "synapse": ModelConfig(
        crop_size=(128, 128, 64),
        embed_dim=192,
        stage_heads=(6, 12, 24, 48),
        embed_strides=((2, 2, 2), (2, 2, 1)),
        down_strides=((2, 2, 2), (2, 2, 2), (2, 2, 2)),
        volume_size=(4, 4, 4),
        num_classes=9,
        in_channels=1,
    ),
    "acdc": ModelConfig(
        crop_size=(160, 160, 14),
        embed_dim=96,
        stage_heads=(3, 6, 12, 24),
        embed_strides=((2, 2, 1), (2, 2, 1)),
        down_strides=((2, 2, 1), (2, 2, 2), (2, 2, 2)),
        volume_size=(4, 4, 4),
        num_classes=4,
        in_channels=1,
    ),
    # desk-scale configuration used by the training and ensembling suites
    "toy": ModelConfig(
        crop_size=(32, 32, 16),
        embed_dim=16,
        stage_heads=(1, 2, 4, 8),
        embed_strides=((2, 2, 2), (1, 1, 1)),
        down_strides=((2, 2, 2), (2, 2, 2), (1, 1, 1)),
        volume_size=(4, 4, 4),
        num_classes=3,
        in_channels=1,
        blocks=(2, 2, 6, 2, 2),
    ),
}


def micro_config() -> ModelConfig:
    """Smallest config that still exercises every stage; used by the
    end-to-end gradcheck and CLI verification runs."""
    return ModelConfig(
        crop_size=(6, 4, 4),
        embed_dim=4,
        stage_heads=(1, 1, 2, 2),
        embed_strides=((2, 2, 2), (1, 1, 1)),
        down_strides=((2, 2, 2), (1, 1, 1), (1, 1, 1)),
        volume_size=(2, 2, 2),
        num_classes=2,
        blocks=(2, 2, 2, 2, 2),
    )


# ---------------------------------------------------------------------------
# flat-text config files: `key = value`, triples comma-separated, lists of
# triples separated by semicolons

_TRIPLE_KEYS = {"crop_size", "volume_size"}
_TRIPLE_LIST_KEYS = {"embed_strides", "down_strides"}
_INT_TUPLE_KEYS = {"stage_heads", "blocks"}
_INT_KEYS = {"embed_dim", "num_classes", "in_channels"}
_FLOAT_KEYS = {"mlp_ratio"}


def _parse_triple(text: str) -> Triple:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"expected a comma-separated triple, got {text!r}")
    return tuple(int(p) for p in parts)


def parse_config(text: str) -> ModelConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        try:
            if key in _TRIPLE_KEYS:
                values[key] = _parse_triple(val)
            elif key in _TRIPLE_LIST_KEYS:
                values[key] = tuple(_parse_triple(p) for p in val.split(";"))
            elif key in _INT_TUPLE_KEYS:
                values[key] = tuple(int(p) for p in val.split(","))
            elif key in _INT_KEYS:
                values[key] = int(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            else:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        except ValueError as e:
            raise ConfigError(f"line {lineno}: {e}") from e
    required = {"crop_size", "embed_dim", "stage_heads", "embed_strides",
                "down_strides", "volume_size", "num_classes"}
    missing = required - values.keys()
    if missing:
        raise ConfigError(f"config missing keys: {sorted(missing)}")
    cfg = ModelConfig(**values)
    cfg.validate()
    return cfg


def serialize_config(cfg: ModelConfig) -> str:
    def tri(t):
        return ", ".join(str(x) for x in t)

    lines = [
        f"crop_size = {tri(cfg.crop_size)}",
        f"embed_dim = {cfg.embed_dim}",
        f"stage_heads = {', '.join(str(h) for h in cfg.stage_heads)}",
        f"embed_strides = {'; '.join(tri(t) for t in cfg.embed_strides)}",
        f"down_strides = {'; '.join(tri(t) for t in cfg.down_strides)}",
        f"volume_size = {tri(cfg.volume_size)}",
        f"num_classes = {cfg.num_classes}",
        f"in_channels = {cfg.in_channels}",
        f"mlp_ratio = {cfg.mlp_ratio}",
        f"blocks = {', '.join(str(b) for b in cfg.blocks)}",
    ]
    return "\n".join(lines) + "\n"


def resolve_config(name_or_path: str) -> ModelConfig:
    """A preset name or a path to a flat-text config file."""
    if name_or_path in PRESETS:
        cfg = PRESETS[name_or_path]
        cfg.validate()
        return cfg
    try:
        with open(name_or_path, "r", encoding="utf-8") as f:
            return parse_config(f.read())
    except OSError as e:
        raise ConfigError(f"unknown preset or unreadable config file: {name_or_path}") from e
