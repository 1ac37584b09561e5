"""Full network assembly: encoder, global-attention bottleneck and decoder
with skip attention, plus deep-supervision heads.

Pipeline (scales s0..s3, channel widths C..8C):
  embed -> block(s0) -> down -> block(s1) -> down            (encoder)
  down -> global blocks(s3) -> up                            (bottleneck)
  [skip attention + block + up] at s2 then s1, expand        (decoder)
Deep-supervision logits are read off the decoder features at s0 (a 1x1x1
head on the final up output) and s1 (head on the decoder block output).
"""

from __future__ import annotations

from dataclasses import dataclass, is_dataclass, fields
from typing import Iterator, Optional

import numpy as np

from . import ops
from .attention import (
    PartitionSpec,
    SkipAttentionParams,
    build_bias,
    clamp_volume,
    skip_attention,
)
from .blocks import (
    BlockParams,
    ConvParams,
    MlpParams,
    DeconvParams,
    EmbedParams,
    NormParams,
    channel_norm,
    conv_layer,
    downsample,
    embed_volume,
    expand_to_logits,
    make_block,
    make_conv,
    make_deconv,
    make_downsample,
    make_embed,
    make_linear,
    make_mlp,
    make_norm,
    mlp,
    trunc_normal,
    transformer_block,
    upsample,
)
from .config import ModelConfig, StageShape, mirror_plan, stage_plan
from .errors import ConfigError, UsageError
from .tensor import Tape, Tensor


@dataclass
class SkipStageParams:
    """Norms, cross attention and MLP of one decoder fusion stage."""

    norm_enc: NormParams
    norm_dec: NormParams
    attn: SkipAttentionParams
    norm_mlp: NormParams
    mlp: MlpParams
    spec: PartitionSpec


@dataclass
class Model:
    config: ModelConfig
    embed: EmbedParams
    enc_blocks: list
    downs: list
    bottleneck: list
    up_bottleneck: DeconvParams
    skips: list
    dec_blocks: list
    ups: list
    head_mid: ConvParams
    head_low: ConvParams
    expand: DeconvParams
    seed: int

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        _collect("", self, out)
        return out


def _collect(prefix: str, obj, out: dict) -> None:
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            out[prefix] = obj
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            _collect(f"{prefix}.{i}" if prefix else str(i), item, out)
        return
    if is_dataclass(obj) and not isinstance(obj, type):
        for f in fields(obj):
            if f.name in ("config", "seed"):
                continue
            val = getattr(obj, f.name)
            if isinstance(val, (Tensor, list, tuple)) or is_dataclass(val):
                _collect(f"{prefix}.{f.name}" if prefix else f.name, val, out)


def _stage_spec(cfg: ModelConfig, extents) -> PartitionSpec:
    return PartitionSpec(clamp_volume(cfg.volume_size, extents))


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Assemble all parameters deterministically from (config, seed)."""
    cfg.validate()
    rng = np.random.default_rng(np.random.Philox(key=seed))
    plan = stage_plan(cfg)
    chans = cfg.stage_channels
    heads = cfg.stage_heads

    embed = make_embed(rng, cfg.in_channels, cfg.embed_dim, cfg.embed_strides, dtype)
    enc_blocks = [
        make_block(rng, chans[i], heads[i], _stage_spec(cfg, plan[i].extents),
                   cfg.blocks[i], cfg.mlp_ratio, global_attn=False, dtype=dtype)
        for i in range(2)
    ]
    downs = [make_downsample(rng, chans[i], cfg.down_strides[i], dtype) for i in range(3)]

    bneck_extents = plan[3].extents
    n_gv_blocks, rem = divmod(cfg.blocks[2], 2)
    if rem:
        raise ConfigError("bottleneck layer count must be even (2 global layers per block)")
    bottleneck = [
        make_block(rng, chans[3], heads[3], PartitionSpec(bneck_extents),
                   2, cfg.mlp_ratio, global_attn=True, dtype=dtype)
        for _ in range(n_gv_blocks)
    ]
    up_bottleneck = make_deconv(rng, chans[3], chans[2], cfg.down_strides[2], dtype=dtype)

    skips, dec_blocks, ups = [], [], []
    for j, stage in enumerate((2, 1)):
        c = chans[stage]
        spec = _stage_spec(cfg, plan[stage].extents)
        skips.append(
            SkipStageParams(
                norm_enc=make_norm(c, dtype),
                norm_dec=make_norm(c, dtype),
                attn=SkipAttentionParams(
                    w_kv=Tensor(trunc_normal(rng, (c, 2 * c), dtype=dtype), requires_grad=True),
                    b_kv=Tensor(np.zeros(2 * c, dtype=dtype), requires_grad=True),
                    heads=heads[stage],
                    bias=build_bias(spec, heads[stage], rng, dtype=dtype),
                ),
                norm_mlp=make_norm(c, dtype),
                mlp=make_mlp(rng, c, cfg.mlp_ratio, dtype),
                spec=spec,
            )
        )
        dec_blocks.append(
            make_block(rng, c, heads[stage], spec, cfg.blocks[3 + j],
                       cfg.mlp_ratio, global_attn=False, dtype=dtype)
        )
        ups.append(make_deconv(rng, c, chans[stage - 1], cfg.down_strides[stage - 1], dtype=dtype))

    head_mid = make_conv(rng, chans[0], cfg.num_classes, (1, 1, 1), (1, 1, 1), (0, 0, 0), dtype)
    head_low = make_conv(rng, chans[1], cfg.num_classes, (1, 1, 1), (1, 1, 1), (0, 0, 0), dtype)
    # the expand kernel overhangs its stride where the stride exceeds 1 so
    # full-resolution logits interpolate across feature-voxel boundaries
    expand_kernel = tuple(2 * s if s > 1 else 1 for s in cfg.embed_reduction)
    expand = make_deconv(rng, chans[0], cfg.num_classes, cfg.embed_reduction,
                         kernel=expand_kernel, dtype=dtype)
    # classification heads start at zero: the model begins as a uniform
    # predictor and the heads pull gradient into the trunk from step one
    for head_w in (expand.w, head_mid.w, head_low.w):
        head_w.data[...] = 0.0

    return Model(
        config=cfg, embed=embed, enc_blocks=enc_blocks, downs=downs,
        bottleneck=bottleneck, up_bottleneck=up_bottleneck, skips=skips,
        dec_blocks=dec_blocks, ups=ups, head_mid=head_mid, head_low=head_low,
        expand=expand, seed=seed,
    )


def _skip_stage(enc: Tensor, dec: Tensor, p: SkipStageParams) -> Tensor:
    """Norm both inputs, cross-attend (decoder queries encoder keys/values),
    residual, then pre-norm MLP with residual."""
    a = skip_attention(channel_norm(enc, p.norm_enc), channel_norm(dec, p.norm_dec),
                       p.attn, p.spec)
    h = ops.add(dec, a)
    return ops.add(h, mlp(channel_norm(h, p.norm_mlp), p.mlp))


def forward(model: Model, x: Tensor, tape: Optional[Tape] = None):
    """Run the network; returns (logits_full, logits_mid, logits_low)."""
    cfg = model.config
    if tuple(x.shape[1:]) != (cfg.in_channels,) + tuple(cfg.crop_size):
        raise UsageError(
            f"input shape {x.shape} does not match configured "
            f"{(cfg.in_channels,) + tuple(cfg.crop_size)}"
        )
    plan = stage_plan(cfg)
    scope = tape.scope if tape is not None else _null_scope

    with scope("embed"):
        x0 = embed_volume(x, model.embed)
    with scope("enc0"):
        x1 = transformer_block(x0, model.enc_blocks[0])
    with scope("down0"):
        x2 = downsample(x1, model.downs[0])
    with scope("enc1"):
        x3 = transformer_block(x2, model.enc_blocks[1])
    with scope("down1"):
        x4 = downsample(x3, model.downs[1])

    with scope("down2"):
        b = downsample(x4, model.downs[2])
    for i, blk in enumerate(model.bottleneck):
        with scope(f"bottleneck{i}"):
            b = transformer_block(b, blk)
    with scope("up_bottleneck"):
        u2 = upsample(b, model.up_bottleneck, plan[2].extents)

    with scope("skip2"):
        d2 = _skip_stage(x4, u2, model.skips[0])
    with scope("dec2"):
        d2 = transformer_block(d2, model.dec_blocks[0])
    with scope("up2"):
        u1 = upsample(d2, model.ups[0], plan[1].extents)

    with scope("skip1"):
        d1 = _skip_stage(x3, u1, model.skips[1])
    with scope("dec1"):
        d1 = transformer_block(d1, model.dec_blocks[1])
    with scope("up1"):
        u0 = upsample(d1, model.ups[1], plan[0].extents)

    with scope("heads"):
        logits_mid = conv_layer(u0, model.head_mid)
        logits_low = conv_layer(d1, model.head_low)
    with scope("expand"):
        logits_full = ops.crop_spatial(expand_to_logits(u0, model.expand), cfg.crop_size)
    return logits_full, logits_mid, logits_low


class _null_ctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return None


def _null_scope(name: str):
    return _null_ctx()


def output_resolutions(cfg: ModelConfig) -> list[tuple[int, int, int]]:
    """Extents of the three supervised logit tensors (full, s0, s1)."""
    plan = stage_plan(cfg)
    return [tuple(cfg.crop_size), plan[0].extents, plan[1].extents]
