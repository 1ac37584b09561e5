"""Convolutional embedding / sampling layers, the MLP sub-layer and the
two-layer transformer block (plain + shifted attention, pre-norm residual).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .attention import (
    AttentionParams,
    PartitionSpec,
    RelPosBias,
    build_bias,
    gv_msa,
    lv_msa,
    slv_msa,
)
from .errors import ConfigError
from .tensor import OTHER, Tensor

Triple = tuple[int, int, int]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32):
    return np.clip(rng.normal(0.0, std, shape), -2 * std, 2 * std).astype(dtype)


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class ConvParams:
    w: Tensor
    b: Tensor
    stride: Triple
    padding: Triple


@dataclass
class DeconvParams:
    w: Tensor
    b: Tensor
    stride: Triple


@dataclass
class MlpParams:
    fc1: LinearParams
    fc2: LinearParams


def make_linear(rng, c_in: int, c_out: int, dtype=np.float32) -> LinearParams:
    return LinearParams(
        w=Tensor(trunc_normal(rng, (c_in, c_out), dtype=dtype), requires_grad=True),
        b=Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
    )


def make_norm(c: int, dtype=np.float32) -> NormParams:
    return NormParams(
        gamma=Tensor(np.ones(c, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
    )


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    """He init for convolutional weights; transformer linears keep the
    smaller trunc-normal(0.02) convention."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


def make_conv(rng, c_in: int, c_out: int, kernel: Triple, stride: Triple,
              padding: Triple, dtype=np.float32) -> ConvParams:
    fan_in = c_in * int(np.prod(kernel))
    return ConvParams(
        w=Tensor(he_normal(rng, (c_out, c_in) + tuple(kernel), fan_in, dtype), requires_grad=True),
        b=Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
        stride=tuple(stride),
        padding=tuple(padding),
    )


def make_deconv(rng, c_in: int, c_out: int, stride: Triple,
                kernel: Triple | None = None, dtype=np.float32) -> DeconvParams:
    # default kernel extents equal the stride: every output voxel written
    # exactly once; larger kernels overlap and interpolate between voxels
    kernel = tuple(stride) if kernel is None else tuple(kernel)
    fan_in = c_in * int(np.prod([-(-k // s) for k, s in zip(kernel, stride)]))
    return DeconvParams(
        w=Tensor(he_normal(rng, (c_in, c_out) + kernel, fan_in, dtype), requires_grad=True),
        b=Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
        stride=tuple(stride),
    )


def make_mlp(rng, c: int, ratio: float, dtype=np.float32) -> MlpParams:
    hidden = max(1, int(round(c * ratio)))
    return MlpParams(fc1=make_linear(rng, c, hidden, dtype), fc2=make_linear(rng, hidden, c, dtype))


# ---------------------------------------------------------------------------
# functional pieces


def linear(x: Tensor, p: LinearParams) -> Tensor:
    # "other" MAC class: MLP matmuls are outside the attention-complexity
    # accounting that the omega formulas cover
    return ops.add(ops.matmul(x, p.w, mac_class=OTHER), p.b)


def channel_norm(x: Tensor, p: NormParams, eps: float = 1e-5) -> Tensor:
    """Layer norm over the channel axis of an (N, C, H, W, D) map."""
    t = ops.moveaxis(x, 1, -1)
    t = ops.layer_norm(t, p.gamma, p.beta, eps)
    return ops.moveaxis(t, -1, 1)


def mlp(x: Tensor, p: MlpParams) -> Tensor:
    """Two-layer network over the channel axis: linear, GELU, linear."""
    t = ops.moveaxis(x, 1, -1)
    t = linear(ops.gelu(linear(t, p.fc1)), p.fc2)
    return ops.moveaxis(t, -1, 1)


def conv_layer(x: Tensor, p: ConvParams) -> Tensor:
    return ops.conv3d(x, p.w, p.b, p.stride, p.padding)


def deconv_layer(x: Tensor, p: DeconvParams) -> Tensor:
    return ops.deconv3d(x, p.w, p.b, p.stride)


# ---------------------------------------------------------------------------
# transformer block: two successive layers (plain, then shifted)


@dataclass
class LayerParams:
    """One pre-norm attention + pre-norm MLP layer."""

    norm_attn: NormParams
    attn: AttentionParams
    norm_mlp: NormParams
    mlp: MlpParams
    shifted: bool


@dataclass
class BlockParams:
    layers: list
    spec: PartitionSpec
    global_attn: bool


def make_attention(rng, c: int, heads: int, bias_volume: Triple, dtype=np.float32) -> AttentionParams:
    mk = lambda: Tensor(trunc_normal(rng, (c, c), dtype=dtype), requires_grad=True)
    zb = lambda: Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
    return AttentionParams(
        w_q=mk(), w_k=mk(), w_v=mk(), w_o=mk(),
        b_q=zb(), b_k=zb(), b_v=zb(), b_o=zb(),
        heads=heads,
        bias=build_bias(PartitionSpec(bias_volume), heads, rng, dtype=dtype),
    )


def make_block(rng, c: int, heads: int, spec: PartitionSpec, n_layers: int,
               mlp_ratio: float, global_attn: bool, dtype=np.float32) -> BlockParams:
    layers = []
    for i in range(n_layers):
        shifted = (not global_attn) and (i % 2 == 1)
        layers.append(
            LayerParams(
                norm_attn=make_norm(c, dtype),
                attn=make_attention(rng, c, heads, spec.volume_size, dtype),
                norm_mlp=make_norm(c, dtype),
                mlp=make_mlp(rng, c, mlp_ratio, dtype),
                shifted=shifted,
            )
        )
    return BlockParams(layers=layers, spec=spec, global_attn=global_attn)


def transformer_block(x: Tensor, bp: BlockParams) -> Tensor:
    """Pre-norm attention + residual, pre-norm MLP + residual, per layer.

    Local blocks alternate plain and shifted volume attention; global
    blocks attend over the whole grid in every layer.
    """
    for layer in bp.layers:
        h = channel_norm(x, layer.norm_attn)
        if bp.global_attn:
            a = gv_msa(h, layer.attn)
        elif layer.shifted:
            a = slv_msa(h, layer.attn, bp.spec.shifted())
        else:
            a = lv_msa(h, layer.attn, bp.spec)
        x = ops.add(x, a)
        x = ops.add(x, mlp(channel_norm(x, layer.norm_mlp), layer.mlp))
    return x


# ---------------------------------------------------------------------------
# embedding / sampling layers


@dataclass
class EmbedParams:
    convs: list  # four ConvParams
    norms: list  # three NormParams (after convs 1..3)


def make_embed(rng, in_channels: int, c: int, embed_strides, dtype=np.float32) -> EmbedParams:
    s1, s2 = embed_strides
    convs = [
        make_conv(rng, in_channels, c, (3, 3, 3), tuple(s1), (1, 1, 1), dtype),
        make_conv(rng, c, c, (3, 3, 3), (1, 1, 1), (1, 1, 1), dtype),
        make_conv(rng, c, c, (3, 3, 3), tuple(s2), (1, 1, 1), dtype),
        make_conv(rng, c, c, (3, 3, 3), (1, 1, 1), (1, 1, 1), dtype),
    ]
    norms = [make_norm(c, dtype) for _ in range(3)]
    return EmbedParams(convs=convs, norms=norms)


def embed_volume(x: Tensor, p: EmbedParams) -> Tensor:
    """Four k=3 convolutions; GELU + layer norm after each except the last."""
    for i, conv in enumerate(p.convs):
        x = conv_layer(x, conv)
        if i < 3:
            x = channel_norm(ops.gelu(x), p.norms[i])
    return x


@dataclass
class DownsampleParams:
    conv: ConvParams
    norm: NormParams


def make_downsample(rng, c_in: int, stride: Triple, dtype=np.float32) -> DownsampleParams:
    return DownsampleParams(
        conv=make_conv(rng, c_in, 2 * c_in, (3, 3, 3), tuple(stride), (1, 1, 1), dtype),
        norm=make_norm(2 * c_in, dtype),
    )


def downsample(x: Tensor, p: DownsampleParams) -> Tensor:
    """Strided k=3 convolution doubling the channel width, then layer norm."""
    return channel_norm(conv_layer(x, p.conv), p.norm)


def upsample(x: Tensor, p: DeconvParams, target_extents: Triple) -> Tensor:
    """Deconvolution (kernel == stride) halving channels, cropped to the
    mirrored encoder stage extents."""
    y = deconv_layer(x, p)
    if any(o < t for o, t in zip(y.shape[2:], target_extents)):
        raise ConfigError(
            f"upsample output {y.shape[2:]} smaller than mirror extents {tuple(target_extents)}"
        )
    return ops.crop_spatial(y, target_extents)


def expand_to_logits(x: Tensor, p: DeconvParams) -> Tensor:
    """Deconvolution by the total embedding reduction to full-resolution
    logits. When the kernel overhangs the stride the overhang is split
    evenly between both sides (centered crop), so output voxels blend
    contributions from neighboring features instead of tiling blocks."""
    y = deconv_layer(x, p)
    for axis, (k, s) in enumerate(zip(p.w.shape[2:], p.stride)):
        lead = (k - s) // 2
        if lead:
            y = ops.narrow(y, axis + 2, lead, y.shape[axis + 2] - (k - s))
    return y
