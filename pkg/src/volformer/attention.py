"""Volume-based multi-head self-attention.

Three mechanisms: attention inside non-overlapping local 3D volumes
(optionally with a half-volume cyclic shift and region mask), dense
global attention over a whole small grid, and cross-attention where the
decoder feature queries linearly projected encoder keys/values.

Feature maps are zero-padded up to volume-size multiples before
partitioning and cropped after reversal; padded tokens are masked out of
the attention logits with an additive -1e9.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, ShapeMismatchError
from .tensor import ATTENTION, PROJECTION, Tensor

Triple = tuple[int, int, int]

MASK_LARGE = 1e9  # exp(-1e9) underflows to 0 in f32 after max subtraction


def half_shift(volume_size: Triple) -> Triple:
    return tuple(s // 2 for s in volume_size)


@dataclass(frozen=True)
class PartitionSpec:
    """Local-volume geometry (S_H, S_W, S_D) plus shift offsets."""

    volume_size: Triple
    shift: Triple = (0, 0, 0)

    def __post_init__(self):
        if any(s < 1 for s in self.volume_size):
            raise ConfigError(f"volume_size must be positive, got {self.volume_size}")
        if any(o < 0 or o >= s for o, s in zip(self.shift, self.volume_size)):
            raise ConfigError(f"shift {self.shift} out of range for volume {self.volume_size}")

    @property
    def n_tokens(self) -> int:
        return int(np.prod(self.volume_size))

    def shifted(self) -> "PartitionSpec":
        return PartitionSpec(self.volume_size, half_shift(self.volume_size))


def padded_extents(extents: Triple, volume_size: Triple) -> Triple:
    return tuple(-(-e // s) * s for e, s in zip(extents, volume_size))


def clamp_volume(volume_size: Triple, extents: Triple) -> Triple:
    """Clamp the volume per axis to the grid extent (full-extent windows
    where the map is smaller than the nominal volume)."""
    return tuple(min(s, e) for s, e in zip(volume_size, extents))


# ---------------------------------------------------------------------------
# partitioning


def partition_volumes(x: Tensor, spec: PartitionSpec) -> Tensor:
    """(N, C, H, W, D) -> (N * N_LV, N_T, C), volumes in raster order."""
    n, c, h, w, d = x.shape
    sh, sw, sd = spec.volume_size
    if h % sh or w % sw or d % sd:
        raise ShapeMismatchError(
            f"extents {(h, w, d)} not multiples of volume {spec.volume_size}; pad first"
        )
    t = ops.reshape(x, (n, c, h // sh, sh, w // sw, sw, d // sd, sd))
    t = ops.transpose(t, (0, 2, 4, 6, 3, 5, 7, 1))
    n_lv = (h // sh) * (w // sw) * (d // sd)
    return ops.reshape(t, (n * n_lv, spec.n_tokens, c))


def reverse_volumes(tokens: Tensor, spec: PartitionSpec, extents) -> Tensor:
    """Exact inverse of partition_volumes for the given (N, C, H, W, D)."""
    n, c, h, w, d = extents
    sh, sw, sd = spec.volume_size
    n_lv = (h // sh) * (w // sw) * (d // sd)
    if tokens.shape != (n * n_lv, spec.n_tokens, c):
        raise ShapeMismatchError(
            f"token tensor {tokens.shape} inconsistent with extents {tuple(extents)}"
        )
    t = ops.reshape(tokens, (n, h // sh, w // sw, d // sd, sh, sw, sd, c))
    t = ops.transpose(t, (0, 7, 1, 4, 2, 5, 3, 6))
    return ops.reshape(t, (n, c, h, w, d))


# ---------------------------------------------------------------------------
# relative position bias


@dataclass
class RelPosBias:
    """Per-head learned table indexed by 3D token-coordinate offsets.

    table: (heads, (2S_H-1)*(2S_W-1)*(2S_D-1)) parameter; index_map maps
    token pairs (i, j) to table entries and depends only on the
    coordinate difference of i and j.
    """

    table: Tensor
    index_map: np.ndarray
    volume_size: Triple

    def expand(self) -> Tensor:
        """Build the (heads, N_T, N_T) logits bias from the table."""
        nt = self.index_map.shape[0]
        flat = ops.index_select(self.table, 1, self.index_map.reshape(-1))
        return ops.reshape(flat, (self.table.shape[0], nt, nt))


def bias_index_map(volume_size: Triple) -> np.ndarray:
    """N_T x N_T map of flattened relative offsets (dh+S_H-1, dw+S_W-1, dd+S_D-1)."""
    sh, sw, sd = volume_size
    coords = np.stack(
        np.meshgrid(np.arange(sh), np.arange(sw), np.arange(sd), indexing="ij"),
        axis=-1,
    ).reshape(-1, 3)
    delta = coords[:, None, :] - coords[None, :, :]  # (N_T, N_T, 3)
    delta += np.array([sh - 1, sw - 1, sd - 1])
    strides = np.array([(2 * sw - 1) * (2 * sd - 1), 2 * sd - 1, 1])
    return (delta * strides).sum(axis=-1).astype(np.int64)


def build_bias(
    spec: PartitionSpec,
    heads: int = 1,
    rng: Optional[np.random.Generator] = None,
    std: float = 0.02,
    dtype=np.float32,
) -> RelPosBias:
    """Truncated-normal table (std 0.02, clipped at +-2 std), one per head."""
    sh, sw, sd = spec.volume_size
    n_entries = (2 * sh - 1) * (2 * sw - 1) * (2 * sd - 1)
    if rng is None:
        data = np.zeros((heads, n_entries), dtype=dtype)
    else:
        data = np.clip(rng.normal(0.0, std, (heads, n_entries)), -2 * std, 2 * std).astype(dtype)
    return RelPosBias(
        table=Tensor(data, requires_grad=True),
        index_map=bias_index_map(spec.volume_size),
        volume_size=spec.volume_size,
    )


# ---------------------------------------------------------------------------
# parameters


@dataclass
class AttentionParams:
    """Projection weights and bias table for one attention layer."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor
    b_k: Tensor
    b_v: Tensor
    b_o: Tensor
    heads: int
    bias: RelPosBias

    def __post_init__(self):
        c = self.w_q.shape[0]
        if c % self.heads:
            raise ConfigError(f"channels {c} not divisible by heads {self.heads}")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


@dataclass
class SkipAttentionParams:
    """Single C -> 2C linear projection (keys & values) plus bias table."""

    w_kv: Tensor
    b_kv: Tensor
    heads: int
    bias: RelPosBias

    @property
    def channels(self) -> int:
        return self.w_kv.shape[0]


@dataclass
class ShiftMask:
    """Additive logits mask (N_LV, N_T, N_T) with entries in {0, -MASK_LARGE}."""

    logits: np.ndarray


# ---------------------------------------------------------------------------
# masks


def _axis_region_ids(padded: int, volume: int, shift: int) -> np.ndarray:
    """Region labels along one axis, in the post-roll frame.

    After rolling by -shift, the last volume of the axis holds two
    fragments of different displaced volumes: [padded-volume,
    padded-shift) and the wrapped tail [padded-shift, padded). A split
    only happens when the axis both shifts and holds more than one
    volume; a single full-extent volume wraps onto itself and needs no
    mask.
    """
    ids = np.zeros(padded, dtype=np.int64)
    if shift > 0 and padded > volume:
        ids[padded - volume : padded - shift] = 1
        ids[padded - shift :] = 2
    return ids


def build_shift_mask(
    padded: Triple, valid: Triple, spec: PartitionSpec
) -> Optional[ShiftMask]:
    """Region/padding mask for one padded grid in the post-roll frame.

    Returns None when every token of every volume may attend every other
    (no padding and no fragmented shift regions).
    """
    axis_ids = [
        _axis_region_ids(p, s, o)
        for p, s, o in zip(padded, spec.volume_size, spec.shift)
    ]
    ids = (
        axis_ids[0][:, None, None] * 9
        + axis_ids[1][None, :, None] * 3
        + axis_ids[2][None, None, :]
    )
    pad_mask = np.zeros(padded, dtype=bool)
    pad_mask[valid[0] :, :, :] = True
    pad_mask[:, valid[1] :, :] = True
    pad_mask[:, :, valid[2] :] = True
    if spec.shift != (0, 0, 0):
        pad_mask = np.roll(pad_mask, tuple(-o for o in spec.shift), axis=(0, 1, 2))
    ids[pad_mask] = -1
    if (ids == ids.ravel()[0]).all():
        return None
    sh, sw, sd = spec.volume_size
    h, w, d = padded
    vol_ids = (
        ids.reshape(h // sh, sh, w // sw, sw, d // sd, sd)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(-1, spec.n_tokens)
    )
    same = vol_ids[:, :, None] == vol_ids[:, None, :]
    return ShiftMask(np.where(same, 0.0, -MASK_LARGE))


# ---------------------------------------------------------------------------
# attention cores


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, nt, c = t.shape
    t = ops.reshape(t, (b, nt, heads, c // heads))
    return ops.transpose(t, (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    b, h, nt, d = t.shape
    t = ops.transpose(t, (0, 2, 1, 3))
    return ops.reshape(t, (b, nt, h * d))


def _attend(q: Tensor, k: Tensor, v: Tensor, bias: RelPosBias, mask, n_batch: int) -> Tensor:
    """softmax(q k^T / sqrt(d_k) + B [+ mask]) v on (B, heads, N_T, d) operands."""
    d_k = q.shape[-1]
    logits = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)), mac_class=ATTENTION)
    logits = ops.scale(logits, 1.0 / math.sqrt(d_k))
    logits = ops.add(logits, bias.expand())
    if mask is not None:
        tiled = np.tile(mask.logits, (n_batch, 1, 1))[:, None, :, :]
        logits = ops.add(logits, Tensor(tiled.astype(logits.dtype)))
    attn = ops.softmax(logits)
    return ops.matmul(attn, v, mac_class=ATTENTION)


def _volume_attention(
    x: Tensor,
    params: AttentionParams,
    spec: PartitionSpec,
    extra_mask: Optional[ShiftMask] = None,
) -> Tensor:
    if params.channels != x.shape[1]:
        raise ConfigError(
            f"attention channels {params.channels} do not match input {x.shape[1]}"
        )
    n, c = x.shape[0], x.shape[1]
    valid = x.shape[2:]
    padded = padded_extents(valid, spec.volume_size)
    xp = ops.pad_spatial(x, [(0, p - v) for p, v in zip(padded, valid)])
    if spec.shift != (0, 0, 0):
        xp = ops.cyclic_shift(xp, tuple(-o for o in spec.shift))
    mask = extra_mask if extra_mask is not None else build_shift_mask(padded, valid, spec)

    tokens = partition_volumes(xp, spec)
    q = _split_heads(ops.add(ops.matmul(tokens, params.w_q), params.b_q), params.heads)
    k = _split_heads(ops.add(ops.matmul(tokens, params.w_k), params.b_k), params.heads)
    v = _split_heads(ops.add(ops.matmul(tokens, params.w_v), params.b_v), params.heads)
    out = _merge_heads(_attend(q, k, v, params.bias, mask, n))
    out = ops.add(ops.matmul(out, params.w_o), params.b_o)

    y = reverse_volumes(out, spec, (n, c) + padded)
    if spec.shift != (0, 0, 0):
        y = ops.cyclic_shift(y, spec.shift)
    return ops.crop_spatial(y, valid)


def lv_msa(
    x: Tensor,
    params: AttentionParams,
    spec: PartitionSpec,
    mask: Optional[ShiftMask] = None,
) -> Tensor:
    """Multi-head self-attention inside non-overlapping local volumes."""
    if spec.shift != (0, 0, 0):
        raise ConfigError("lv_msa requires an unshifted spec; use slv_msa")
    return _volume_attention(x, params, spec, extra_mask=mask)


def slv_msa(x: Tensor, params: AttentionParams, spec: PartitionSpec) -> Tensor:
    """Shifted local-volume attention: cyclic shift, masked lv_msa, shift back."""
    if spec.shift == (0, 0, 0):
        return _volume_attention(x, params, spec)
    expected = half_shift(spec.volume_size)
    if spec.shift != expected:
        raise ConfigError(f"slv_msa expects half-volume shift {expected}, got {spec.shift}")
    return _volume_attention(x, params, spec)


def gv_msa(x: Tensor, params: AttentionParams) -> Tensor:
    """Dense attention over every token of a (small) feature map."""
    spec = PartitionSpec(volume_size=tuple(x.shape[2:]))
    return _volume_attention(x, params, spec)


def skip_attention(
    encoder_out: Tensor,
    decoder_up: Tensor,
    lp_params: SkipAttentionParams,
    spec: PartitionSpec,
) -> Tensor:
    """Decoder feature queries keys/values projected from the encoder output.

    K and V come from a single C -> 2C linear projection of the encoder
    feature; the decoder feature is used as the query unprojected, and no
    output projection is applied.
    """
    if encoder_out.shape != decoder_up.shape:
        raise ConfigError(
            f"skip attention extent mismatch: encoder {encoder_out.shape} "
            f"vs decoder {decoder_up.shape}"
        )
    n, c = decoder_up.shape[0], decoder_up.shape[1]
    valid = decoder_up.shape[2:]
    padded = padded_extents(valid, spec.volume_size)
    pads = [(0, p - v) for p, v in zip(padded, valid)]
    enc = ops.pad_spatial(encoder_out, pads)
    dec = ops.pad_spatial(decoder_up, pads)
    mask = build_shift_mask(padded, valid, PartitionSpec(spec.volume_size))

    enc_tok = partition_volumes(enc, PartitionSpec(spec.volume_size))
    kv = ops.add(ops.matmul(enc_tok, lp_params.w_kv), lp_params.b_kv)
    k = _split_heads(ops.narrow(kv, -1, 0, c), lp_params.heads)
    v = _split_heads(ops.narrow(kv, -1, c, c), lp_params.heads)
    q = _split_heads(partition_volumes(dec, PartitionSpec(spec.volume_size)), lp_params.heads)
    out = _merge_heads(_attend(q, k, v, lp_params.bias, mask, n))

    y = reverse_volumes(out, PartitionSpec(spec.volume_size), (n, c) + padded)
    return ops.crop_spatial(y, valid)


# ---------------------------------------------------------------------------
# closed-form complexity


def omega_lv(h: int, w: int, d: int, c: int, spec: PartitionSpec) -> int:
    """MACs of one local-volume attention layer on an h x w x d map:
    4 h w d C^2 (projections) + 2 S_H S_W S_D h w d C (attention products)."""
    sh, sw, sd = spec.volume_size
    return 4 * h * w * d * c * c + 2 * sh * sw * sd * h * w * d * c


def omega_gv(h: int, w: int, d: int, c: int) -> int:
    """MACs of one global attention layer: 4 h w d C^2 + 2 (h w d)^2 C."""
    hwd = h * w * d
    return 4 * hwd * c * c + 2 * hwd * hwd * c


def omega_skip(h: int, w: int, d: int, c: int, spec: PartitionSpec) -> int:
    """MACs of one skip attention layer: the K/V projection is a single
    C -> 2C matmul and Q/output are unprojected, so the projection term is
    halved relative to omega_lv."""
    sh, sw, sd = spec.volume_size
    return 2 * h * w * d * c * c + 2 * sh * sw * sd * h * w * d * c
