"""Differentiable op set for the volumetric transformer.

Every op is a pure function Tensor -> Tensor that optionally records a
vjp node and MAC counts on the active tape. Convolutions use
cross-correlation semantics; deconv3d is the exact adjoint of conv3d.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeMismatchError
from .tensor import (
    ATTENTION,
    CONVOLUTION,
    PROJECTION,
    Tensor,
    count_macs,
    record,
)

Scalar = Union[int, float]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    out = Tensor(a.data + b.data)
    record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    out = Tensor(a.data - b.data)
    record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    record(out, (a, b), vjp, "mul")
    return out


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    out = Tensor(a.data / b.data)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    record(out, (a, b), vjp, "div")
    return out


def scale(a: Tensor, s: Scalar) -> Tensor:
    out = Tensor(a.data * s)
    record(out, (a,), lambda g: (g * s,), "scale")
    return out


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = Tensor(a.data.transpose(axes))
    record(out, (a,), lambda g: (g.transpose(inv),), "transpose")
    return out


def moveaxis(a: Tensor, src: int, dst: int) -> Tensor:
    out = Tensor(np.moveaxis(a.data, src, dst))
    record(out, (a,), lambda g: (np.moveaxis(g, dst, src),), "moveaxis")
    return out


def pad_spatial(a: Tensor, pads: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad the three spatial axes of an (N, C, H, W, D) tensor."""
    widths = [(0, 0), (0, 0)] + [tuple(p) for p in pads]
    if all(p == (0, 0) for p in widths):
        return a
    out = Tensor(np.pad(a.data, widths))
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    record(out, (a,), lambda g: (g[sl],), "pad")
    return out


def crop_spatial(a: Tensor, extents: Sequence[int]) -> Tensor:
    """Keep the leading `extents` voxels along the spatial axes."""
    h, w, d = extents
    if (h, w, d) == a.shape[2:]:
        return a
    out = Tensor(a.data[:, :, :h, :w, :d])

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[:, :, :h, :w, :d] = g
        return (full,)

    record(out, (a,), vjp, "crop")
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(a.data[sl])

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    record(out, (a,), vjp, "narrow")
    return out


def index_select(a: Tensor, axis: int, index: np.ndarray) -> Tensor:
    """Gather along `axis` with an integer index array (table lookup)."""
    out = Tensor(np.take(a.data, index, axis=axis))

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        g_moved = np.moveaxis(g, axis, 0) if axis != 0 else g
        np.add.at(moved, index.ravel(), g_moved.reshape((index.size,) + moved.shape[1:]))
        return (full,)

    record(out, (a,), vjp, "index_select")
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        pieces = []
        for i in range(len(sizes)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    record(out, tuple(tensors), vjp, "concat")
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    record(out, (a,), vjp, "sum")
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# matrix product


def matmul(a: Tensor, b: Tensor, mac_class: str = PROJECTION) -> Tensor:
    """Batched matrix product a[..,m,k] @ b[..,k,n].

    Leading batch extents must match by equality; one operand may omit
    them entirely (a shared weight matrix).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs >=2-D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    ba, bb = a.shape[:-2], b.shape[:-2]
    if ba and bb and ba != bb:
        raise ShapeMismatchError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)
    out = Tensor(out_data)

    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = int(np.prod(out_data.shape[:-2], dtype=np.int64)) if out_data.ndim > 2 else 1
    count_macs(mac_class, batch * m * k * n)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    record(out, (a, b), vjp, "matmul")
    return out


# ---------------------------------------------------------------------------
# convolutions

Triple = tuple[int, int, int]


def _conv_out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv3d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor],
    stride: Triple = (1, 1, 1),
    padding: Triple = (0, 0, 0),
) -> Tensor:
    """Strided 3-D cross-correlation.

    x: (N, Cin, H, W, D); w: (Cout, Cin, kh, kw, kd); bias: (Cout,) or None.
    """
    N, cin, H, W, D = x.shape
    cout, cin_w, kh, kw, kd = w.shape
    if cin != cin_w:
        raise ShapeMismatchError(f"conv3d channel mismatch: input {cin} vs weight {cin_w}")
    sh, sw, sd = stride
    ph, pw, pd = padding
    out_ext = []
    for name, (n, k, s, p) in zip("HWD", [(H, kh, sh, ph), (W, kw, sw, pw), (D, kd, sd, pd)]):
        o = _conv_out_extent(n, k, s, p)
        if o < 1:
            raise ConfigError(f"conv3d output extent on axis {name} is {o} (non-positive)")
        out_ext.append(o)
    Ho, Wo, Do = out_ext

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw), (pd, pd)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw, kd), axis=(2, 3, 4))
    win = win[:, :, ::sh, ::sw, ::sd]  # (N, Cin, Ho, Wo, Do, kh, kw, kd)
    y = np.einsum("ncxyzijk,ocijk->noxyz", win, w.data, optimize=True)
    if bias is not None:
        y += bias.data.reshape(1, cout, 1, 1, 1)
    out = Tensor(y)

    count_macs(CONVOLUTION, N * cout * Ho * Wo * Do * cin * kh * kw * kd)

    def vjp(g):
        gw = np.einsum("noxyz,ncxyzijk->ocijk", g, win, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                for k in range(kd):
                    piece = np.einsum("noxyz,oc->ncxyz", g, w.data[:, :, i, j, k], optimize=True)
                    gxp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw, k : k + sd * Do : sd] += piece
        gx = gxp[:, :, ph : ph + H, pw : pw + W, pd : pd + D]
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, w, bias) if bias is not None else (x, w)
    record(out, inputs, vjp, "conv3d")
    return out


def deconv3d(x: Tensor, w: Tensor, bias: Optional[Tensor], stride: Triple) -> Tensor:
    """Transposed convolution (exact adjoint of unpadded strided conv3d).

    x: (N, Cin, H, W, D); w: (Cin, Cout, kh, kw, kd); output extent per
    axis is (in - 1) * stride + kernel.
    """
    N, cin, H, W, D = x.shape
    cin_w, cout, kh, kw, kd = w.shape
    if cin != cin_w:
        raise ShapeMismatchError(f"deconv3d channel mismatch: input {cin} vs weight {cin_w}")
    sh, sw, sd = stride
    for name, (k, s) in zip("HWD", [(kh, sh), (kw, sw), (kd, sd)]):
        if k < s:
            raise ConfigError(
                f"deconv3d kernel {k} smaller than stride {s} on axis {name}: "
                "output voxels would be left unwritten"
            )
    Ho, Wo, Do = (H - 1) * sh + kh, (W - 1) * sw + kw, (D - 1) * sd + kd

    y = np.zeros((N, cout, Ho, Wo, Do), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            for k in range(kd):
                piece = np.einsum("ncxyz,co->noxyz", x.data, w.data[:, :, i, j, k], optimize=True)
                y[:, :, i : i + sh * H : sh, j : j + sw * W : sw, k : k + sd * D : sd] += piece
    if bias is not None:
        y += bias.data.reshape(1, cout, 1, 1, 1)
    out = Tensor(y)

    count_macs(CONVOLUTION, N * cin * H * W * D * cout * kh * kw * kd)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                for k in range(kd):
                    gsl = g[:, :, i : i + sh * H : sh, j : j + sw * W : sw, k : k + sd * D : sd]
                    gx += np.einsum("noxyz,co->ncxyz", gsl, w.data[:, :, i, j, k], optimize=True)
                    gw[:, :, i, j, k] = np.einsum("ncxyz,noxyz->co", x.data, gsl, optimize=True)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, w, bias) if bias is not None else (x, w)
    record(out, inputs, vjp, "deconv3d")
    return out


# ---------------------------------------------------------------------------
# normalization / activations


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis: (x - mean) / sqrt(var + eps) * gamma + beta."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    n = x.shape[-1]

    def vjp(g):
        gxhat = g * gamma.data
        # standard layer-norm backward over the last axis
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        return (gx, ggamma, gbeta)

    record(out, (x, gamma, beta), vjp, "layer_norm")
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * phi_cdf)

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (phi_cdf + x.data * pdf),)

    record(out, (x,), vjp, "gelu")
    return out


def softmax(x: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    record(out, (x,), vjp, "softmax")
    return out


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse)
    s = np.exp(out.data)

    def vjp(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    record(out, (x,), vjp, "log_softmax")
    return out


def cyclic_shift(x: Tensor, offsets: Triple) -> Tensor:
    """Toroidal roll of the spatial axes of an (N, C, H, W, D) tensor."""
    oh, ow, od = offsets
    if (oh, ow, od) == (0, 0, 0):
        return x
    out = Tensor(np.roll(x.data, (oh, ow, od), axis=(2, 3, 4)))
    record(
        out,
        (x,),
        lambda g: (np.roll(g, (-oh, -ow, -od), axis=(2, 3, 4)),),
        "cyclic_shift",
    )
    return out
