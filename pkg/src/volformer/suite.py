"""Standard gradcheck suite: every differentiable op family plus the
attention layers, loss composites, and an end-to-end micro model. Used by
the CLI `gradcheck` subcommand and the acceptance tests.
"""

from __future__ import annotations

import numpy as np

from . import attention, losses, ops
from .blocks import make_attention
from .attention import PartitionSpec, SkipAttentionParams, build_bias, half_shift
from .gradcheck import GradCheckReport, gradcheck
from .model import build_model, forward
from .tensor import Tensor


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 3))))


def _attn_params(rng, c=8, heads=2, volume=(2, 2, 2)):
    p = make_attention(rng, c, heads, volume, dtype=np.float64)
    return p


def standard_suite(seed: int = 0, grad_fault: float = 0.0) -> list[GradCheckReport]:
    """Run gradcheck on the full op roster; `grad_fault` perturbs every
    analytic gradient (test hook proving the checker detects breakage)."""
    rng = _rng(seed)
    reports = []

    def check(name, fn, inputs, tol=1e-4):
        reports.append(gradcheck(name, fn, inputs, tolerance=tol, grad_fault=grad_fault))

    a34 = rng.normal(size=(3, 4))
    b34 = rng.normal(size=(3, 4))
    check("add", lambda t: ops.sum_(ops.mul(ops.add(t[0], t[1]), t[0])), [a34, b34])
    check("mul", lambda t: ops.sum_(ops.mul(t[0], t[1])), [a34, b34])
    check("div", lambda t: ops.sum_(ops.div(t[0], t[1])), [a34, np.abs(b34) + 1.0])
    check("matmul", lambda t: ops.sum_(ops.matmul(t[0], t[1])),
          [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))])
    check("gelu", lambda t: ops.sum_(ops.gelu(t[0])), [a34])
    check("softmax", lambda t: ops.sum_(ops.mul(ops.softmax(t[0]), t[1])), [a34, b34])
    check("log_softmax", lambda t: ops.sum_(ops.mul(ops.log_softmax(t[0]), t[1])), [a34, b34])
    check("layer_norm", lambda t: ops.sum_(ops.mul(ops.layer_norm(t[0], t[1], t[2]), t[0])),
          [a34, rng.normal(size=4), rng.normal(size=4)])
    check("mean", lambda t: ops.mean(ops.mul(t[0], t[0])), [a34])
    check(
        "conv3d",
        lambda t: ops.sum_(ops.conv3d(t[0], t[1], t[2], stride=(2, 1, 1), padding=(1, 1, 1))),
        [rng.normal(size=(2, 2, 4, 4, 3)), rng.normal(size=(3, 2, 3, 3, 3)),
         rng.normal(size=3)],
    )
    check(
        "deconv3d",
        lambda t: ops.sum_(ops.mul(ops.deconv3d(t[0], t[1], t[2], stride=(2, 2, 1)),
                                   Tensor(np.float64(1.0)))),
        [rng.normal(size=(1, 2, 3, 3, 2)), rng.normal(size=(2, 3, 2, 2, 1)),
         rng.normal(size=3)],
    )
    check("cyclic_shift", lambda t: ops.sum_(ops.mul(ops.cyclic_shift(t[0], (1, 1, 0)), t[0])),
          [rng.normal(size=(1, 2, 3, 3, 2))])
    check("pad_crop", lambda t: ops.sum_(ops.crop_spatial(
        ops.pad_spatial(t[0], [(0, 1), (0, 1), (0, 0)]), (3, 3, 2))),
        [rng.normal(size=(1, 2, 3, 3, 2))])

    # attention layers on a 4x4x2 grid, volume 2x2x2, C=8
    c, heads, vol = 8, 2, (2, 2, 2)
    x = rng.normal(size=(1, c, 4, 4, 2))
    spec = PartitionSpec(vol)
    sspec = PartitionSpec(vol, shift=half_shift(vol))

    def with_attn(fn):
        def run(t):
            p = attention.AttentionParams(
                w_q=t[1], w_k=t[2], w_v=t[3], w_o=t[4],
                b_q=t[5], b_k=t[6], b_v=t[7], b_o=t[8],
                heads=heads,
                bias=attention.RelPosBias(table=t[9], index_map=bias_idx, volume_size=vol),
            )
            return ops.sum_(ops.mul(fn(t[0], p), t[0]))
        return run

    proto = _attn_params(rng, c, heads, vol)
    bias_idx = proto.bias.index_map
    attn_inputs = [x, proto.w_q.data, proto.w_k.data, proto.w_v.data, proto.w_o.data,
                   proto.b_q.data, proto.b_k.data, proto.b_v.data, proto.b_o.data,
                   proto.bias.table.data]
    check("lv_msa", with_attn(lambda y, p: attention.lv_msa(y, p, spec)), attn_inputs)
    check("slv_msa", with_attn(lambda y, p: attention.slv_msa(y, p, sspec)), attn_inputs)

    gv_proto = _attn_params(rng, c, heads, volume=(4, 4, 2))

    def gv_fn(t):
        p = attention.AttentionParams(
            w_q=t[1], w_k=t[2], w_v=t[3], w_o=t[4],
            b_q=t[5], b_k=t[6], b_v=t[7], b_o=t[8],
            heads=heads,
            bias=attention.RelPosBias(table=t[9], index_map=gv_proto.bias.index_map,
                                      volume_size=(4, 4, 2)),
        )
        return ops.sum_(ops.mul(attention.gv_msa(t[0], p), t[0]))

    check("gv_msa", gv_fn,
          [x, gv_proto.w_q.data, gv_proto.w_k.data, gv_proto.w_v.data, gv_proto.w_o.data,
           gv_proto.b_q.data, gv_proto.b_k.data, gv_proto.b_v.data, gv_proto.b_o.data,
           gv_proto.bias.table.data])

    skip_bias = build_bias(spec, heads, rng, dtype=np.float64)
    b_key = rng.normal(size=c)  # key bias: softmax shift-invariant, grad is 0

    def skip_fn(t):
        b_kv = ops.concat([Tensor(b_key), t[3]], axis=0)
        p = SkipAttentionParams(
            w_kv=t[2], b_kv=b_kv, heads=heads,
            bias=attention.RelPosBias(table=t[4], index_map=skip_bias.index_map,
                                      volume_size=vol),
        )
        return ops.sum_(ops.mul(attention.skip_attention(t[0], t[1], p, spec), t[1]))

    check("skip_attention", skip_fn,
          [x, rng.normal(size=x.shape), rng.normal(size=(c, 2 * c)) * 0.1,
           rng.normal(size=c), skip_bias.table.data])

    labels = rng.integers(0, 3, size=(1, 4, 4, 2))
    check("ce_loss", lambda t: losses.ce_loss(t[0], labels),
          [rng.normal(size=(1, 3, 4, 4, 2))])
    check("dice_loss", lambda t: losses.dice_loss(t[0], labels),
          [rng.normal(size=(1, 3, 4, 4, 2))])
    check("ce_plus_dice", lambda t: losses.seg_loss(t[0], labels),
          [rng.normal(size=(1, 3, 4, 4, 2))])
    return reports


def end_to_end_report(seed: int = 0, tolerance: float = 1e-3,
                      grad_fault: float = 0.0) -> GradCheckReport:
    """Gradcheck the scalar loss of a micro model with respect to its input
    volume (parameters held fixed)."""
    from .config import micro_config

    cfg = micro_config()
    model = build_model(cfg, seed=seed, dtype=np.float64)
    rng = _rng(seed + 101)
    labels = rng.integers(0, cfg.num_classes, size=(1, *cfg.crop_size))
    x = rng.normal(size=(1, cfg.in_channels, *cfg.crop_size))

    def fn(t):
        outputs = forward(model, t[0])
        return losses.total_loss(outputs, labels)

    return gradcheck("end_to_end", fn, [x], tolerance=tolerance, grad_fault=grad_fault)
