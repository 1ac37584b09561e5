"""Command-line surface.

Subcommands: gradcheck, shapes, complexity, train, eval, ensemble.
Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 data/format error. Every command echoes its resolved configuration, and
all randomness flows from the single --seed flag through counter-based
Philox streams.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import attention, data, metrics, optim, train as train_mod
from .attention import PartitionSpec, clamp_volume, padded_extents
from .checkpoint import load_checkpoint
from .config import ModelConfig, micro_config, resolve_config, serialize_config, stage_plan, mirror_plan
from .errors import ConfigError, DataError, FormatError, UsageError
from .model import build_model, forward, output_resolutions
from .suite import end_to_end_report, standard_suite
from .tensor import Tape, Tensor, mac_report

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_DATA = 3


def _echo_config(cfg: ModelConfig, out) -> None:
    print("# resolved config", file=out)
    for line in serialize_config(cfg).strip().splitlines():
        print(f"# {line}", file=out)


def _echo_opt(opt: optim.OptimizerConfig, out) -> None:
    print("# optimizer", file=out)
    for k in ("initial_lr", "momentum", "weight_decay", "max_epoch",
              "iters_per_epoch", "batch_size"):
        print(f"# {k} = {getattr(opt, k)}", file=out)


def cmd_gradcheck(args, out) -> int:
    print(f"# seed = {args.seed}", file=out)
    reports = standard_suite(args.seed, grad_fault=args.inject_fault)
    reports.append(end_to_end_report(args.seed, grad_fault=args.inject_fault))
    print("op\tmax_rel_error\ttolerance\tstatus", file=out)
    for r in reports:
        print(r.row(), file=out)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VERIFY


def cmd_shapes(args, out) -> int:
    cfg = resolve_config(args.config)
    cfg.validate()
    _echo_config(cfg, out)
    print("stage\trole\textents\tchannels", file=out)
    for st in stage_plan(cfg) + mirror_plan(cfg):
        e = "x".join(map(str, st.extents))
        print(f"{st.index}\t{st.role}\t{e}\t{st.channels}", file=out)
    print("output\trole\textents\tclasses", file=out)
    for name, res in zip(("full", "mid", "low"), output_resolutions(cfg)):
        print(f"{name}\thead\t{'x'.join(map(str, res))}\t{cfg.num_classes}", file=out)
    return EXIT_OK


def _stage_omegas(cfg: ModelConfig) -> dict[str, int]:
    """Analytic attention-class MACs per forward-pass scope."""
    plan = stage_plan(cfg)
    chans = cfg.stage_channels

    def lv(stage, n_layers):
        vol = clamp_volume(cfg.volume_size, plan[stage].extents)
        h, w, d = padded_extents(plan[stage].extents, vol)
        return n_layers * attention.omega_lv(h, w, d, chans[stage], PartitionSpec(vol))

    def skip(stage):
        vol = clamp_volume(cfg.volume_size, plan[stage].extents)
        h, w, d = padded_extents(plan[stage].extents, vol)
        return attention.omega_skip(h, w, d, chans[stage], PartitionSpec(vol))

    expected = {
        "enc0": lv(0, cfg.blocks[0]),
        "enc1": lv(1, cfg.blocks[1]),
        "skip2": skip(2),
        "dec2": lv(2, cfg.blocks[3]),
        "skip1": skip(1),
        "dec1": lv(1, cfg.blocks[4]),
    }
    h, w, d = plan[3].extents
    for i in range(cfg.blocks[2] // 2):
        expected[f"bottleneck{i}"] = 2 * attention.omega_gv(h, w, d, chans[3])
    return expected


def cmd_complexity(args, out) -> int:
    cfg = resolve_config(args.config)
    cfg.validate()
    _echo_config(cfg, out)
    model = build_model(cfg, seed=args.seed)
    x = Tensor(np.zeros((1, cfg.in_channels) + tuple(cfg.crop_size), dtype=np.float32))
    tape = Tape()
    with tape:
        forward(model, x, tape=tape)
    rep = mac_report(tape)
    expected = _stage_omegas(cfg)
    print("scope\tomega\tinstrumented\tmatch", file=out)
    ok = True
    for scope, omega in expected.items():
        units = sum(
            rep.by_scope.get((scope, c), 0)
            for c in ("projection", "attention")
        )
        measured = units // 2
        match = measured == omega
        ok &= match
        print(f"{scope}\t{omega}\t{measured}\t{int(match)}", file=out)
    total = sum(expected.values())
    print(f"total\t{total}\t{rep.attention_class_macs}\t{int(ok)}", file=out)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_train(args, out) -> int:
    cfg = resolve_config(args.config)
    cfg.validate()
    opt = optim.OptimizerConfig(
        max_epoch=args.epochs, iters_per_epoch=args.iters, batch_size=args.batch_size
    )
    _echo_config(cfg, out)
    _echo_opt(opt, out)
    print("epoch\tlr\ttrain_loss\tval_dsc", file=out)
    result = train_mod.train(cfg, opt, seed=args.seed, out_dir=args.out,
                             log=lambda line: print(line, file=out))
    if result.aborted:
        return EXIT_VERIFY
    print(f"# best_epoch = {result.best_epoch}", file=out)
    print(f"# best_dsc = {result.best_dsc:.6f}", file=out)
    return EXIT_OK


def _load_model(path: str):
    ckpt = load_checkpoint(path)
    model = build_model(ckpt.config, seed=ckpt.rng_state)
    named = model.named_parameters()
    from .checkpoint import restore_into

    restore_into(ckpt, named)
    return ckpt, model


def _test_set(cfg: ModelConfig, seed: int, size: int = 4):
    spec = train_mod.data_spec(cfg)
    return [data.gen_synthetic(spec, seed + 20_000, i) for i in range(size)]


def _print_report(rep: metrics.MetricReport, out) -> None:
    print(rep.render(), file=out)


def cmd_eval(args, out) -> int:
    ckpt, model = _load_model(args.checkpoint)
    cfg = ckpt.config
    _echo_config(cfg, out)
    scores = []
    for vol, lab in _test_set(cfg, args.seed):
        probs = train_mod.predict_probs(model, vol[None])[0]
        pred = metrics.SegmentationMask(np.argmax(probs, axis=0))
        rep = metrics.evaluate(pred, metrics.SegmentationMask(lab), cfg.num_classes)
        scores.append(rep)
    mean_dsc = float(np.mean([r.avg_dsc for r in scores]))
    _print_report(scores[-1], out)
    print(f"mean_dsc\t{mean_dsc:.6f}", file=out)
    return EXIT_OK


def cmd_ensemble(args, out) -> int:
    ckpt_a, model_a = _load_model(args.ckpt_a)
    ckpt_b, model_b = _load_model(args.ckpt_b)
    if serialize_config(ckpt_a.config) != serialize_config(ckpt_b.config):
        raise FormatError("ensemble checkpoints have different configs")
    cfg = ckpt_a.config
    _echo_config(cfg, out)
    scores = []
    for vol, lab in _test_set(cfg, args.seed):
        pa = train_mod.predict_probs(model_a, vol[None])[0]
        pb = train_mod.predict_probs(model_b, vol[None])[0]
        pred = metrics.nn_avg(pa, pb)
        rep = metrics.evaluate(pred, metrics.SegmentationMask(lab), cfg.num_classes)
        scores.append(rep)
    mean_dsc = float(np.mean([r.avg_dsc for r in scores]))
    _print_report(scores[-1], out)
    print(f"mean_dsc\t{mean_dsc:.6f}", file=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="volformer", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject-fault", type=float, default=0.0, help=argparse.SUPPRESS)
    g.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("shapes", help="stage shape table for a config")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_shapes)

    c = sub.add_parser("complexity", help="analytic vs instrumented attention MACs")
    c.add_argument("--config", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_complexity)

    t = sub.add_parser("train", help="train on synthetic scans")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--iters", type=int, default=25)
    t.add_argument("--batch-size", type=int, default=2)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a synthetic test set")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    n = sub.add_parser("ensemble", help="average two checkpoints' predictions")
    n.add_argument("--ckpt-a", required=True)
    n.add_argument("--ckpt-b", required=True)
    n.add_argument("--seed", type=int, default=0)
    n.set_defaults(fn=cmd_ensemble)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args, sys.stdout)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
