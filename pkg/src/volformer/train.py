"""Training loop: epochs x iterations over synthetic scans, joint
CE + Dice with three-scale deep supervision, poly LR decay, SGD with
momentum and weight decay. Logs one tab-separated line per epoch
(`epoch  lr  train_loss  val_dsc`) and writes end + best-DSC checkpoints.
Everything is keyed off a single seed for exact reproducibility.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from . import data, losses, metrics, optim
from .config import ModelConfig
from .model import Model, build_model, forward
from .tensor import Tape, Tensor, backward

VAL_SEED_OFFSET = 10_000
VAL_SET_SIZE = 4


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_dsc: float

    def render(self) -> str:
        return f"{self.epoch}\t{self.lr:.6e}\t{self.train_loss:.6f}\t{self.val_dsc:.6f}"


@dataclass
class TrainResult:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_dsc: float = -1.0
    aborted: bool = False

    def log_text(self) -> str:
        return "\n".join(r.render() for r in self.records) + "\n"


def data_spec(cfg: ModelConfig) -> data.SyntheticSpec:
    return data.SyntheticSpec(
        crop_size=cfg.crop_size,
        num_classes=cfg.num_classes,
        in_channels=cfg.in_channels,
    )


def predict_labels(model: Model, volume: np.ndarray) -> np.ndarray:
    """Argmax class map for a batch (N,C,H,W,D), no tape."""
    logits, _, _ = forward(model, Tensor(volume), tape=None)
    return np.argmax(logits.data, axis=1)


def predict_probs(model: Model, volume: np.ndarray) -> np.ndarray:
    """Softmax probability maps (N,K,H,W,D), no tape."""
    logits, _, _ = forward(model, Tensor(volume), tape=None)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def validation_dsc(model: Model, cfg: ModelConfig, seed: int) -> float:
    """Mean foreground DSC over a small held-out synthetic set."""
    spec = data_spec(cfg)
    scores = []
    for i in range(VAL_SET_SIZE):
        vol, lab = data.gen_synthetic(spec, seed + VAL_SEED_OFFSET, i)
        pred = predict_labels(model, vol[None])[0]
        rep = metrics.evaluate(
            metrics.SegmentationMask(pred), metrics.SegmentationMask(lab), cfg.num_classes
        )
        scores.append(rep.avg_dsc)
    return float(np.mean(scores))


def train(
    cfg: ModelConfig,
    opt_cfg: optim.OptimizerConfig,
    seed: int,
    out_dir: str,
    log=None,
) -> TrainResult:
    os.makedirs(out_dir, exist_ok=True)
    model = build_model(cfg, seed=seed)
    named = model.named_parameters()
    state = optim.SgdState()
    spec = data_spec(cfg)
    result = TrainResult()

    def write_ckpt(tag: str, epoch: int) -> None:
        ck = ckpt_io.from_model(cfg, named, state, rng_state=seed, epoch=epoch)
        ckpt_io.save_checkpoint(os.path.join(out_dir, f"{tag}.nnf"), ck)

    for epoch in range(opt_cfg.max_epoch):
        lr = optim.poly_lr(epoch, opt_cfg)
        epoch_losses = []
        for it in range(opt_cfg.iters_per_epoch):
            base = (epoch * opt_cfg.iters_per_epoch + it) * opt_cfg.batch_size
            idx = range(base, base + opt_cfg.batch_size)
            vols, labs = data.make_batch(spec, seed, idx, train=True, epoch=epoch)
            tape = Tape()
            with tape:
                outputs = forward(model, Tensor(vols), tape=tape)
                loss = losses.total_loss(outputs, labs)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                write_ckpt("last", epoch)
                result.aborted = True
                if log:
                    log(f"abort: non-finite loss at epoch {epoch} iter {it}")
                return result
            backward(loss, tape)
            optim.sgd_step(named, state, lr, opt_cfg)
            optim.zero_grads(named)
            epoch_losses.append(loss_val)
        val = validation_dsc(model, cfg, seed)
        rec = EpochRecord(epoch, lr, float(np.mean(epoch_losses)), val)
        result.records.append(rec)
        if log:
            log(rec.render())
        if val > result.best_dsc:
            result.best_dsc = val
            result.best_epoch = epoch
            write_ckpt("best", epoch)
    write_ckpt("end", opt_cfg.max_epoch - 1)
    return result
