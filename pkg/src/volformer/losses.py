"""Joint cross-entropy + soft Dice segmentation loss with three-scale
deep supervision. Auxiliary ground truth is obtained by label-preserving
nearest-neighbor down-sampling; scale weights halve per resolution drop
and normalize to 1, i.e. exactly (4/7, 2/7, 1/7).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import DataError
from .tensor import Tensor

DICE_EPS = 1e-5


@dataclass(frozen=True)
class DeepSupervisionWeights:
    alpha1: float = 4.0 / 7.0
    alpha2: float = 2.0 / 7.0
    alpha3: float = 1.0 / 7.0

    def as_tuple(self):
        return (self.alpha1, self.alpha2, self.alpha3)


def _one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(
            f"labels out of range [0, {num_classes}): found {labels.min()}..{labels.max()}"
        )
    eye = np.eye(num_classes, dtype=dtype)
    return eye[labels]  # (..., K)


def ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over voxels of -log softmax probability of the true class.

    logits: (N, K, H, W, D); labels: integer (N, H, W, D).
    """
    k = logits.shape[1]
    onehot = _one_hot(labels, k, logits.dtype.type)
    logp = ops.log_softmax(ops.moveaxis(logits, 1, -1))
    picked = ops.mul(logp, Tensor(onehot))
    n_vox = labels.size
    return ops.scale(ops.sum_(picked), -1.0 / n_vox)


def dice_loss(logits: Tensor, labels: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - mean over foreground classes of the soft Dice overlap
    (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    k = logits.shape[1]
    onehot = _one_hot(labels, k, logits.dtype.type)  # (N, H, W, D, K)
    probs = ops.softmax(ops.moveaxis(logits, 1, -1))
    dices = []
    for c in range(1, k):
        p = ops.narrow(probs, -1, c, 1)
        g = Tensor(onehot[..., c : c + 1])
        num = ops.add(ops.scale(ops.sum_(ops.mul(p, g)), 2.0), eps)
        den = ops.add(ops.add(ops.sum_(p), ops.sum_(g)), eps)
        dices.append(ops.div(num, den))
    total = dices[0]
    for d in dices[1:]:
        total = ops.add(total, d)
    return ops.sub(Tensor(np.asarray(1.0, dtype=logits.dtype)), ops.scale(total, 1.0 / len(dices)))


def seg_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    return ops.add(ce_loss(logits, labels), dice_loss(logits, labels))


def downsample_labels(labels: np.ndarray, target: tuple[int, int, int]) -> np.ndarray:
    """Nearest-neighbor label down-sampling to `target` spatial extents."""
    out = labels
    for axis, t in enumerate(target, start=labels.ndim - 3):
        n = out.shape[axis]
        idx = (np.arange(t) * n) // t
        out = np.take(out, idx, axis=axis)
    return out


def total_loss(
    outputs,
    labels: np.ndarray,
    weights: DeepSupervisionWeights = DeepSupervisionWeights(),
) -> Tensor:
    """Weighted sum of (ce + dice) at the three supervised resolutions."""
    total = None
    for logit, alpha in zip(outputs, weights.as_tuple()):
        if alpha == 0.0:
            continue
        lab = downsample_labels(labels, logit.shape[2:])
        term = ops.scale(seg_loss(logit, lab), alpha)
        total = term if total is None else ops.add(total, term)
    return total
