"""Finite-difference gradient checking against the tape's analytic grads.

Central differences with step 1e-3 in float64; relative error uses the
denominator max(|analytic|, |numeric|, 1e-8). Failures are reported, not
raised.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    passed: bool
    tolerance: float

    def __post_init__(self):
        self.passed = self.max_rel_error <= self.tolerance

    def row(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{self.op_name}\t{self.max_rel_error:.3e}\t{self.tolerance:.1e}\t{status}"


def gradcheck(
    op_name: str,
    fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-3,
    grad_fault: float = 0.0,
) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued `fn` with central differences.

    `fn` receives a list of Tensors (float64, requires_grad) and must return
    a scalar Tensor. `grad_fault` is a test hook that perturbs the analytic
    gradient to prove the checker catches broken vjps.
    """
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in inputs]
    with Tape() as tape:
        loss = fn(tensors)
    backward(loss, tape)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    if grad_fault:
        analytic[0] = analytic[0] + grad_fault

    def eval_loss() -> float:
        frozen = [Tensor(t.data) for t in tensors]
        with Tape(profile=False):
            return fn(frozen).item()

    max_rel = 0.0
    for t, a_grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        g_flat = a_grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = eval_loss()
            flat[i] = orig - step
            f_minus = eval_loss()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(g_flat[i]), abs(numeric), 1e-8)
            max_rel = max(max_rel, abs(g_flat[i] - numeric) / denom)
    return GradCheckReport(op_name, max_rel, False, tolerance)
