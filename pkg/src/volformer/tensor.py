"""Dense tensors with reverse-mode differentiation on an explicit tape.

Layout convention is row-major with axis order (N, C, H, W, D) for 5-D
feature maps. A tensor either participates in a tape (single-writer
execution context) or is an immutable value.

Multiply-accumulate accounting: the tape counts 2 units per MAC (one
multiply + one add), partitioned by op class. Only matrix products and
convolutions are counted; softmax / norms / activations are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import UsageError

# MAC accounting classes.
PROJECTION = "projection"
ATTENTION = "attention"
CONVOLUTION = "convolution"
OTHER = "other"
MAC_CLASSES = (PROJECTION, ATTENTION, CONVOLUTION, OTHER)


class Tensor:
    """N-dimensional real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_traced")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        # True once this tensor is a leaf with requires_grad or the output
        # of a recorded node; controls whether downstream ops record.
        self._traced = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    """One recorded op: inputs in topological order plus a vjp closure."""

    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    name: str = ""


class Tape:
    """Ordered op record plus the MAC accumulator.

    A tape and its tensors form one execution context; it is not meant to
    be shared between concurrent writers. Entering the tape as a context
    manager makes it the active recording target.
    """

    def __init__(self, profile: bool = True):
        self.nodes: list[Node] = []
        self.profile = profile
        self.mac_counts: dict[str, int] = {c: 0 for c in MAC_CLASSES}
        self.scoped_counts: dict[tuple[str, str], int] = {}
        self._scope_stack: list[str] = []

    # -- recording ---------------------------------------------------------

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def add_macs(self, mac_class: str, units: int) -> None:
        if not self.profile:
            return
        self.mac_counts[mac_class] += units
        scope = self._scope_stack[-1] if self._scope_stack else ""
        key = (scope, mac_class)
        self.scoped_counts[key] = self.scoped_counts.get(key, 0) + units

    def scope(self, name: str):
        return _Scope(self, name)

    @property
    def mac_total(self) -> int:
        return sum(self.mac_counts.values())


class _Scope:
    def __init__(self, tape: Tape, name: str):
        self.tape = tape
        self.name = name

    def __enter__(self):
        stack = self.tape._scope_stack
        full = f"{stack[-1]}/{self.name}" if stack else self.name
        stack.append(full)
        return self

    def __exit__(self, *exc):
        self.tape._scope_stack.pop()


_ACTIVE: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def record(out: Tensor, inputs: tuple[Tensor, ...], vjp, name: str = "") -> None:
    """Append a node to the active tape if any input carries gradient flow."""
    tape = active_tape()
    if tape is None:
        return
    if any(t._traced for t in inputs):
        out._traced = True
        tape.nodes.append(Node(inputs, out, vjp, name))


def count_macs(mac_class: str, macs: int) -> None:
    """Register `macs` multiply-accumulates (2 units each) on the active tape."""
    tape = active_tape()
    if tape is not None:
        tape.add_macs(mac_class, 2 * macs)


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse sweep: populate .grad on every requires_grad tensor reachable
    from `loss` through the tape. d(loss)/d(loss) == 1."""
    if loss.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        loss.grad = grads[id(loss)]
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.vjp(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t._traced:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if t.requires_grad:
                t.grad = grads[key]


@dataclass
class MacReport:
    """Per-op-class MAC totals, in tape units (1 MAC = 2 units)."""

    projection: int = 0
    attention: int = 0
    convolution: int = 0
    other: int = 0
    by_scope: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.projection + self.attention + self.convolution + self.other

    @property
    def attention_class_macs(self) -> int:
        """Projection + attention matmul count expressed in MACs (units / 2)."""
        return (self.projection + self.attention) // 2


def mac_report(tape: Tape) -> MacReport:
    """Partition the tape's counted operations by op class."""
    return MacReport(
        projection=tape.mac_counts[PROJECTION],
        attention=tape.mac_counts[ATTENTION],
        convolution=tape.mac_counts[CONVOLUTION],
        other=tape.mac_counts[OTHER],
        by_scope=dict(tape.scoped_counts),
    )
