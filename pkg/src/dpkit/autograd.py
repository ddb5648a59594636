"""A small reverse-mode autodiff engine over float64 numpy arrays.

Operations executed inside ``with Tape() as tape:`` are recorded whenever an
input requires gradients.  ``backward`` replays the tape in reverse for a
scalar loss; ``per_sample_backward`` does the same for a vector of
per-example losses and keeps a leading batch axis on every parameter
gradient, so row ``i`` is the gradient of example ``i``'s loss alone.  The
per-sample path relies on every recorded op being independent across the
batch axis, which holds for all the layer ops below.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dpkit.errors import LabelError, ShapeError

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)
_checked: contextvars.ContextVar[bool] = contextvars.ContextVar("checked", default=False)


@contextlib.contextmanager
def checked_mode(enabled: bool = True):
    """Reject non-finite values in every op output while active."""
    token = _checked.set(enabled)
    try:
        yield
    finally:
        _checked.reset(token)


class Tensor:
    """Immutable float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 check: bool = True):
        arr = np.array(data, dtype=np.float64, copy=True)
        if check and not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # 0-d arithmetic hands back numpy scalars, which cannot be frozen
        arr = np.asarray(arr, dtype=np.float64)
        if _checked.get() and not np.all(np.isfinite(arr)):
            raise FloatingPointError("op produced NaN or Inf")
        out = object.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


# backward(g, per_sample) -> one gradient (or None) per input
BackwardFn = Callable[[np.ndarray, bool], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    batched: tuple[bool, ...]


@dataclass
class Tape:
    """Ordered record of primitive ops; a DAG by construction."""

    nodes: list[Node] = field(default_factory=list)
    _token: object = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        return False

    def leaves(self) -> list[Tensor]:
        """Gradient-requiring inputs that no recorded op produced, in first-use order."""
        produced = {id(n.output) for n in self.nodes}
        seen, out = set(), []
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, inputs, out_data, backward, batched=None):
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape.get()
    out = Tensor._wrap(out_data, needs and tape is not None)
    if needs and tape is not None:
        if batched is None:
            batched = (True,) * len(inputs)
        tape.nodes.append(Node(op, tuple(inputs), out, backward, tuple(batched)))
    return out


def _sum_to_shape(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g, per_sample):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _record("add", (a, b), a.data + b.data, backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g, per_sample):
        return _sum_to_shape(g * b.data, a.shape), _sum_to_shape(g * a.data, b.shape)

    return _record("mul", (a, b), a.data * b.data, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g, per_sample):
        return (g * mask,)

    return _record("relu", (x,), np.where(mask, x.data, 0.0), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def backward(g, per_sample):
        return (g.reshape(old),)

    return _record("reshape", (x,), x.data.reshape(shape).copy(), backward)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the batch axis."""
    return reshape(x, (x.shape[0], -1))


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g, per_sample):
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (x,), np.array(x.data.sum()), backward, batched=(False,))


def total(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of every element of every tensor (scalar)."""
    out = tensor_sum(tensors[0])
    for t in tensors[1:]:
        out = add(out, tensor_sum(t))
    return out


# ---------------------------------------------------------------- layers

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape [B, F] and weight of shape [O, F]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    xd, wd = x.data, weight.data

    def backward(g, per_sample):
        gx = g @ wd
        if per_sample:
            gw = g[:, :, None] * xd[:, None, :]
            gb = g
        else:
            gw = g.T @ xd
            gb = g.sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record("linear", inputs, out, backward, batched=(True,) + (False,) * (len(inputs) - 1))


def _out_size(n, k, stride, padding):
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(f"conv2d: size {n} with kernel {k}, stride {stride}, padding {padding}"
                         " does not tile evenly")
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [B, Cin, H, W] with kernel [Cout, Cin, kH, kW]."""
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {kernel.shape[0]} channels")
    B, cin, H, W = x.shape
    cout, _, kh, kw = kernel.shape
    oh = _out_size(H, kh, stride, padding)
    ow = _out_size(W, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols[b, p, (c, i, j)] with p running over output positions
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, oh * ow, cin * kh * kw)
    wmat = kernel.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, oh, ow, cout).transpose(0, 3, 1, 2).copy()

    def backward(g, per_sample):
        gm = g.transpose(0, 2, 3, 1).reshape(B, oh * ow, cout)
        dcols = (gm @ wmat).reshape(B, oh, ow, cin, kh, kw)
        dxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + H, padding:padding + W]
        if per_sample:
            dw = np.matmul(gm.transpose(0, 2, 1), cols).reshape(B, cout, cin, kh, kw)
            db = g.sum(axis=(2, 3))
        else:
            dw = (gm.reshape(-1, cout).T @ cols.reshape(-1, cols.shape[-1])).reshape(kernel.shape)
            db = g.sum(axis=(0, 2, 3))
        return (dx, dw, db) if bias is not None else (dx, dw)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _record("conv2d", inputs, out, backward, batched=(True,) + (False,) * (len(inputs) - 1))


def avgpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling; spatial dims must be divisible by ``size``."""
    B, C, H, W = x.shape
    if H % size or W % size:
        raise ShapeError(f"avgpool2d: spatial size {H}x{W} not divisible by {size}")
    out = x.data.reshape(B, C, H // size, size, W // size, size).mean(axis=(3, 5))

    def backward(g, per_sample):
        g = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
        return (g / (size * size),)

    return _record("avgpool2d", (x,), out, backward)


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer labels under softmax(logits).

    ``reduction`` is ``"mean"`` (scalar), ``"sum"`` (scalar) or ``"none"``
    (one loss per example).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [B, K], got {logits.shape}")
    B, K = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise ShapeError(f"expected {B} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if np.any(labels != np.round(labels)):
            raise LabelError("labels must be integers")
        labels = labels.astype(np.int64)
    if B and (labels.min() < 0 or labels.max() >= K):
        raise LabelError(f"labels must lie in [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    per_example = logsum - z[np.arange(B), labels]
    probs = np.exp(z - logsum[:, None])
    onehot = np.zeros_like(probs)
    onehot[np.arange(B), labels] = 1.0
    dlogits = probs - onehot

    if reduction == "none":
        def backward(g, per_sample):
            return (dlogits * g[:, None],)
        return _record("xent", (logits,), per_example, backward)
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    scale = 1.0 / B if reduction == "mean" else 1.0

    def backward(g, per_sample):
        return (dlogits * (g * scale),)

    return _record("xent", (logits,), np.array(per_example.sum() * scale), backward,
                   batched=(False,))


# ---------------------------------------------------------------- backward

def _run(tape: Tape, root: Tensor, seed: np.ndarray, per_sample: bool):
    grads = {id(root): seed}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g, per_sample)
        for t, gi, batched in zip(node.inputs, in_grads, node.batched):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
    return grads


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``params`` (default: tape leaves).

    A parameter the loss does not depend on gets a zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"invalid root: backward needs a scalar loss, got shape {loss.shape}")
    if params is None:
        params = tape.leaves()
    if not loss.requires_grad:
        return [np.zeros(p.shape) for p in params]
    grads = _run(tape, loss, np.ones(loss.shape), per_sample=False)
    return [grads.get(id(p), np.zeros(p.shape)).reshape(p.shape) for p in params]


@dataclass(frozen=True)
class PerSampleGrads:
    """One flattened gradient row per example; columns follow ``shapes`` in order."""

    rows: np.ndarray
    shapes: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        expected = sum(int(np.prod(s)) for s in self.shapes)
        if self.rows.ndim != 2 or self.rows.shape[1] != expected:
            raise ShapeError(f"rows {self.rows.shape} do not match parameter count {expected}")

    @property
    def batch_size(self) -> int:
        return self.rows.shape[0]

    @property
    def num_params(self) -> int:
        return self.rows.shape[1]

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.rows, axis=1)

    def with_rows(self, rows: np.ndarray) -> "PerSampleGrads":
        return PerSampleGrads(rows, self.shapes)


def per_sample_backward(tape: Tape, per_example_losses: Tensor,
                        params: Sequence[Tensor] | None = None) -> PerSampleGrads:
    """Per-example gradients of a [B] loss vector, one flattened row per example."""
    if per_example_losses.data.ndim != 1:
        raise ShapeError(f"per-example losses must be a vector, got {per_example_losses.shape}")
    if params is None:
        params = tape.leaves()
    B = per_example_losses.shape[0]
    shapes = tuple(p.shape for p in params)
    P = sum(int(np.prod(s)) for s in shapes)
    if not per_example_losses.requires_grad:
        return PerSampleGrads(np.zeros((B, P)), shapes)
    param_ids = {id(p) for p in params}
    for node in tape.nodes:
        if node.batched == (False,):
            raise ShapeError(f"per-sample backward needs batch-separable ops, found {node.op!r}")
        for t, batched in zip(node.inputs, node.batched):
            # only layer ops know how to keep a batch axis on parameter grads
            if batched and id(t) in param_ids:
                raise ShapeError(f"parameter consumed by {node.op!r}, which has no per-sample rule")
    grads = _run(tape, per_example_losses, np.ones(B), per_sample=True)
    rows = np.zeros((B, P))
    col = 0
    for p, s in zip(params, shapes):
        n = int(np.prod(s))
        g = grads.get(id(p))
        if g is not None:
            if g.shape[0] != B or g.size != B * n:
                raise ShapeError(f"batch mismatch in per-sample gradient for shape {s}")
            rows[:, col:col + n] = g.reshape(B, n)
        col += n
    return PerSampleGrads(rows, shapes)
