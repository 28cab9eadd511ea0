"""Reverse-mode automatic differentiation over dense float64 arrays.

The design is define-by-run: a ``Tape`` is opened for each forward pass,
every differentiable operation appends one node, and ``backward`` replays
the nodes in exact reverse append order. Tensors are row-major float64
throughout; there is no broadcasting beyond the trailing-dimension gain of
``rms_norm``. Reductions, slices, and concatenation are explicit ops.

Gradient accumulation is additive: running ``backward`` twice on the same
tape without clearing grads doubles them. Gradient buffers local to one
backward call live in a scratch map, so repeated calls stay exact.
"""

from __future__ import annotations

import math
import os
from typing import Sequence

import numpy as np

from . import kernels
from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateInputError,
    ShapeMismatchError,
)

_DEBUG_CHECKS = os.environ.get("NERLAB_DEBUG_CHECKS", "") not in ("", "0")


def set_debug_checks(enabled: bool) -> None:
    """Toggle the per-op finiteness assertion (off by default for speed)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = enabled


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    ``data`` is always C-contiguous; ``grad`` is either None or an array of
    the same shape. ``requires_grad`` marks leaves the optimizer may update
    and propagates to results of ops that consume them.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded op: output tensor plus a closure pushing grads to inputs."""

    __slots__ = ("op", "inputs", "output", "push_grads")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, push_grads):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.push_grads = push_grads


class Tape:
    """Append-only op record for one forward pass; context manager."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE
        _ACTIVE = self._prev
        self._prev = None


_ACTIVE: Tape | None = None


def _finite_or_raise(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"non-finite values produced by op {op!r}")


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, push_grads) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    if _DEBUG_CHECKS:
        _finite_or_raise(op, out.data)
    if _ACTIVE is not None and out.requires_grad:
        _ACTIVE.nodes.append(TapeNode(op, inputs, out, push_grads))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from loss.

    Traverses the tape in exact reverse append order. Accumulation into
    ``Tensor.grad`` is additive across calls.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    scratch: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        dout = scratch.get(id(node.output))
        if dout is None:
            continue
        grads = node.push_grads(dout)
        for tensor, g in zip(node.inputs, grads):
            if g is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in scratch:
                scratch[key] = scratch[key] + g
            else:
                scratch[key] = g
                seen[key] = tensor
    for key, tensor in seen.items():
        if not tensor.requires_grad:
            continue
        g = scratch[key].reshape(tensor.data.shape)
        if tensor.grad is None:
            tensor.grad = g.copy()
        else:
            tensor.grad += g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda d: (d, d))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda d: (d, -d))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return _record("mul", (a, b), a.data * b.data, lambda d: (d * b.data, d * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda d: (d * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a.data @ b.data

    def push(d):
        return d @ b.data.T, a.data.T @ d

    return _record("matmul", (a, b), out, push)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"transpose: expected 2-d tensor, got shape {a.shape}")
    return _record("transpose", (a,), a.data.T.copy(), lambda d: (d.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != a.data.size:
        raise ShapeMismatchError(f"reshape: cannot view shape {a.shape} as {shape}")
    return _record("reshape", (a,), a.data.reshape(shape), lambda d: (d.reshape(a.data.shape),))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start < stop <= a.shape[0]):
        raise ShapeMismatchError(f"slice_rows: [{start}:{stop}] invalid for shape {a.shape}")

    def push(d):
        g = np.zeros_like(a.data)
        g[start:stop] = d
        return (g,)

    return _record("slice_rows", (a,), a.data[start:stop].copy(), push)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start < stop <= a.shape[1]):
        raise ShapeMismatchError(f"slice_cols: [{start}:{stop}] invalid for shape {a.shape}")

    def push(d):
        g = np.zeros_like(a.data)
        g[:, start:stop] = d
        return (g,)

    return _record("slice_cols", (a,), a.data[:, start:stop].copy(), push)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols of zero tensors")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeMismatchError(
                f"concat_cols: incompatible part shapes {[p.shape for p in parts]}"
            )
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def push(d):
        return tuple(d[:, offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _record("concat_cols", tuple(parts), np.concatenate([p.data for p in parts], axis=1), push)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeMismatchError(f"gather_rows: expected 2-d table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: id out of range for table with {table.shape[0]} rows")

    def push(d):
        g = np.zeros_like(table.data)
        np.add.at(g, ids, d)
        return (g,)

    return _record("gather_rows", (table,), table.data[ids], push)


def mean_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise ContractError(f"mean_rows: expected nonempty 2-d tensor, got {a.shape}")
    n = a.shape[0]
    return _record(
        "mean_rows", (a,), a.data.mean(axis=0), lambda d: (np.tile(d / n, (n, 1)),)
    )


def sum_all(a: Tensor) -> Tensor:
    return _record(
        "sum_all", (a,), np.asarray(a.data.sum()), lambda d: (np.full_like(a.data, float(d)),)
    )


def stack_scalars(items: Sequence[Tensor]) -> Tensor:
    if not items:
        raise ContractError("stack_scalars of zero tensors")
    for t in items:
        if t.data.size != 1:
            raise ContractError(f"stack_scalars: non-scalar element of shape {t.shape}")
    out = np.array([float(t.data.reshape(())) for t in items])

    def push(d):
        return tuple(np.asarray(d[i]) for i in range(len(items)))

    return _record("stack_scalars", tuple(items), out, push)


def logsumexp(a: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.data.size == 0:
        raise ContractError(f"logsumexp: expected nonempty 1-d tensor, got {a.shape}")
    hi = a.data.max()
    e = np.exp(a.data - hi)
    total = e.sum()
    out = np.asarray(hi + np.log(total))
    soft = e / total
    return _record("logsumexp", (a,), out, lambda d: (soft * float(d),))


# ---------------------------------------------------------------------------
# model-facing fused ops
# ---------------------------------------------------------------------------


def silu(a: Tensor) -> Tensor:
    return _record("silu", (a,), kernels.silu_fwd(a.data), lambda d: (kernels.silu_bwd(a.data, d),))


def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """Row-wise RMS normalization with a trailing-dimension gain.

    y[i, j] = gain[j] * x[i, j] / sqrt(mean_k x[i, k]^2 + eps)

    Accepts a single row as a 1-d tensor.
    """
    if eps < 0:
        raise ConfigurationError("rms_norm: eps must be nonnegative")
    one_d = x.data.ndim == 1
    rows = x.data[None, :] if one_d else x.data
    if rows.ndim != 2 or gain.data.ndim != 1 or gain.shape[0] != rows.shape[1]:
        raise ShapeMismatchError(
            f"rms_norm: shapes {x.shape} and gain {gain.shape} do not conform"
        )
    y, inv = kernels.rms_norm_fwd(rows, gain.data, eps)

    def push(d):
        drows = d[None, :] if one_d else d
        dx, dgain = kernels.rms_norm_bwd(rows, gain.data, inv, drows)
        return dx[0] if one_d else dx, dgain

    return _record("rms_norm", (x, gain), y[0] if one_d else y, push)


def swiglu(x: Tensor, w_gate: Tensor, w_up: Tensor) -> Tensor:
    """Gated MLP activation: silu(x @ w_gate) * (x @ w_up)."""
    return mul(silu(matmul(x, w_gate)), matmul(x, w_up))


def _rope_angles(positions: Sequence[int], head_dim: int, base: float):
    pos = np.asarray(positions, dtype=np.float64)
    pair = np.arange(head_dim // 2, dtype=np.float64)
    theta = pos[:, None] * base ** (-2.0 * pair / head_dim)[None, :]
    return np.cos(theta), np.sin(theta)


def rope_rotate(x: Tensor, positions: Sequence[int], base: float) -> Tensor:
    """Rotary position encoding over consecutive coordinate pairs.

    Accepts (seq, head_dim) or (seq, heads, head_dim); pair i of the token at
    position p is rotated by angle p * base^(-2i / head_dim). Rotations are
    isometries, so per-pair norms are preserved exactly.
    """
    squeeze = x.data.ndim == 2
    arr = x.data[:, None, :] if squeeze else x.data
    if arr.ndim != 3:
        raise ShapeMismatchError(f"rope_rotate: expected 2-d or 3-d tensor, got {x.shape}")
    seq, _, head_dim = arr.shape
    if head_dim % 2 != 0:
        raise ConfigurationError(f"rope_rotate: head dimension {head_dim} must be even")
    if len(positions) != seq:
        raise ShapeMismatchError(
            f"rope_rotate: {len(positions)} positions for sequence length {seq}"
        )
    cos, sin = _rope_angles(positions, head_dim, base)
    out = kernels.rope_apply(np.ascontiguousarray(arr), cos, sin)

    def push(d):
        darr = d[:, None, :] if squeeze else d
        dx = kernels.rope_apply(np.ascontiguousarray(darr), cos, -sin)
        return (dx[:, 0, :] if squeeze else dx,)

    return _record("rope_rotate", (x,), out[:, 0, :] if squeeze else out, push)


def causal_softmax(scores: Tensor) -> Tensor:
    """Row-wise softmax under a strict causal mask (row i attends to j <= i)."""
    if scores.data.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeMismatchError(f"causal_softmax: expected square scores, got {scores.shape}")
    probs = kernels.causal_softmax_fwd(scores.data)
    return _record(
        "causal_softmax", (scores,), probs, lambda d: (kernels.causal_softmax_bwd(probs, d),)
    )


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of targets under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise ShapeMismatchError(
            f"softmax_cross_entropy: logits {logits.shape} with {targets.shape} targets"
        )
    n, vocab = logits.shape
    if n < 1:
        raise ContractError("softmax_cross_entropy: need at least one row")
    if targets.min() < 0 or targets.max() >= vocab:
        raise IndexError(f"softmax_cross_entropy: target out of range [0, {vocab})")
    loss, probs = kernels.softmax_xent_fwd(logits.data, targets)

    def push(d):
        g = probs.copy()
        g[np.arange(n), targets] -= 1.0
        g *= float(d) / n
        return (g,)

    return _record("softmax_cross_entropy", (logits,), np.asarray(loss), push)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two nonzero vectors, in [-1, 1]."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatchError(f"cosine_similarity: shapes {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine_similarity: zero-norm input vector")
    dot = float(a.data @ b.data)
    s = dot / (na * nb)

    def push(d):
        d = float(d)
        da = d * (b.data / (na * nb) - s * a.data / (na * na))
        db = d * (a.data / (na * nb) - s * b.data / (nb * nb))
        return da, db

    return _record("cosine_similarity", (a, b), np.asarray(s), push)
