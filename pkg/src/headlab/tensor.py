"""Dense float64 tensors with opt-in reverse-mode differentiation.

Forward math runs on plain numpy arrays. While a ComputationRecord is
active (entered as a context manager) every primitive appends one step
holding the cached state needed to run its backward pass and to replay
the forward exactly. Inference code simply never opens a record and pays
no taping cost.

Gradients come back in a GradientStore keyed by tensor identity. By
default only leaf tensors (parameters, inputs) receive gradients;
intermediate activations can be marked with ``record.tap(t)`` to have
their gradients retained as well.
"""

from __future__ import annotations

import itertools
import math
import threading

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "ComputationRecord",
    "GradientStore",
    "backward",
    "matmul",
    "linear",
    "softmax",
    "relu",
    "layer_norm",
    "embedding_lookup",
    "cross_entropy",
    "add",
    "mul",
    "scale",
    "reshape",
    "transpose_last2",
    "select_position",
    "sum_all",
    "mean_all",
    "dropout",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_uids = itertools.count(1)
_active = threading.local()


def _current_record():
    stack = getattr(_active, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense array of 64-bit floats, treated as immutable once produced.

    Operations never write to their operands or outputs. Training code may
    swap a parameter's buffer between evaluations (single writer); records
    built before such a swap must not be reused afterwards.
    """

    __slots__ = ("data", "uid")

    def __init__(self, data):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.uid = next(_uids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal: adopt a freshly computed array without copying.
        t = cls.__new__(cls)
        t.data = arr
        t.uid = next(_uids)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")

    def tolist(self):
        return self.data.tolist()

    def copy(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, uid={self.uid})"


class _Step:
    __slots__ = ("name", "out", "inputs", "backward", "recompute")

    def __init__(self, name, out, inputs, backward, recompute):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.recompute = recompute


class ComputationRecord:
    """Ordered list of primitive operations taped during one forward pass.

    A record is confined to the single evaluation that builds it. Steps are
    appended in execution order, so reverse iteration visits them in reverse
    topological order.
    """

    def __init__(self):
        self._steps: list[_Step] = []
        self._outputs: dict[int, Tensor] = {}
        self._taps: dict[int, Tensor] = {}

    def __enter__(self) -> "ComputationRecord":
        stack = getattr(_active, "stack", None)
        if stack is None:
            stack = _active.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._steps)

    def _add(self, step: _Step) -> None:
        self._steps.append(step)
        self._outputs[step.out.uid] = step.out

    def tap(self, t: Tensor) -> Tensor:
        """Mark an activation so backward() retains its gradient."""
        self._taps[t.uid] = t
        return t

    def produced(self, t: Tensor) -> bool:
        return t.uid in self._outputs

    def replay(self) -> None:
        """Re-run every recorded forward step and check outputs bit-exactly."""
        for step in self._steps:
            fresh = step.recompute()
            if not np.array_equal(fresh, step.out.data):
                raise RuntimeError(f"replay of {step.name!r} did not reproduce its output")


def _register(name, out, inputs, backward_fn, recompute):
    rec = _current_record()
    if rec is not None:
        rec._add(_Step(name, out, inputs, backward_fn, recompute))


class GradientStore:
    """Gradients keyed by tensor identity; absent targets read as zeros."""

    def __init__(self, grads: dict[int, Tensor]):
        self._grads = grads

    def grad(self, t: Tensor) -> Tensor:
        g = self._grads.get(t.uid)
        if g is None:
            return Tensor._wrap(np.zeros_like(t.data))
        return g

    def has(self, t: Tensor) -> bool:
        return t.uid in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    @staticmethod
    def combine(stores: "list[GradientStore]") -> "GradientStore":
        """Sum gradients across stores (data-parallel reduction)."""
        merged: dict[int, Tensor] = {}
        for store in stores:
            for uid, g in store._grads.items():
                held = merged.get(uid)
                merged[uid] = g if held is None else Tensor._wrap(held.data + g.data)
        return GradientStore(merged)


def backward(record: ComputationRecord, loss: Tensor) -> GradientStore:
    """Reverse-traverse the record from a scalar loss.

    Returns gradients for every leaf tensor touched by the graph plus every
    tapped activation. Leaves the graph never reached keep zero gradients
    (``GradientStore.grad`` synthesizes zeros for unknown targets).
    """
    if not record.produced(loss):
        raise ValueError("loss tensor was not produced on this record")
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    for step in reversed(record._steps):
        g_out = grads.get(step.out.uid)
        if g_out is None:
            continue
        for t_in, g_in in zip(step.inputs, step.backward(g_out)):
            if g_in is None:
                continue
            if g_in.shape != t_in.data.shape:
                raise ShapeError(
                    f"backward of {step.name!r} produced gradient shape "
                    f"{g_in.shape} for input shape {t_in.data.shape}"
                )
            held = grads.get(t_in.uid)
            grads[t_in.uid] = g_in if held is None else held + g_in

    kept: dict[int, Tensor] = {}
    for uid, g in grads.items():
        if uid not in record._outputs or uid in record._taps:
            kept[uid] = Tensor._wrap(g)
    return GradientStore(kept)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch dims broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D or higher operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        out_arr = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}") from exc
    out = Tensor._wrap(out_arr)
    a_data, b_data = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b_data, -1, -2), a_data.shape)
        gb = _unbroadcast(np.swapaxes(a_data, -1, -2) @ g, b_data.shape)
        return ga, gb

    _register("matmul", out, (a, b), bwd, lambda: a_data @ b_data)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w.T + b`` with ``w`` of shape (out, in)."""
    if w.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D, got {w.shape}")
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear input dim {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear bias shape {b.shape} does not match weight {w.shape}")
    x_data, w_data = x.data, w.data

    def fwd():
        y = x_data @ w_data.T
        if b is not None:
            y = y + b.data
        return y

    out = Tensor._wrap(fwd())

    def bwd(g):
        gx = g @ w_data
        g2 = g.reshape(-1, w_data.shape[0])
        gw = g2.T @ x_data.reshape(-1, w_data.shape[1])
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    _register("linear", out, inputs, bwd, fwd)
    return out


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along one axis.

    Entries of -inf act as masked positions (weight exactly 0); a slice
    that is entirely -inf is an error.
    """
    nd = v.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"softmax axis {axis} invalid for shape {v.shape}")
    axis = axis % nd
    if v.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {v.shape}")
    v_data = v.data

    def fwd():
        m = np.max(v_data, axis=axis, keepdims=True)
        if not np.all(m > -np.inf):
            raise ValueError("softmax slice is fully masked (all -inf)")
        e = np.exp(v_data - m)
        return e / e.sum(axis=axis, keepdims=True)

    y = fwd()
    out = Tensor._wrap(y)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    _register("softmax", out, (v,), bwd, fwd)
    return out


def relu(x: Tensor) -> Tensor:
    x_data = x.data
    out = Tensor._wrap(np.maximum(x_data, 0.0))

    def bwd(g):
        return (g * (x_data > 0.0),)

    _register("relu", out, (x,), bwd, lambda: np.maximum(x_data, 0.0))
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    x_data = x.data
    mu = x_data.mean(axis=-1, keepdims=True)
    var = ((x_data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x_data - mu) * inv
    out = Tensor._wrap(xhat * gain.data + bias.data)
    g_data = gain.data

    def bwd(g):
        gh = g * g_data
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        gx = (gh - m1 - xhat * m2) * inv
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    def fwd():
        m = x_data.mean(axis=-1, keepdims=True)
        v = ((x_data - m) ** 2).mean(axis=-1, keepdims=True)
        return (x_data - m) / np.sqrt(v + eps) * g_data + bias.data

    _register("layer_norm", out, (x, gain, bias), bwd, fwd)
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (V, d) by an integer id array."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding id out of range for table with {table.shape[0]} rows")
    table_data = table.data
    out = Tensor._wrap(table_data[ids])

    def bwd(g):
        gt = np.zeros_like(table_data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table_data.shape[1]))
        return (gt,)

    _register("embedding_lookup", out, (table,), bwd, lambda: table_data[ids])
    return out


def cross_entropy(logits: Tensor, targets, pad_mask=None, per_sequence: bool = False) -> Tensor:
    """Mean negative log-likelihood of integer targets under the logits.

    ``pad_mask`` is boolean per position, True meaning the position is
    padding and excluded. With ``per_sequence`` the mean is taken within
    each sequence (axis 0 = batch) first and then across sequences, so
    long sequences do not dominate.
    """
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits {logits.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"target id out of range for vocabulary of size {v}")
    if pad_mask is None:
        valid = np.ones(targets.shape, dtype=bool)
    else:
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if pad_mask.shape != targets.shape:
            raise ShapeError(f"pad_mask shape {pad_mask.shape} does not match targets")
        valid = ~pad_mask
    if not valid.any():
        raise ValueError("cross_entropy: all positions are padded")

    if per_sequence:
        if targets.ndim < 2:
            raise ShapeError("per_sequence cross_entropy needs a batch axis")
        per_seq = valid.reshape(valid.shape[0], -1).sum(axis=1)
        if (per_seq == 0).any():
            raise ValueError("cross_entropy: a sequence has no unpadded positions")
        w = np.zeros(targets.shape, dtype=np.float64)
        w[valid] = 1.0
        w /= per_seq.reshape((-1,) + (1,) * (targets.ndim - 1))
        w /= targets.shape[0]
    else:
        w = valid / valid.sum()

    logits_data = logits.data

    def nll_matrix():
        m = logits_data.max(axis=-1, keepdims=True)
        z = logits_data - m
        lse = np.log(np.exp(z).sum(axis=-1)) + m[..., 0]
        picked = np.take_along_axis(logits_data, targets[..., None], axis=-1)[..., 0]
        return lse - picked

    out = Tensor._wrap(np.array((nll_matrix() * w).sum()))

    def bwd(g):
        m = logits_data.max(axis=-1, keepdims=True)
        e = np.exp(logits_data - m)
        probs = e / e.sum(axis=-1, keepdims=True)
        gl = probs * np.asarray(w)[..., None]
        flat = gl.reshape(-1, v)
        flat[np.arange(targets.size), targets.reshape(-1)] -= np.asarray(w).reshape(-1)
        return (gl * g,)

    _register("cross_entropy", out, (logits,), bwd, lambda: np.array((nll_matrix() * w).sum()))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a_data, b_data = a.data, b.data
    try:
        out = Tensor._wrap(a_data + b_data)
    except ValueError as exc:
        raise ShapeError(f"add shapes do not broadcast: {a.shape} + {b.shape}") from exc

    def bwd(g):
        return _unbroadcast(g, a_data.shape), _unbroadcast(g, b_data.shape)

    _register("add", out, (a, b), bwd, lambda: a_data + b_data)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a_data, b_data = a.data, b.data
    try:
        out = Tensor._wrap(a_data * b_data)
    except ValueError as exc:
        raise ShapeError(f"mul shapes do not broadcast: {a.shape} * {b.shape}") from exc

    def bwd(g):
        return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

    _register("mul", out, (a, b), bwd, lambda: a_data * b_data)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient to the constant)."""
    c = float(c)
    a_data = a.data
    out = Tensor._wrap(a_data * c)

    def bwd(g):
        return (g * c,)

    _register("scale", out, (a,), bwd, lambda: a_data * c)
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(int(s) for s in shape)
    a_data = a.data
    if int(np.prod(shape, dtype=np.int64)) != a_data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    out = Tensor._wrap(a_data.reshape(shape).copy())

    def bwd(g):
        return (g.reshape(a_data.shape),)

    _register("reshape", out, (a,), bwd, lambda: a_data.reshape(shape).copy())
    return out


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2 needs at least 2-D, got {a.shape}")
    a_data = a.data

    def fwd():
        return np.ascontiguousarray(np.swapaxes(a_data, -1, -2))

    out = Tensor._wrap(fwd())

    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    _register("transpose_last2", out, (a,), bwd, fwd)
    return out


def select_position(x: Tensor, pos: int) -> Tensor:
    """Pick index ``pos`` along axis 1 of a (B, T, ...) tensor."""
    if x.ndim < 2:
        raise ShapeError(f"select_position needs at least 2-D, got {x.shape}")
    if not 0 <= pos < x.shape[1]:
        raise ShapeError(f"position {pos} out of range for shape {x.shape}")
    x_data = x.data
    out = Tensor._wrap(np.ascontiguousarray(x_data[:, pos]))

    def bwd(g):
        gx = np.zeros_like(x_data)
        gx[:, pos] = g
        return (gx,)

    _register("select_position", out, (x,), bwd, lambda: np.ascontiguousarray(x_data[:, pos]))
    return out


def sum_all(x: Tensor) -> Tensor:
    x_data = x.data
    out = Tensor._wrap(np.array(x_data.sum()))

    def bwd(g):
        return (np.broadcast_to(g, x_data.shape).copy(),)

    _register("sum_all", out, (x,), bwd, lambda: np.array(x_data.sum()))
    return out


def mean_all(x: Tensor) -> Tensor:
    x_data = x.data
    n = x_data.size
    out = Tensor._wrap(np.array(x_data.mean()))

    def bwd(g):
        return (np.broadcast_to(g / n, x_data.shape).copy(),)

    _register("mean_all", out, (x,), bwd, lambda: np.array(x_data.mean()))
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the sampled mask is cached so replay is exact."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    x_data = x.data
    keep = (rng.random(x_data.shape) >= rate) / (1.0 - rate)
    out = Tensor._wrap(x_data * keep)

    def bwd(g):
        return (g * keep,)

    _register("dropout", out, (x,), bwd, lambda: x_data * keep)
    return out


def finite(t: Tensor) -> bool:
    """True when every entry is finite (no NaN/Inf)."""
    return bool(np.isfinite(t.data).all())


def fsum(values) -> float:
    """Order-insensitive compensated sum of python floats."""
    return math.fsum(values)
