"""Scaled bilinear attention: single head, multi-head sum, and gated heads.

A head parameterized by W_k, W_q, W_v (d_h x d) and W_o (d x d_h) maps a
key/value sequence and a query to

    out = W_o @ sum_i alpha_i (W_v x_i),
    alpha = softmax((W_q q) . (W_k x_i) / sqrt(s))

where the scaling dimension s is the full model dimension by default and
can be switched to the head dimension. A multi-head layer sums its heads'
outputs, each multiplied by a {0, 1} gate, which makes ablation a pure
output-side operation: gating a head to 0 is identical to zeroing its
contribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import (
    ComputationRecord,
    ShapeError,
    Tensor,
    add,
    linear,
    matmul,
    mul,
    reshape,
    scale,
    softmax,
    transpose_last2,
)

__all__ = [
    "AttentionKind",
    "HeadId",
    "HeadMask",
    "HeadParams",
    "MhaLayer",
    "HeadTaps",
    "single_head_attention",
    "multi_head_attention",
    "head_output",
    "key_mask_to_additive",
    "causal_additive_mask",
]

NEG_INF = -np.inf


class AttentionKind(Enum):
    """Which attention mechanism a layer implements."""

    ENC_ENC = "enc_enc"
    ENC_DEC = "enc_dec"
    DEC_DEC = "dec_dec"
    SELF_ONLY = "self"


_KIND_ORDER = {k: i for i, k in enumerate(AttentionKind)}


@dataclass(frozen=True)
class HeadId:
    """One attention head: (mechanism, layer index, head index), 0-based."""

    kind: AttentionKind
    layer: int
    head: int

    def sort_key(self) -> tuple:
        return (_KIND_ORDER[self.kind], self.layer, self.head)

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.layer}:{self.head}"

    @staticmethod
    def parse(text: str) -> "HeadId":
        kind, layer, head = text.strip().split(":")
        return HeadId(AttentionKind(kind), int(layer), int(head))


class HeadMask:
    """Gate values per head; unlisted heads default to 1.0.

    Gates are restricted to exactly 0.0 or 1.0: the importance estimator
    reads gradients at gate value 1 and never sets fractional gates.
    """

    def __init__(self, gates: dict[HeadId, float] | None = None):
        self._gates: dict[HeadId, float] = {}
        if gates:
            for hid, v in gates.items():
                self[hid] = v

    def __getitem__(self, hid: HeadId) -> float:
        return self._gates.get(hid, 1.0)

    def __setitem__(self, hid: HeadId, value: float) -> None:
        value = float(value)
        if value not in (0.0, 1.0):
            raise ValueError(f"head gates must be exactly 0.0 or 1.0, got {value}")
        if value == 1.0:
            self._gates.pop(hid, None)
        else:
            self._gates[hid] = 0.0

    def masked_ids(self) -> frozenset:
        return frozenset(h for h, v in self._gates.items() if v == 0.0)

    def copy(self) -> "HeadMask":
        return HeadMask(dict(self._gates))

    def __eq__(self, other) -> bool:
        return isinstance(other, HeadMask) and self.masked_ids() == other.masked_ids()

    def __repr__(self) -> str:
        masked = sorted(self.masked_ids(), key=HeadId.sort_key)
        return f"HeadMask(masked={[str(h) for h in masked]})"


class HeadParams:
    """The four projection matrices of one attention head."""

    def __init__(self, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor):
        d_h, d = w_q.shape
        for name, w, want in (
            ("w_k", w_k, (d_h, d)),
            ("w_v", w_v, (d_h, d)),
            ("w_o", w_o, (d, d_h)),
        ):
            if w.shape != want:
                raise ShapeError(f"{name} shape {w.shape} inconsistent with w_q {w_q.shape}")
        self.w_q = w_q
        self.w_k = w_k
        self.w_v = w_v
        self.w_o = w_o

    @property
    def d_model(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[0]

    def param_count(self) -> int:
        return 4 * self.d_head * self.d_model

    def named(self, prefix: str):
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.w_k", self.w_k
        yield f"{prefix}.w_v", self.w_v
        yield f"{prefix}.w_o", self.w_o


@dataclass
class MhaLayer:
    """A multi-head attention layer: N_h independently parameterized heads.

    At construction from a model config, d_head * n_heads equals d_model so
    the layer has the parameter count of one full-rank attention layer;
    structural slicing later removes heads and breaks that equality on
    purpose (an emptied layer computes an exact zero function).
    """

    kind: AttentionKind
    layer_index: int
    d_model: int
    heads: list = field(default_factory=list)

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def d_head(self) -> int:
        return self.heads[0].d_head

    def head_ids(self) -> list[HeadId]:
        return [HeadId(self.kind, self.layer_index, h) for h in range(self.n_heads)]

    def param_count(self) -> int:
        return sum(p.param_count() for p in self.heads)


class HeadTaps:
    """Per-forward handles for head outputs and gate tensors.

    Filled in during a recorded forward pass; the importance estimator
    reads gradients of both through the GradientStore.
    """

    def __init__(self, record: ComputationRecord):
        self.record = record
        self.outputs: dict[HeadId, Tensor] = {}
        self.gates: dict[HeadId, Tensor] = {}

    def register(self, hid: HeadId, output: Tensor, gate: Tensor) -> None:
        self.record.tap(output)
        self.record.tap(gate)
        self.outputs[hid] = output
        self.gates[hid] = gate


# ---------------------------------------------------------------------------
# mask construction
# ---------------------------------------------------------------------------


def key_mask_to_additive(key_mask) -> np.ndarray | None:
    """Turn a boolean keep-mask over key positions into a 0/-inf row.

    Accepts (T_k,) or (B, T_k); returns (..., 1, T_k) ready to broadcast
    over query positions. True means the position may be attended.
    """
    if key_mask is None:
        return None
    keep = np.asarray(key_mask, dtype=bool)
    out = np.where(keep, 0.0, NEG_INF)
    return out[..., None, :]


def causal_additive_mask(t: int) -> np.ndarray:
    """(t, t) additive mask forbidding attention to future positions."""
    m = np.zeros((t, t))
    m[np.triu_indices(t, k=1)] = NEG_INF
    return m


def _scale_dim(params: HeadParams, scale_mode: str) -> int:
    if scale_mode == "model_dim":
        return params.d_model
    if scale_mode == "head_dim":
        return params.d_head
    raise ValueError(f"unknown attention scale mode {scale_mode!r}")


# ---------------------------------------------------------------------------
# attention proper
# ---------------------------------------------------------------------------


def attend(
    params: HeadParams,
    x_kv: Tensor,
    x_q: Tensor,
    mask_t: Tensor | None = None,
    scale_mode: str = "model_dim",
) -> Tensor:
    """One head over batched sequences.

    x_kv: (B, T_k, d) keys/values source; x_q: (B, T_q, d) queries;
    mask_t: additive 0/-inf tensor broadcastable to (B, T_q, T_k).
    Returns (B, T_q, d).
    """
    q = linear(x_q, params.w_q)
    k = linear(x_kv, params.w_k)
    v = linear(x_kv, params.w_v)
    scores = scale(matmul(q, transpose_last2(k)), 1.0 / math.sqrt(_scale_dim(params, scale_mode)))
    if mask_t is not None:
        scores = add(scores, mask_t)
    alpha = softmax(scores, axis=-1)
    ctx = matmul(alpha, v)
    return linear(ctx, params.w_o)


def _lift_sequence(x, q, key_mask):
    x = x if isinstance(x, Tensor) else Tensor(x)
    q = q if isinstance(q, Tensor) else Tensor(q)
    if x.ndim != 2:
        raise ShapeError(f"x must be a (n, d) sequence, got {x.shape}")
    if q.shape != (x.shape[1],):
        raise ShapeError(f"q must be a ({x.shape[1]},) vector, got {q.shape}")
    if key_mask is not None:
        keep = np.asarray(key_mask, dtype=bool)
        if keep.shape != (x.shape[0],):
            raise ShapeError(f"key_mask must have shape ({x.shape[0]},), got {keep.shape}")
        if not keep.any():
            raise ValueError("all key positions are masked")
    x3 = reshape(x, (1,) + x.shape)
    q3 = reshape(q, (1, 1) + q.shape)
    additive = key_mask_to_additive(key_mask)
    return x3, q3, None if additive is None else Tensor(additive)


def single_head_attention(
    params: HeadParams,
    x,
    q,
    key_mask=None,
    scale_mode: str = "model_dim",
) -> Tensor:
    """Attention of one head over a sequence x (n, d) for one query q (d,)."""
    x3, q3, mask_t = _lift_sequence(x, q, key_mask)
    out = attend(params, x3, q3, mask_t, scale_mode)
    return reshape(out, (out.shape[-1],))


def mha_sum(
    layer: MhaLayer,
    x_kv: Tensor,
    x_q: Tensor,
    mask_t: Tensor | None,
    gate_fn,
    taps: HeadTaps | None = None,
    scale_mode: str = "model_dim",
) -> Tensor:
    """Gated sum of all head outputs, batched.

    gate_fn maps HeadId -> gate value. Heads gated to exactly 0 are skipped
    outright: adding an exact zero term is bitwise identical to omitting it,
    and skipping is what makes masked evaluation cheaper. Returns zeros when
    every head is gated off.
    """
    total: Tensor | None = None
    for h, params in enumerate(layer.heads):
        hid = HeadId(layer.kind, layer.layer_index, h)
        g = float(gate_fn(hid))
        if g == 0.0:
            continue
        out = attend(params, x_kv, x_q, mask_t, scale_mode)
        if taps is not None:
            gate_t = Tensor(g)
            taps.register(hid, out, gate_t)
            term = mul(out, gate_t)
        elif g != 1.0:
            term = scale(out, g)
        else:
            term = out
        total = term if total is None else add(total, term)
    if total is None:
        b, t_q = x_q.shape[0], x_q.shape[1]
        total = Tensor._wrap(np.zeros((b, t_q, layer.d_model)))
    return total


def multi_head_attention(
    layer: MhaLayer,
    x,
    q,
    key_mask=None,
    mask: HeadMask | None = None,
    scale_mode: str = "model_dim",
) -> Tensor:
    """Sum over heads of gate * head-output for one sequence and query."""
    x3, q3, mask_t = _lift_sequence(x, q, key_mask)
    gates = mask if mask is not None else HeadMask()
    out = mha_sum(layer, x3, q3, mask_t, lambda hid: gates[hid], None, scale_mode)
    return reshape(out, (out.shape[-1],))


def head_output(layer: MhaLayer, h: int, x, q, key_mask=None, scale_mode: str = "model_dim") -> Tensor:
    """The contribution of head ``h`` exactly as it enters the head sum."""
    if not 0 <= h < layer.n_heads:
        raise IndexError(f"head {h} out of range for layer with {layer.n_heads} heads")
    x3, q3, mask_t = _lift_sequence(x, q, key_mask)
    out = attend(layer.heads[h], x3, q3, mask_t, scale_mode)
    return reshape(out, (out.shape[-1],))
