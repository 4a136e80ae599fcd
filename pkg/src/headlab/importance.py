"""Head importance scores and their ablation-delta counterparts.

A head's importance is the expected absolute sensitivity of the loss to
its gate, estimated as the mean over samples of |Att_h(x) . dL/dAtt_h(x)|
with the absolute value applied per sample before averaging (signed
contributions would cancel across samples). Scores are normalized per
(attention kind, layer) with the l2 norm before ranking.

Delta tables record the direct evidence instead: the metric change when a
single head is masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionKind, HeadId, HeadTaps
from .models import (
    batch_loss,
    evaluate,
    make_classification_batch,
    make_translation_batch,
)
from .tensor import ComputationRecord, backward

__all__ = [
    "ImportanceTable",
    "DeltaTable",
    "estimate_importance",
    "normalize_by_layer",
    "oracle_delta_scores",
    "write_head_table",
    "read_head_table",
]


@dataclass
class ImportanceTable:
    """Raw and layer-normalized per-head scores.

    Heads already pruned when the estimate ran are listed in ``excluded``
    and carry no score; for ranking purposes they sort below every scored
    head and can never be selected again.
    """

    raw: dict = field(default_factory=dict)
    normalized: dict = field(default_factory=dict)
    n_samples: int = 0
    excluded: frozenset = frozenset()

    def ranked(self, ascending: bool = True) -> list:
        """Scored heads ordered by normalized score, ties by head identity."""
        if not self.normalized:
            raise ValueError("normalize_by_layer has not been applied")
        return sorted(
            self.normalized,
            key=lambda h: ((self.normalized[h], h.sort_key()) if ascending
                           else (-self.normalized[h], h.sort_key())),
        )


@dataclass
class DeltaTable:
    """Per-head metric change when only that head is masked."""

    metric: str
    base_score: float
    delta: dict = field(default_factory=dict)
    p_value: dict = field(default_factory=dict)
    significant: dict = field(default_factory=dict)

    def masked_scores(self) -> dict:
        return {h: self.base_score + d for h, d in self.delta.items()}


def _estimation_batches(task: str, data, batch_size: int):
    make = make_translation_batch if task == "translation" else make_classification_batch
    for lo in range(0, len(data), batch_size):
        chunk = data[lo : lo + batch_size]
        yield len(chunk), make(chunk)


def estimate_importance(model, data, batch_size: int = 64) -> ImportanceTable:
    """Mean per-sample |head output . loss gradient| for every active head.

    One forward and backward pass per batch; per-sample inner products are
    read off the tapped head outputs, so batching changes nothing about the
    per-sample absolute values. The loss is teacher-forced cross-entropy
    with a per-sequence mean for translation and label cross-entropy for
    classification. Heads currently gated to 0 are excluded.
    """
    data = list(data)
    if not data:
        raise ValueError("estimate_importance needs a non-empty sample")
    pruned = model.mask.masked_ids()
    contributions: dict[HeadId, list] = {
        hid: [] for hid in model.head_ids() if hid not in pruned
    }
    for n_in_batch, batch in _estimation_batches(model.task, data, batch_size):
        with ComputationRecord() as rec:
            taps = HeadTaps(rec)
            loss = batch_loss(model, batch, per_sequence=True, taps=taps)
        grads = backward(rec, loss)
        for hid, att in taps.outputs.items():
            g = grads.grad(att).data
            a = att.data
            # loss is a mean over the batch; scale per-sample products back up
            per_sample = np.abs((a * g).reshape(n_in_batch, -1).sum(axis=1)) * n_in_batch
            contributions[hid].extend(float(v) for v in per_sample)
    raw = {hid: math.fsum(vals) / len(data) for hid, vals in contributions.items()}
    return ImportanceTable(raw=raw, n_samples=len(data), excluded=frozenset(pruned))


def normalize_by_layer(table: ImportanceTable) -> ImportanceTable:
    """Divide each (kind, layer) group by its l2 norm; zero layers pass through."""
    if not table.raw and not table.excluded:
        raise ValueError("importance table has no raw scores")
    groups: dict[tuple, list] = {}
    for hid in table.raw:
        groups.setdefault((hid.kind, hid.layer), []).append(hid)
    normalized = {}
    for key, hids in groups.items():
        norm = math.sqrt(math.fsum(table.raw[h] ** 2 for h in hids))
        for h in hids:
            normalized[h] = table.raw[h] / norm if norm > 0.0 else 0.0
    return ImportanceTable(
        raw=dict(table.raw),
        normalized=normalized,
        n_samples=table.n_samples,
        excluded=table.excluded,
    )


def oracle_delta_scores(model, eval_examples, metric: str, batch_size: int = 64) -> DeltaTable:
    """Mask each head alone, re-evaluate, and record the score difference.

    The model's HeadMask is restored to its entry state afterwards, even on
    error. Heads that are already masked re-evaluate to the base score, so
    their delta is exactly 0.
    """
    entry_mask = model.mask.copy()
    try:
        base = evaluate(model, eval_examples, metric, batch_size=batch_size).score
        deltas = {}
        for hid in model.head_ids():
            if entry_mask[hid] == 0.0:
                deltas[hid] = 0.0
                continue
            model.mask = entry_mask.copy()
            model.mask[hid] = 0.0
            deltas[hid] = evaluate(model, eval_examples, metric, batch_size=batch_size).score - base
        return DeltaTable(metric=metric, base_score=base, delta=deltas)
    finally:
        model.mask = entry_mask


# ---------------------------------------------------------------------------
# tabular serialization: one row per head
# ---------------------------------------------------------------------------

_TABLE_HEADER = "kind\tlayer\thead\traw\tnormalized\tdelta\tp_value"
_TABLE_MARKER = "# head-table v1"


def _fmt(x) -> str:
    return "NA" if x is None else f"{x:.12g}"


def write_head_table(path, importance: ImportanceTable | None = None, deltas: DeltaTable | None = None) -> None:
    """Write importance scores and/or ablation deltas as tab-separated text.

    Columns: kind, layer, head, raw, normalized, delta, p_value; absent
    fields are written as NA. Comment lines carry the base score and sample
    count when available.
    """
    if importance is None and deltas is None:
        raise ValueError("nothing to write")
    hids = set()
    if importance is not None:
        hids |= set(importance.raw) | set(importance.excluded)
    if deltas is not None:
        hids |= set(deltas.delta)
    lines = [_TABLE_MARKER]
    if deltas is not None:
        lines.append(f"# metric {deltas.metric}")
        lines.append(f"# base_score {_fmt(deltas.base_score)}")
    if importance is not None:
        lines.append(f"# n_samples {importance.n_samples}")
    lines.append(_TABLE_HEADER)
    for hid in sorted(hids, key=HeadId.sort_key):
        raw = norm = delta = pval = None
        if importance is not None:
            raw = importance.raw.get(hid)
            norm = importance.normalized.get(hid)
        if deltas is not None:
            delta = deltas.delta.get(hid)
            pval = deltas.p_value.get(hid)
        lines.append(
            f"{hid.kind.value}\t{hid.layer}\t{hid.head}\t{_fmt(raw)}\t{_fmt(norm)}\t{_fmt(delta)}\t{_fmt(pval)}"
        )
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_head_table(path) -> dict:
    """Parse a head table back into {'rows': {HeadId: fields}, 'meta': {...}}."""
    rows: dict[HeadId, dict] = {}
    meta: dict[str, float] = {}
    with open(path, encoding="utf-8") as f:
        first = f.readline().strip()
        if first != _TABLE_MARKER:
            raise ValueError(f"{path}: not a head table (header {first!r})")
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2:
                    key, value = parts
                    meta[key] = value if key == "metric" else float(value)
                continue
            if line == _TABLE_HEADER:
                continue
            kind, layer, head, raw, norm, delta, pval = line.split("\t")
            hid = HeadId(AttentionKind(kind), int(layer), int(head))
            parse = lambda s: None if s == "NA" else float(s)
            rows[hid] = {
                "raw": parse(raw),
                "normalized": parse(norm),
                "delta": parse(delta),
                "p_value": parse(pval),
            }
    return {"rows": rows, "meta": meta}
