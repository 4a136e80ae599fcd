"""Pruning experiments: ablation sweeps, greedy iterative pruning,
per-type pruning, cross-dataset correlation, training-dynamics surfaces,
and structural head removal.

Masking and structural slicing are kept strictly equivalent: gating a head
to zero and physically deleting its projection matrices produce the same
outputs, but only slicing reduces inference cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionKind, HeadId, HeadMask, MhaLayer
from .importance import DeltaTable, ImportanceTable, estimate_importance, normalize_by_layer, oracle_delta_scores
from .models import TransformerModel, evaluate
from .stats import paired_bootstrap, paired_t_test, pearson

__all__ = [
    "TraceStep",
    "PruningTrace",
    "DynamicsSurface",
    "CorrelationResult",
    "ablate_one_sweep",
    "ablate_all_but_one",
    "iterative_prune",
    "prune_by_type",
    "cross_dataset_correlation",
    "structural_slice",
    "training_dynamics",
    "write_trace",
    "read_trace",
    "write_surface",
]

ORDERINGS = ("importance", "reverse_importance", "oracle_delta", "random")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class TraceStep:
    index: int
    fraction: float
    pruned_now: tuple
    cumulative: int
    metric: float
    importance: ImportanceTable | None = None


@dataclass
class PruningTrace:
    """Ordered pruning steps; step 0 is the unpruned baseline."""

    metric_name: str
    ordering: str
    increment: float
    total_heads: int
    scope_kind: str | None = None
    steps: list = field(default_factory=list)

    def fractions(self) -> list:
        return [s.fraction for s in self.steps]

    def metrics(self) -> list:
        return [s.metric for s in self.steps]

    def metric_at_fraction(self, fraction: float) -> float:
        """Metric at the first recorded step with fraction >= the target."""
        for s in self.steps:
            if s.fraction >= fraction - 1e-9:
                return s.metric
        return self.steps[-1].metric


@dataclass
class DynamicsSurface:
    """Relative pruned-vs-unpruned score per (epoch, fraction) cell."""

    metric_name: str
    scores: dict = field(default_factory=dict)
    relative: dict = field(default_factory=dict)
    unpruned: dict = field(default_factory=dict)
    skipped_epochs: list = field(default_factory=list)

    def epochs(self) -> list:
        return sorted({e for e, _ in self.relative})

    def relative_at(self, epoch: int, fraction: float) -> float:
        fracs = sorted(f for e, f in self.relative if e == epoch)
        for f in fracs:
            if f >= fraction - 1e-9:
                return self.relative[(epoch, f)]
        return self.relative[(epoch, fracs[-1])]


@dataclass
class CorrelationResult:
    r: float
    p_value: float
    points: list


# ---------------------------------------------------------------------------
# ablation sweeps
# ---------------------------------------------------------------------------


def ablate_one_sweep(
    model: TransformerModel,
    eval_examples,
    metric: str,
    stat_test: str = "bootstrap",
    n_resamples: int = 1000,
    seed: int = 0,
    batch_size: int = 64,
) -> DeltaTable:
    """Mask one head at a time and test each change for significance.

    Significance compares per-example scores of the masked model against
    the full model: two-sided paired bootstrap (min doubled) by default, or
    a paired t-test. The model's mask is restored afterwards.
    """
    if stat_test not in ("bootstrap", "t_test"):
        raise ValueError(f"unknown stat_test {stat_test!r}")
    entry_mask = model.mask.copy()
    try:
        base = evaluate(model, eval_examples, metric, batch_size=batch_size)
        table = DeltaTable(metric=metric, base_score=base.score)
        for hid in model.head_ids():
            if entry_mask[hid] == 0.0:
                table.delta[hid] = 0.0
                table.p_value[hid] = 1.0
                table.significant[hid] = False
                continue
            model.mask = entry_mask.copy()
            model.mask[hid] = 0.0
            res = evaluate(model, eval_examples, metric, batch_size=batch_size)
            table.delta[hid] = res.score - base.score
            if stat_test == "bootstrap":
                sig = paired_bootstrap(
                    base.per_example,
                    res.per_example,
                    n_resamples=n_resamples,
                    seed=seed,
                    aggregate=base.aggregate,
                    two_sided=True,
                )
            else:
                sig = paired_t_test(base.per_example, res.per_example)
            table.p_value[hid] = sig.p_value
            table.significant[hid] = sig.significant_at_01
        return table
    finally:
        model.mask = entry_mask


def ablate_all_but_one(
    model: TransformerModel,
    kind: AttentionKind,
    layer: int,
    eval_examples,
    metric: str,
    batch_size: int = 64,
) -> tuple:
    """Keep each head of one layer alone (other layers untouched).

    Returns (best_head, best_delta, per_head_deltas) where best is the head
    whose solo layer scores highest; deltas are against the unmasked model.
    """
    mha = model.layer_by_id(kind, layer)
    entry_mask = model.mask.copy()
    try:
        base = evaluate(model, eval_examples, metric, batch_size=batch_size).score
        deltas = {}
        for keep in mha.head_ids():
            model.mask = entry_mask.copy()
            for other in mha.head_ids():
                if other != keep:
                    model.mask[other] = 0.0
            deltas[keep] = evaluate(model, eval_examples, metric, batch_size=batch_size).score - base
        best = max(deltas, key=lambda h: (deltas[h], tuple(-k for k in h.sort_key())))
        return best, deltas[best], deltas
    finally:
        model.mask = entry_mask


# ---------------------------------------------------------------------------
# greedy iterative pruning
# ---------------------------------------------------------------------------


def _importance_order(model, ordering, estimation_data, scope, batch_size):
    table = normalize_by_layer(estimate_importance(model, estimation_data, batch_size=batch_size))
    in_scope = set(scope)
    ranked = [h for h in table.ranked(ascending=(ordering == "importance")) if h in in_scope]
    return ranked, table


def _fixed_order(model, ordering, estimation_data, eval_examples, metric, seed, scope, batch_size, abs_delta):
    """Full pruning order computed once up front (non-greedy orderings)."""
    if ordering == "random":
        order = list(scope)
        np.random.default_rng([seed, 424242]).shuffle(order)
        return order
    if ordering == "oracle_delta":
        table = oracle_delta_scores(model, eval_examples, metric, batch_size=batch_size)
        key = (lambda h: (abs(table.delta[h]), h.sort_key())) if abs_delta else (
            lambda h: (table.delta[h], h.sort_key())
        )
        return sorted(scope, key=key)
    order, _ = _importance_order(model, ordering, estimation_data, scope, batch_size)
    return order


def iterative_prune(
    model: TransformerModel,
    estimation_data,
    eval_examples,
    metric: str,
    increment: float = 0.1,
    ordering: str = "importance",
    reestimate: bool = True,
    seed: int = 0,
    restrict_kind: AttentionKind | None = None,
    batch_size: int = 64,
    abs_delta: bool = True,
) -> PruningTrace:
    """Prune heads in fixed-fraction increments of the lowest-ranked first.

    Orderings: ascending normalized importance (``importance``), its
    reverse, ascending |delta| from an ablate-one sweep (``oracle_delta``,
    signed deltas with ``abs_delta=False``), or a seeded shuffle. With
    ``reestimate`` the importance table is recomputed on the pruned model
    before every step (greedy); the flag does not affect the other
    orderings, which are fixed up front. Gates are set on the model during
    the run and restored afterwards.

    Cumulative pruned counts follow round(k * increment * total) per step
    k, rounding halves up; steps whose target does not advance are merged
    into the next one so recorded fractions are strictly increasing.
    """
    if ordering not in ORDERINGS:
        raise ValueError(f"unknown ordering {ordering!r}; expected one of {ORDERINGS}")
    if not 0.0 < increment <= 1.0:
        raise ValueError(f"increment must be in (0, 1], got {increment}")
    scope = [
        h for h in model.head_ids()
        if (restrict_kind is None or h.kind == restrict_kind) and model.mask[h] == 1.0
    ]
    if restrict_kind is not None and not any(
        layer.kind == restrict_kind for layer in model.mha_layers()
    ):
        raise ValueError(f"model has no {restrict_kind.value} attention")
    if not scope:
        raise ValueError("no unpruned heads in scope")
    total = len(scope)

    entry_mask = model.mask.copy()
    trace = PruningTrace(
        metric_name=metric,
        ordering=ordering,
        increment=increment,
        total_heads=total,
        scope_kind=None if restrict_kind is None else restrict_kind.value,
    )
    greedy = ordering in ("importance", "reverse_importance") and reestimate
    try:
        fixed = None
        if not greedy:
            fixed = _fixed_order(
                model, ordering, estimation_data, eval_examples, metric, seed, scope, batch_size, abs_delta
            )
        baseline = evaluate(model, eval_examples, metric, batch_size=batch_size).score
        trace.steps.append(TraceStep(0, 0.0, (), 0, baseline))
        pruned = 0
        k = 0
        while pruned < total:
            k += 1
            target = min(total, _round_half_up(k * increment * total))
            if target <= pruned:
                continue
            if greedy:
                ranked, table = _importance_order(model, ordering, estimation_data, scope, batch_size)
            else:
                ranked, table = [h for h in fixed if model.mask[h] == 1.0], None
            chosen = tuple(ranked[: target - pruned])
            for hid in chosen:
                model.mask[hid] = 0.0
            pruned = target
            score = evaluate(model, eval_examples, metric, batch_size=batch_size).score
            trace.steps.append(
                TraceStep(len(trace.steps), pruned / total, chosen, pruned, score, table)
            )
        return trace
    finally:
        model.mask = entry_mask


def prune_by_type(
    model: TransformerModel,
    kind: AttentionKind,
    estimation_data,
    eval_examples,
    metric: str,
    increment: float = 0.1,
    ordering: str = "importance",
    reestimate: bool = True,
    seed: int = 0,
    batch_size: int = 64,
) -> PruningTrace:
    """Iterative pruning restricted to one attention kind; fractions are
    computed over that kind's head count."""
    if kind not in model.attention_kinds():
        raise ValueError(f"model has no {kind.value} attention layers")
    return iterative_prune(
        model,
        estimation_data,
        eval_examples,
        metric,
        increment=increment,
        ordering=ordering,
        reestimate=reestimate,
        seed=seed,
        restrict_kind=kind,
        batch_size=batch_size,
    )


# ---------------------------------------------------------------------------
# cross-dataset agreement
# ---------------------------------------------------------------------------


def cross_dataset_correlation(deltas_a: DeltaTable, deltas_b: DeltaTable) -> CorrelationResult:
    """Pearson correlation between two delta tables over the same heads."""
    if set(deltas_a.delta) != set(deltas_b.delta):
        raise ValueError("delta tables cover different head sets")
    hids = sorted(deltas_a.delta, key=HeadId.sort_key)
    if len(hids) < 3:
        raise ValueError("need at least 3 heads to correlate")
    xs = [deltas_a.delta[h] for h in hids]
    ys = [deltas_b.delta[h] for h in hids]
    r, p = pearson(xs, ys)
    return CorrelationResult(r=r, p_value=p, points=list(zip(hids, xs, ys)))


# ---------------------------------------------------------------------------
# structural removal
# ---------------------------------------------------------------------------


def structural_slice(model: TransformerModel, pruned: set) -> TransformerModel:
    """Physically drop pruned heads' parameter matrices from a copy.

    Every pruned head must currently be masked so that slicing cannot
    change outputs. Surviving heads are renumbered contiguously within
    each layer and their gates carried over; a layer losing all heads
    stays in place as an exact zero function.
    """
    pruned = set(pruned)
    unknown = pruned - set(model.head_ids())
    if unknown:
        raise ValueError(f"unknown heads: {sorted(str(h) for h in unknown)}")
    not_masked = [h for h in pruned if model.mask[h] != 0.0]
    if not_masked:
        raise ValueError(
            "heads must be masked before slicing: "
            + ", ".join(sorted(str(h) for h in not_masked))
        )
    sliced = model.clone()
    new_mask = HeadMask()
    for layer, twin in zip(model.mha_layers(), sliced.mha_layers()):
        keep = [h for h in range(layer.n_heads) if HeadId(layer.kind, layer.layer_index, h) not in pruned]
        twin.heads = [twin.heads[h] for h in keep]
        for new_index, old_index in enumerate(keep):
            old_id = HeadId(layer.kind, layer.layer_index, old_index)
            if model.mask[old_id] == 0.0:
                new_mask[HeadId(layer.kind, layer.layer_index, new_index)] = 0.0
    sliced.mask = new_mask
    return sliced


# ---------------------------------------------------------------------------
# training dynamics
# ---------------------------------------------------------------------------


def training_dynamics(
    checkpoints,
    estimation_data,
    eval_examples,
    metric: str,
    increment: float = 0.1,
    ordering: str = "importance",
    reestimate: bool = True,
    seed: int = 0,
    batch_size: int = 64,
) -> DynamicsSurface:
    """Run the incremental pruning experiment at every checkpoint.

    Cell values are score_pruned / score_unpruned at that epoch; epochs
    whose unpruned score is 0 are flagged and skipped since the ratio is
    undefined there.
    """
    checkpoints = list(checkpoints)
    if len(checkpoints) < 2:
        raise ValueError("training_dynamics needs at least 2 checkpoints")
    surface = DynamicsSurface(metric_name=metric)
    for ckpt in checkpoints:
        model = ckpt.to_model()
        trace = iterative_prune(
            model,
            estimation_data,
            eval_examples,
            metric,
            increment=increment,
            ordering=ordering,
            reestimate=reestimate,
            seed=seed,
            batch_size=batch_size,
        )
        unpruned = trace.steps[0].metric
        surface.unpruned[ckpt.epoch] = unpruned
        if unpruned == 0.0:
            surface.skipped_epochs.append(ckpt.epoch)
            continue
        for step in trace.steps:
            surface.scores[(ckpt.epoch, step.fraction)] = step.metric
            surface.relative[(ckpt.epoch, step.fraction)] = step.metric / unpruned
    return surface


# ---------------------------------------------------------------------------
# line-oriented serialization
# ---------------------------------------------------------------------------

_TRACE_MARKER = "# pruning-trace v1"
_SURFACE_MARKER = "# dynamics-surface v1"


def write_trace(path, trace: PruningTrace) -> None:
    """One record per step: index, fraction, cumulative count, metric, heads."""
    lines = [
        _TRACE_MARKER,
        f"# metric {trace.metric_name}",
        f"# ordering {trace.ordering}",
        f"# increment {trace.increment:.12g}",
        f"# total_heads {trace.total_heads}",
        f"# scope {trace.scope_kind or 'all'}",
        "step\tfraction\tn_pruned\tmetric\tpruned_heads",
    ]
    for s in trace.steps:
        heads = ";".join(str(h) for h in s.pruned_now) if s.pruned_now else "-"
        lines.append(f"{s.index}\t{s.fraction:.12g}\t{s.cumulative}\t{s.metric:.12g}\t{heads}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_trace(path) -> PruningTrace:
    with open(path, encoding="utf-8") as f:
        first = f.readline().strip()
        if first != _TRACE_MARKER:
            raise ValueError(f"{path}: not a pruning trace (header {first!r})")
        meta = {}
        steps = []
        for line in f:
            line = line.rstrip("\n")
            if not line or line.startswith("step\t"):
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(" ")
                meta[key] = value
                continue
            idx, fraction, n_pruned, metric, heads = line.split("\t")
            pruned_now = () if heads == "-" else tuple(HeadId.parse(h) for h in heads.split(";"))
            steps.append(
                TraceStep(int(idx), float(fraction), pruned_now, int(n_pruned), float(metric))
            )
    trace = PruningTrace(
        metric_name=meta.get("metric", ""),
        ordering=meta.get("ordering", ""),
        increment=float(meta.get("increment", "0.1")),
        total_heads=int(meta.get("total_heads", "0")),
        scope_kind=None if meta.get("scope", "all") == "all" else meta["scope"],
        steps=steps,
    )
    return trace


def write_surface(path, surface: DynamicsSurface) -> None:
    """One record per (epoch, fraction) cell with raw and relative scores."""
    lines = [_SURFACE_MARKER, f"# metric {surface.metric_name}"]
    for epoch in surface.skipped_epochs:
        lines.append(f"# skipped_epoch {epoch} unpruned score is 0")
    lines.append("epoch\tfraction\tscore\trelative")
    for (epoch, fraction) in sorted(surface.relative):
        score = surface.scores[(epoch, fraction)]
        rel = surface.relative[(epoch, fraction)]
        lines.append(f"{epoch}\t{fraction:.12g}\t{score:.12g}\t{rel:.12g}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
