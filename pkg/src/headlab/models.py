"""Toy transformer classifier and encoder-decoder translator.

Both models are pre-LN transformers built from the gated multi-head
attention layer, small enough to train on synthetic tasks in seconds on a
CPU. Training checkpoints every epoch so head importance can be studied
across training time.

Token conventions: id 0 pads, id 1 is BOS (doubling as CLS for the
classifier), id 2 is EOS (doubling as SEP), content ids start at 3.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import (
    AttentionKind,
    HeadId,
    HeadMask,
    HeadParams,
    HeadTaps,
    MhaLayer,
    causal_additive_mask,
    key_mask_to_additive,
    mha_sum,
)
from .stats import (
    EvalResult,
    classification_accuracy,
    corpus_bleu,
    sequence_accuracy,
)
from .tensor import (
    ComputationRecord,
    Tensor,
    add,
    backward,
    cross_entropy,
    dropout,
    embedding_lookup,
    layer_norm,
    linear,
    relu,
    select_position,
)

__all__ = [
    "PAD_ID",
    "BOS_ID",
    "EOS_ID",
    "FIRST_CONTENT_ID",
    "ModelConfig",
    "TransformerModel",
    "OptimizerSpec",
    "TrainingDiverged",
    "TaskError",
    "Corpus",
    "TranslationExample",
    "ClassificationExample",
    "Checkpoint",
    "build_model",
    "synth_corpus",
    "train",
    "generate",
    "classify",
    "evaluate",
    "batch_loss",
    "save_checkpoint",
    "load_checkpoint",
]

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
FIRST_CONTENT_ID = 3

EVAL_METRICS_TRANSLATION = ("bleu", "sequence_accuracy", "token_accuracy")
EVAL_METRICS_CLASSIFICATION = ("classification_accuracy",)

CHECKPOINT_MAGIC = b"HLABCKP1"


class TaskError(ValueError):
    """Operation does not apply to this model's task."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass
class ModelConfig:
    task: str = "translation"
    n_layers: int = 4
    n_heads: int = 8
    d_model: int = 128
    d_ff: int = 512
    src_vocab: int = 32
    tgt_vocab: int = 32
    n_classes: int = 2
    max_len: int = 32
    dropout: float = 0.0
    attention_scale: str = "model_dim"
    block_norm: str = "post"

    def __post_init__(self):
        if self.task not in ("translation", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.attention_scale not in ("model_dim", "head_dim"):
            raise ValueError(f"unknown attention_scale {self.attention_scale!r}")
        if self.block_norm not in ("pre", "post"):
            raise ValueError(f"unknown block_norm {self.block_norm!r}")
        if min(self.src_vocab, self.tgt_vocab) <= FIRST_CONTENT_ID:
            raise ValueError("vocabulary must leave room for pad/bos/eos plus content")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class TranslationExample:
    src: tuple
    tgt: tuple


@dataclass(frozen=True)
class ClassificationExample:
    tokens: tuple
    label: int


@dataclass
class Corpus:
    """Synthetic dataset with disjoint train / in-domain / out-of-domain splits."""

    task: str
    vocab_size: int
    tgt_vocab_size: int
    splits: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return self.splits[name]


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


class _LN:
    def __init__(self, gain: Tensor, bias: Tensor):
        self.gain = gain
        self.bias = bias

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)

    def named(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


class _FeedForward:
    def __init__(self, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    def __call__(self, x: Tensor) -> Tensor:
        return linear(relu(linear(x, self.w1, self.b1)), self.w2, self.b2)

    def named(self, prefix: str):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


class _EncoderBlock:
    def __init__(self, attn, ln1, ln2, ffn):
        self.attn, self.ln1, self.ln2, self.ffn = attn, ln1, ln2, ffn

    def named(self, prefix: str):
        for h, head in enumerate(self.attn.heads):
            yield from head.named(f"{prefix}.attn.h{h}")
        yield from self.ln1.named(f"{prefix}.ln1")
        yield from self.ln2.named(f"{prefix}.ln2")
        yield from self.ffn.named(f"{prefix}.ffn")


class _DecoderBlock:
    def __init__(self, attn_self, attn_cross, ln1, ln2, ln3, ffn):
        self.attn_self = attn_self
        self.attn_cross = attn_cross
        self.ln1, self.ln2, self.ln3 = ln1, ln2, ln3
        self.ffn = ffn

    def named(self, prefix: str):
        for h, head in enumerate(self.attn_self.heads):
            yield from head.named(f"{prefix}.attn_self.h{h}")
        for h, head in enumerate(self.attn_cross.heads):
            yield from head.named(f"{prefix}.attn_cross.h{h}")
        yield from self.ln1.named(f"{prefix}.ln1")
        yield from self.ln2.named(f"{prefix}.ln2")
        yield from self.ln3.named(f"{prefix}.ln3")
        yield from self.ffn.named(f"{prefix}.ffn")


def _sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / (10000.0 ** (2 * (i // 2) / d))
    pe = np.zeros((max_len, d))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class TransformerModel:
    """Either an encoder-decoder translator or an encoder-only classifier.

    A translator owns Enc-Enc, Enc-Dec, and Dec-Dec attention per layer; a
    classifier owns one self-attention layer per block. The current
    HeadMask gates head outputs in every forward pass.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.mask = HeadMask()
        self.pos = _sinusoidal_positions(config.max_len, config.d_model)
        self.src_embed: Tensor | None = None
        self.tgt_embed: Tensor | None = None
        self.enc_blocks: list[_EncoderBlock] = []
        self.dec_blocks: list[_DecoderBlock] = []
        self.enc_final_ln: _LN | None = None
        self.dec_final_ln: _LN | None = None
        self.out_w: Tensor | None = None
        self.out_b: Tensor | None = None
        self.cls_w: Tensor | None = None
        self.cls_b: Tensor | None = None

    # -- structure ----------------------------------------------------------

    @property
    def task(self) -> str:
        return self.config.task

    def mha_layers(self) -> list[MhaLayer]:
        layers = []
        for block in self.enc_blocks:
            layers.append(block.attn)
        for block in self.dec_blocks:
            layers.append(block.attn_self)
            layers.append(block.attn_cross)
        return layers

    def layer_by_id(self, kind: AttentionKind, layer_index: int) -> MhaLayer:
        for layer in self.mha_layers():
            if layer.kind == kind and layer.layer_index == layer_index:
                return layer
        raise KeyError(f"no {kind.value} layer {layer_index} in this model")

    def head_ids(self) -> list[HeadId]:
        ids = []
        for layer in self.mha_layers():
            ids.extend(layer.head_ids())
        return sorted(ids, key=HeadId.sort_key)

    def attention_kinds(self) -> set:
        return {layer.kind for layer in self.mha_layers()}

    def parameters(self):
        if self.task == "translation":
            yield "src_embed", self.src_embed
            yield "tgt_embed", self.tgt_embed
        else:
            yield "src_embed", self.src_embed
        for i, block in enumerate(self.enc_blocks):
            yield from block.named(f"enc.{i}")
        if self.enc_final_ln is not None:
            yield from self.enc_final_ln.named("enc.final_ln")
        for i, block in enumerate(self.dec_blocks):
            yield from block.named(f"dec.{i}")
        if self.dec_final_ln is not None:
            yield from self.dec_final_ln.named("dec.final_ln")
        if self.out_w is not None:
            yield "out.w", self.out_w
            yield "out.b", self.out_b
        if self.cls_w is not None:
            yield "cls.w", self.cls_w
            yield "cls.b", self.cls_b

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def attention_parameter_count(self) -> int:
        return sum(layer.param_count() for layer in self.mha_layers())

    def attention_param_share(self) -> float:
        return self.attention_parameter_count() / self.parameter_count()

    def snapshot(self) -> dict:
        return {name: t.data.copy() for name, t in self.parameters()}

    def load_snapshot(self, snap: dict) -> None:
        for name, t in self.parameters():
            src = snap[name]
            if src.shape != t.data.shape:
                raise ValueError(f"snapshot shape mismatch for {name}: {src.shape} vs {t.shape}")
            t.data[...] = src

    def clone(self) -> "TransformerModel":
        twin = _build_structure(self.config, head_counts=self._head_counts())
        twin.load_snapshot(self.snapshot())
        twin.mask = self.mask.copy()
        return twin

    def _head_counts(self) -> dict:
        return {
            (layer.kind.value, layer.layer_index): layer.n_heads for layer in self.mha_layers()
        }

    # -- forward ------------------------------------------------------------

    def _gate_fn(self, overrides=None):
        mask = self.mask
        if not overrides:
            return lambda hid: mask[hid]
        return lambda hid: overrides.get(hid, mask[hid])

    def _drop(self, x, rng):
        if rng is None or self.config.dropout == 0.0:
            return x
        return dropout(x, self.config.dropout, rng)

    def _embed(self, table: Tensor, ids: np.ndarray) -> Tensor:
        t = ids.shape[1]
        if t > self.config.max_len:
            raise ValueError(f"sequence length {t} exceeds model max_len {self.config.max_len}")
        return add(embedding_lookup(table, ids), Tensor(self.pos[:t]))

    def _sublayer(self, x, compute, ln, drop_rng):
        # pre-norm: x + f(LN(x)); post-norm: LN(x + f(x))
        if self.config.block_norm == "pre":
            return add(x, self._drop(compute(ln(x)), drop_rng))
        return ln(add(x, self._drop(compute(x), drop_rng)))

    def _encoder_stack(self, x, mask_t, gate, taps, drop_rng):
        scale_mode = self.config.attention_scale
        for block in self.enc_blocks:
            x = self._sublayer(
                x, lambda h, b=block: mha_sum(b.attn, h, h, mask_t, gate, taps, scale_mode),
                block.ln1, drop_rng,
            )
            x = self._sublayer(x, block.ffn, block.ln2, drop_rng)
        if self.config.block_norm == "pre":
            x = self.enc_final_ln(x)
        return x

    def encode(self, src_ids, src_keep, taps=None, overrides=None, drop_rng=None) -> Tensor:
        if self.task != "translation":
            raise TaskError("encode() is only defined for translator models")
        gate = self._gate_fn(overrides)
        mask_t = Tensor(key_mask_to_additive(src_keep))
        x = self._embed(self.src_embed, src_ids)
        return self._encoder_stack(x, mask_t, gate, taps, drop_rng)

    def decode(self, memory, src_keep, dec_ids, taps=None, overrides=None, drop_rng=None) -> Tensor:
        if self.task != "translation":
            raise TaskError("decode() is only defined for translator models")
        gate = self._gate_fn(overrides)
        scale_mode = self.config.attention_scale
        t = dec_ids.shape[1]
        causal_t = Tensor(causal_additive_mask(t))
        cross_t = Tensor(key_mask_to_additive(src_keep))
        y = self._embed(self.tgt_embed, dec_ids)
        for block in self.dec_blocks:
            y = self._sublayer(
                y, lambda h, b=block: mha_sum(b.attn_self, h, h, causal_t, gate, taps, scale_mode),
                block.ln1, drop_rng,
            )
            y = self._sublayer(
                y, lambda h, b=block: mha_sum(b.attn_cross, memory, h, cross_t, gate, taps, scale_mode),
                block.ln2, drop_rng,
            )
            y = self._sublayer(y, block.ffn, block.ln3, drop_rng)
        if self.config.block_norm == "pre":
            y = self.dec_final_ln(y)
        return linear(y, self.out_w, self.out_b)

    def classifier_logits(self, ids, keep, taps=None, overrides=None, drop_rng=None) -> Tensor:
        if self.task != "classification":
            raise TaskError("classifier_logits() is only defined for classifier models")
        gate = self._gate_fn(overrides)
        mask_t = Tensor(key_mask_to_additive(keep))
        x = self._embed(self.src_embed, ids)
        x = self._encoder_stack(x, mask_t, gate, taps, drop_rng)
        return linear(select_position(x, 0), self.cls_w, self.cls_b)


def _glorot(rng, shape) -> np.ndarray:
    fan_in, fan_out = shape[-1], shape[0]
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape)


def _make_head(rng, d, d_h) -> HeadParams:
    return HeadParams(
        w_q=Tensor(_glorot(rng, (d_h, d))),
        w_k=Tensor(_glorot(rng, (d_h, d))),
        w_v=Tensor(_glorot(rng, (d_h, d))),
        w_o=Tensor(_glorot(rng, (d, d_h))),
    )


def _make_mha(rng, kind, layer_index, d, n_heads) -> MhaLayer:
    d_h = d // n_heads
    return MhaLayer(
        kind=kind,
        layer_index=layer_index,
        d_model=d,
        heads=[_make_head(rng, d, d_h) for _ in range(n_heads)],
    )


def _make_ln(d) -> _LN:
    return _LN(Tensor(np.ones(d)), Tensor(np.zeros(d)))


def _make_ffn(rng, d, d_ff) -> _FeedForward:
    return _FeedForward(
        w1=Tensor(_glorot(rng, (d_ff, d))),
        b1=Tensor(np.zeros(d_ff)),
        w2=Tensor(_glorot(rng, (d, d_ff))),
        b2=Tensor(np.zeros(d)),
    )


def _build_structure(config: ModelConfig, seed: int = 0, head_counts: dict | None = None) -> TransformerModel:
    rng = np.random.default_rng(seed)
    model = TransformerModel(config)
    d, d_ff = config.d_model, config.d_ff

    def heads_for(kind: AttentionKind, layer: int) -> int:
        if head_counts is None:
            return config.n_heads
        return head_counts[(kind.value, layer)]

    def make_layer(kind, i):
        layer = _make_mha(rng, kind, i, d, config.n_heads)
        want = heads_for(kind, i)
        layer.heads = layer.heads[:want]
        return layer

    model.src_embed = Tensor(rng.normal(0.0, 1.0, size=(config.src_vocab, d)))
    if config.task == "translation":
        model.tgt_embed = Tensor(rng.normal(0.0, 1.0, size=(config.tgt_vocab, d)))
        for i in range(config.n_layers):
            model.enc_blocks.append(
                _EncoderBlock(make_layer(AttentionKind.ENC_ENC, i), _make_ln(d), _make_ln(d), _make_ffn(rng, d, d_ff))
            )
        for i in range(config.n_layers):
            model.dec_blocks.append(
                _DecoderBlock(
                    make_layer(AttentionKind.DEC_DEC, i),
                    make_layer(AttentionKind.ENC_DEC, i),
                    _make_ln(d),
                    _make_ln(d),
                    _make_ln(d),
                    _make_ffn(rng, d, d_ff),
                )
            )
        model.enc_final_ln = _make_ln(d)
        model.dec_final_ln = _make_ln(d)
        model.out_w = Tensor(_glorot(rng, (config.tgt_vocab, d)))
        model.out_b = Tensor(np.zeros(config.tgt_vocab))
    else:
        for i in range(config.n_layers):
            model.enc_blocks.append(
                _EncoderBlock(make_layer(AttentionKind.SELF_ONLY, i), _make_ln(d), _make_ln(d), _make_ffn(rng, d, d_ff))
            )
        model.enc_final_ln = _make_ln(d)
        model.cls_w = Tensor(_glorot(rng, (config.n_classes, d)))
        model.cls_b = Tensor(np.zeros(config.n_classes))
    return model


def build_model(config: ModelConfig, seed: int = 0) -> TransformerModel:
    """Deterministically initialized model with all head gates at 1."""
    if config.d_model % config.n_heads != 0:
        raise ValueError(f"d_model {config.d_model} not divisible by n_heads {config.n_heads}")
    return _build_structure(config, seed=seed)


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------


def _token_distribution(n_content: int, shifted: bool) -> np.ndarray:
    ranks = np.arange(1, n_content + 1, dtype=np.float64)
    p = 1.0 / ranks
    if shifted:
        p = p[::-1].copy()
    return p / p.sum()


def _sample_tokens(rng, length, content_ids, probs):
    return tuple(int(t) for t in rng.choice(content_ids, size=length, p=probs))


def synth_corpus(
    task_spec: str,
    sizes: dict,
    seed: int = 0,
    vocab_size: int = 16,
    min_len: int = 4,
    max_len: int = 8,
) -> Corpus:
    """Reproducible toy dataset with an out-of-domain evaluation split.

    Tasks: ``copy`` (token-remapped copy through a fixed seeded
    permutation), ``reversal``, ``sort`` (sorted-output translation), and
    ``pair_classification`` (does B consist only of tokens drawn from A).
    The out-of-domain split samples tokens from a reversed-rank frequency
    distribution, shifting unigram statistics away from the training data.
    """
    known = ("copy", "reversal", "sort", "pair_classification")
    if task_spec not in known:
        raise ValueError(f"unknown task {task_spec!r}; expected one of {known}")
    n_content = vocab_size - FIRST_CONTENT_ID
    if n_content < 4:
        raise ValueError(f"vocabulary of {vocab_size} too small for task {task_spec!r}")
    if task_spec == "pair_classification" and n_content <= max_len:
        raise ValueError(
            f"vocabulary of {vocab_size} too small for pair_classification with max_len {max_len}"
        )
    content_ids = np.arange(FIRST_CONTENT_ID, vocab_size)
    rng = np.random.default_rng([seed, 7011])
    remap = {int(a): int(b) for a, b in zip(content_ids, rng.permutation(content_ids))}

    in_probs = _token_distribution(n_content, shifted=False)
    out_probs = _token_distribution(n_content, shifted=True)

    def translate_target(src):
        if task_spec == "copy":
            return tuple(remap[t] for t in src)
        if task_spec == "reversal":
            return tuple(reversed(src))
        return tuple(sorted(src))

    seen = set()
    splits: dict[str, list] = {}
    for split_name, dist in (
        ("train", in_probs),
        ("eval_in_domain", in_probs),
        ("eval_out_domain", out_probs),
    ):
        want = sizes.get(split_name, 0)
        split_rng = np.random.default_rng([seed, {"train": 1, "eval_in_domain": 2, "eval_out_domain": 3}[split_name]])
        examples = []
        attempts = 0
        while len(examples) < want:
            attempts += 1
            if attempts > 200 * want + 1000:
                raise ValueError(
                    f"could not generate {want} distinct examples for split {split_name!r}"
                )
            length = int(split_rng.integers(min_len, max_len + 1))
            if task_spec == "pair_classification":
                a = _sample_tokens(split_rng, length, content_ids, dist)
                b_len = int(split_rng.integers(2, max(3, length + 1)))
                picks = split_rng.choice(length, size=min(b_len, length), replace=False)
                b = [a[i] for i in picks]
                split_rng.shuffle(b)
                label = 1
                if split_rng.random() < 0.5:
                    outside = [t for t in content_ids if t not in set(a)]
                    n_swap = int(split_rng.integers(1, len(b) + 1))
                    for i in split_rng.choice(len(b), size=n_swap, replace=False):
                        b[i] = int(split_rng.choice(outside))
                    label = 0
                tokens = a + (EOS_ID,) + tuple(b)
                key = tokens
                ex = ClassificationExample(tokens=tokens, label=label)
            else:
                src = _sample_tokens(split_rng, length, content_ids, dist)
                key = src
                ex = TranslationExample(src=src, tgt=translate_target(src))
            if key in seen:
                continue
            seen.add(key)
            examples.append(ex)
        splits[split_name] = examples

    task = "classification" if task_spec == "pair_classification" else "translation"
    return Corpus(
        task=task,
        vocab_size=vocab_size,
        tgt_vocab_size=vocab_size,
        splits=splits,
        meta={"task_spec": task_spec, "min_len": min_len, "max_len": max_len, "seed": seed},
    )


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def _pad(seqs: list) -> tuple[np.ndarray, np.ndarray]:
    t = max(len(s) for s in seqs)
    ids = np.full((len(seqs), t), PAD_ID, dtype=np.int64)
    keep = np.zeros((len(seqs), t), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        keep[i, : len(s)] = True
    return ids, keep


@dataclass
class TranslationBatch:
    src_ids: np.ndarray
    src_keep: np.ndarray
    dec_ids: np.ndarray
    dec_keep: np.ndarray
    targets: np.ndarray


@dataclass
class ClassificationBatch:
    ids: np.ndarray
    keep: np.ndarray
    labels: np.ndarray


def make_translation_batch(examples) -> TranslationBatch:
    src_ids, src_keep = _pad([list(e.src) + [EOS_ID] for e in examples])
    dec_ids, dec_keep = _pad([[BOS_ID] + list(e.tgt) for e in examples])
    tgt_ids, _ = _pad([list(e.tgt) + [EOS_ID] for e in examples])
    return TranslationBatch(src_ids, src_keep, dec_ids, dec_keep, tgt_ids)


def make_classification_batch(examples) -> ClassificationBatch:
    ids, keep = _pad([[BOS_ID] + list(e.tokens) for e in examples])
    labels = np.array([e.label for e in examples], dtype=np.int64)
    return ClassificationBatch(ids, keep, labels)


def batch_loss(model, batch, per_sequence=False, taps=None, overrides=None, drop_rng=None) -> Tensor:
    """Teacher-forced cross-entropy for translation, label NLL otherwise."""
    if model.task == "translation":
        memory = model.encode(batch.src_ids, batch.src_keep, taps, overrides, drop_rng)
        logits = model.decode(memory, batch.src_keep, batch.dec_ids, taps, overrides, drop_rng)
        return cross_entropy(logits, batch.targets, pad_mask=~batch.dec_keep, per_sequence=per_sequence)
    logits = model.classifier_logits(batch.ids, batch.keep, taps, overrides, drop_rng)
    return cross_entropy(logits, batch.labels)


# ---------------------------------------------------------------------------
# decoding and evaluation
# ---------------------------------------------------------------------------


def generate_batch(model, sources, max_len: int | None = None) -> list:
    """Greedy decode each source; stops at EOS or the length budget."""
    if model.task != "translation":
        raise TaskError("generate requires a translator model")
    if max_len is None:
        max_len = model.config.max_len - 1
    max_len = min(max_len, model.config.max_len - 1)
    if max_len <= 0:
        return [[] for _ in sources]
    src_ids, src_keep = _pad([list(s) + [EOS_ID] for s in sources])
    memory = model.encode(src_ids, src_keep)
    b = len(sources)
    dec = np.full((b, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    for _ in range(max_len):
        logits = model.decode(memory, src_keep, dec)
        nxt = np.argmax(logits.data[:, -1, :], axis=-1).astype(np.int64)
        nxt[done] = PAD_ID
        done |= nxt == EOS_ID
        dec = np.concatenate([dec, nxt[:, None]], axis=1)
        if done.all():
            break
    outs = []
    for i in range(b):
        toks = []
        for t in dec[i, 1:]:
            if t == EOS_ID or t == PAD_ID:
                break
            toks.append(int(t))
        outs.append(toks)
    return outs


def generate(model, source, max_len: int | None = None) -> list:
    """Greedy translation of a single source token sequence."""
    return generate_batch(model, [source], max_len)[0]


def classify_batch(model, examples) -> np.ndarray:
    if model.task != "classification":
        raise TaskError("classify requires a classifier model")
    batch = make_classification_batch(examples)
    logits = model.classifier_logits(batch.ids, batch.keep)
    return np.argmax(logits.data, axis=-1)


def classify(model, example) -> int:
    return int(classify_batch(model, [example])[0])


def _token_accuracy(hypotheses, references) -> tuple[float, np.ndarray]:
    per = []
    for h, r in zip(hypotheses, references):
        n = max(len(h), len(r))
        if n == 0:
            per.append(100.0)
            continue
        hits = sum(1 for a, b in zip(h, r) if a == b)
        per.append(100.0 * hits / n)
    per = np.array(per)
    return float(per.mean()), per


def evaluate(model, examples, metric: str, batch_size: int = 64) -> EvalResult:
    """Score a split under the model's current HeadMask.

    Translation metrics decode greedily; ``per_example`` holds either 0/100
    match indicators, per-example token accuracies, or BLEU sufficient
    statistics depending on the metric.
    """
    if not examples:
        raise ValueError("evaluate needs a non-empty split")
    if model.task == "translation":
        if metric not in EVAL_METRICS_TRANSLATION:
            raise TaskError(f"metric {metric!r} does not apply to a translator")
        hyps = []
        for i in range(0, len(examples), batch_size):
            hyps.extend(generate_batch(model, [e.src for e in examples[i : i + batch_size]]))
        refs = [list(e.tgt) for e in examples]
        if metric == "bleu":
            score, per = corpus_bleu(hyps, refs)
        elif metric == "sequence_accuracy":
            score, per = sequence_accuracy(hyps, refs)
        else:
            score, per = _token_accuracy(hyps, refs)
    else:
        if metric not in EVAL_METRICS_CLASSIFICATION:
            raise TaskError(f"metric {metric!r} does not apply to a classifier")
        preds = []
        for i in range(0, len(examples), batch_size):
            preds.extend(classify_batch(model, examples[i : i + batch_size]).tolist())
        score, per = classification_accuracy(preds, [e.label for e in examples])
    return EvalResult(metric=metric, score=score, per_example=per, n_examples=len(examples))


def default_metric(task: str) -> str:
    return "sequence_accuracy" if task == "translation" else "classification_accuracy"


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class OptimizerSpec:
    """Plain SGD with momentum and an inverse-sqrt warmup schedule."""

    learning_rate: float = 0.3
    momentum: float = 0.9
    warmup_steps: int = 60
    clip_norm: float = 1.0
    batch_size: int = 32


@dataclass
class Checkpoint:
    epoch: int
    config: ModelConfig
    params: dict
    metric_log: list
    masked_heads: tuple = ()
    head_counts: dict | None = None

    def to_model(self) -> TransformerModel:
        model = _build_structure(self.config, head_counts=self.head_counts)
        model.load_snapshot(self.params)
        for hid in self.masked_heads:
            model.mask[hid] = 0.0
        return model


def _checkpoint_from_model(model, epoch, metric_log) -> Checkpoint:
    return Checkpoint(
        epoch=epoch,
        config=model.config,
        params=model.snapshot(),
        metric_log=[dict(m) for m in metric_log],
        masked_heads=tuple(sorted(model.mask.masked_ids(), key=HeadId.sort_key)),
        head_counts=model._head_counts(),
    )


def _lr_at(step: int, spec: OptimizerSpec) -> float:
    t = max(step, 1)
    w = max(spec.warmup_steps, 1)
    return spec.learning_rate * min(t / w, (w / t) ** 0.5)


def train(
    model: TransformerModel,
    corpus: Corpus,
    epochs: int,
    optimizer_spec: OptimizerSpec | None = None,
    checkpoint_dir=None,
    seed: int = 0,
    eval_metric: str | None = None,
    eval_split: str = "eval_in_domain",
) -> list[Checkpoint]:
    """Train in place, checkpointing after every epoch.

    Returns one checkpoint per epoch plus the initial state (epoch 0). The
    metric log records mean train loss and the evaluation score per epoch.
    Raises TrainingDiverged as soon as the loss stops being finite.
    """
    if corpus.task != model.task:
        raise TaskError(f"corpus task {corpus.task!r} does not match model task {model.task!r}")
    if not corpus.split("train"):
        raise ValueError("training split is empty")
    spec = optimizer_spec or OptimizerSpec()
    metric = eval_metric or default_metric(model.task)
    make_batch = make_translation_batch if model.task == "translation" else make_classification_batch

    params = list(model.parameters())
    velocity = {name: np.zeros_like(t.data) for name, t in params}
    train_split = corpus.split("train")
    eval_examples = corpus.split(eval_split)

    metric_log = [
        {"epoch": 0, "train_loss": None, "eval_metric": metric, "eval_score": evaluate(model, eval_examples, metric).score}
    ]
    checkpoints = [_checkpoint_from_model(model, 0, metric_log)]
    if checkpoint_dir is not None:
        save_checkpoint(checkpoints[0], _checkpoint_path(checkpoint_dir, 0))

    step = 0
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([seed, 100 + epoch]).permutation(len(train_split))
        losses = []
        for lo in range(0, len(order), spec.batch_size):
            batch = make_batch([train_split[i] for i in order[lo : lo + spec.batch_size]])
            step += 1
            drop_rng = (
                np.random.default_rng([seed, 500 + epoch, step])
                if model.config.dropout > 0.0
                else None
            )
            with ComputationRecord() as rec:
                loss = batch_loss(model, batch, drop_rng=drop_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"loss became {value} at epoch {epoch} step {step} (lr={_lr_at(step, spec):.4g})"
                )
            losses.append(value)
            grads = backward(rec, loss)
            gs = [grads.grad(t).data for _, t in params]
            norm = float(np.sqrt(sum(float((g * g).sum()) for g in gs)))
            factor = spec.clip_norm / norm if 0 < spec.clip_norm < norm else 1.0
            lr = _lr_at(step, spec)
            for (name, t), g in zip(params, gs):
                v = velocity[name]
                v *= spec.momentum
                v += g * factor
                t.data -= lr * v
        metric_log.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "eval_metric": metric,
                "eval_score": evaluate(model, eval_examples, metric).score,
            }
        )
        ckpt = _checkpoint_from_model(model, epoch, metric_log)
        checkpoints.append(ckpt)
        if checkpoint_dir is not None:
            save_checkpoint(ckpt, _checkpoint_path(checkpoint_dir, epoch))
    return checkpoints


def _checkpoint_path(directory, epoch: int):
    import os

    os.makedirs(directory, exist_ok=True)
    return os.path.join(str(directory), f"checkpoint_{epoch:03d}.hlck")


# ---------------------------------------------------------------------------
# checkpoint files: magic + JSON header + raw little-endian float64 payload
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = sorted(ckpt.params)
    header = {
        "format": 1,
        "epoch": ckpt.epoch,
        "config": asdict(ckpt.config),
        "metric_log": ckpt.metric_log,
        "masked_heads": [str(h) for h in ckpt.masked_heads],
        "head_counts": None
        if ckpt.head_counts is None
        else [[k, l, n] for (k, l), n in sorted(ckpt.head_counts.items())],
        "tensors": [{"name": n, "shape": list(ckpt.params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(ckpt.params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (blob_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(blob_len).decode("utf-8"))
        params = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            params[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    head_counts = None
    if header.get("head_counts") is not None:
        head_counts = {(k, l): n for k, l, n in header["head_counts"]}
    return Checkpoint(
        epoch=header["epoch"],
        config=ModelConfig(**header["config"]),
        params=params,
        metric_log=header["metric_log"],
        masked_heads=tuple(HeadId.parse(s) for s in header["masked_heads"]),
        head_counts=head_counts,
    )
