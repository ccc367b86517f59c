"""Desk-scale bidirectional transformer encoder.

Whitespace-and-punctuation tokenizer, learned positions, post-norm
attention blocks, a tanh pooler over the leading classification slot,
and a masked-token prediction head.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyText, IdOutOfRange

CLS, SEP, MASK, PAD, UNK = "[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"
SPECIAL_TOKENS = (CLS, SEP, MASK, PAD, UNK)
CLS_ID, SEP_ID, MASK_ID, PAD_ID, UNK_ID = range(5)

_WORD_RE = re.compile(r"\w+|[^\w\s]")

_ATTN_MASK_FILL = -1.0e30


def word_tokens(text: str) -> list[str]:
    """Split into lowercased word and punctuation tokens."""
    return _WORD_RE.findall(text.lower())


def word_tokens_cased(text: str) -> list[str]:
    """Same split as word_tokens but preserving case (used by augmentation)."""
    return _WORD_RE.findall(text)


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:5]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the five special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens)


def build_vocab(texts, min_freq: int = 1) -> Vocabulary:
    """Collect tokenizer tokens from texts; ids are stable for a given corpus."""
    counts: dict[str, int] = {}
    for text in texts:
        for tok in word_tokens(text):
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(t for t, c in counts.items() if c >= min_freq)
    return Vocabulary(list(SPECIAL_TOKENS) + kept)


def tokenize(text: str, vocab: Vocabulary, maxlen: int):
    """Encode one sentence as ([CLS] tokens [SEP] PAD...) ids plus a mask.

    Raises EmptyText when the input has no non-whitespace characters.
    """
    if maxlen < 3:
        raise ValueError(f"maxlen must be >= 3, got {maxlen}")
    if not text.strip():
        raise EmptyText("cannot tokenize empty text")
    words = word_tokens(text)[: maxlen - 2]
    ids = [CLS_ID] + [vocab.id_of(w) for w in words] + [SEP_ID]
    mask = [1] * len(ids)
    pad = maxlen - len(ids)
    return ids + [PAD_ID] * pad, mask + [0] * pad


def tokenize_pair(first: str, second: str, vocab: Vocabulary, maxlen: int):
    """Encode a sentence pair as [CLS] a [SEP] b [SEP], trimming the longer side."""
    if maxlen < 5:
        raise ValueError(f"maxlen must be >= 5 for pairs, got {maxlen}")
    if not first.strip() or not second.strip():
        raise EmptyText("cannot tokenize an empty pair member")
    a = word_tokens(first)
    b = word_tokens(second)
    budget = maxlen - 3
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    ids = ([CLS_ID] + [vocab.id_of(w) for w in a] + [SEP_ID]
           + [vocab.id_of(w) for w in b] + [SEP_ID])
    mask = [1] * len(ids)
    pad = maxlen - len(ids)
    return ids + [PAD_ID] * pad, mask + [0] * pad


def tokenize_batch(texts, vocab: Vocabulary, maxlen: int):
    """Tokenize several sentences into [B, T] id and mask arrays."""
    rows = [tokenize(t, vocab, maxlen) for t in texts]
    ids = np.array([r[0] for r in rows], dtype=np.int64)
    mask = np.array([r[1] for r in rows], dtype=np.int64)
    return ids, mask


@dataclass
class EncoderConfig:
    layers: int = 2
    heads: int = 2
    hidden_dim: int = 64
    ffn_dim: int = 256
    maxlen: int = 32
    dropout: float = 0.1
    tie_mlm: bool = True

    def __post_init__(self):
        if self.hidden_dim % self.heads != 0:
            raise ValueError("hidden_dim must be divisible by heads")


def _truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class EncoderModel:
    """Parameter container; all tensors are float64 leaves with gradients."""

    def __init__(self, vocab: Vocabulary, config: EncoderConfig, seed: int = 0):
        self.vocab = vocab
        self.config = config
        rng = np.random.default_rng(seed)
        d, f, v = config.hidden_dim, config.ffn_dim, len(vocab)
        p: dict[str, Tensor] = {}

        def weight(name, shape):
            p[name] = Tensor(_truncated_normal(rng, shape), requires_grad=True)

        def zeros(name, shape):
            p[name] = Tensor(np.zeros(shape), requires_grad=True)

        def ones(name, shape):
            p[name] = Tensor(np.ones(shape), requires_grad=True)

        weight("tok_emb", (v, d))
        weight("pos_emb", (config.maxlen, d))
        ones("emb_ln_g", (d,))
        zeros("emb_ln_b", (d,))
        for i in range(config.layers):
            for w in ("wq", "wk", "wv", "wo"):
                weight(f"layer{i}_{w}", (d, d))
                zeros(f"layer{i}_b{w[1]}", (d,))
            ones(f"layer{i}_ln1_g", (d,))
            zeros(f"layer{i}_ln1_b", (d,))
            weight(f"layer{i}_ffn_w1", (d, f))
            zeros(f"layer{i}_ffn_b1", (f,))
            weight(f"layer{i}_ffn_w2", (f, d))
            zeros(f"layer{i}_ffn_b2", (d,))
            ones(f"layer{i}_ln2_g", (d,))
            zeros(f"layer{i}_ln2_b", (d,))
        weight("pooler_w", (d, d))
        zeros("pooler_b", (d,))
        weight("mlm_w", (d, d))
        zeros("mlm_b", (d,))
        ones("mlm_ln_g", (d,))
        zeros("mlm_ln_b", (d,))
        if not config.tie_mlm:
            weight("mlm_decoder", (d, v))
        zeros("mlm_bias", (v,))
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def param_hash(self) -> int:
        """Order-sensitive hash of all parameter bytes."""
        h = 0
        for name in sorted(self.params):
            h = hash((h, name, self.params[name].data.tobytes()))
        return h


@dataclass
class EncodedBatch:
    token_states: Tensor      # [B, T, d]
    pooled: Tensor            # [B, d], tanh-affine of the CLS state
    attention_mask: np.ndarray

    @property
    def cls_states(self) -> Tensor:
        b = self.token_states.data.shape[0]
        return ad.select_positions(self.token_states, np.arange(b), np.zeros(b, dtype=np.intp))


def encode(model: EncoderModel, ids: np.ndarray, mask: np.ndarray,
           train: bool = False, rng: np.random.Generator | None = None) -> EncodedBatch:
    """Run the encoder over an id batch; PAD key positions are never attended to."""
    cfg = model.config
    p = model.params
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError("ids must be [B, T]")
    v = len(model.vocab)
    if ids.min() < 0 or ids.max() >= v:
        raise IdOutOfRange(f"token id outside [0, {v})")
    bsz, seqlen = ids.shape
    if seqlen > cfg.maxlen:
        raise ValueError(f"sequence length {seqlen} exceeds maxlen {cfg.maxlen}")
    d, heads = cfg.hidden_dim, cfg.heads
    head_dim = d // heads
    drop = cfg.dropout if train else 0.0
    if drop > 0.0 and rng is None:
        raise ValueError("training-mode encode needs an rng for dropout")

    x = ad.embedding(p["tok_emb"], ids) + ad.embedding(p["pos_emb"], np.arange(seqlen))
    x = ad.layernorm(x, p["emb_ln_g"], p["emb_ln_b"])
    if drop > 0.0:
        x = ad.dropout(x, drop, rng)

    # additive mask: 0 at real keys, large negative at PAD keys
    attn_bias = ((1 - mask)[:, None, None, :] * _ATTN_MASK_FILL).astype(np.float64)

    for i in range(cfg.layers):
        q = x @ p[f"layer{i}_wq"] + p[f"layer{i}_bq"]
        k = x @ p[f"layer{i}_wk"] + p[f"layer{i}_bk"]
        val = x @ p[f"layer{i}_wv"] + p[f"layer{i}_bv"]
        q = ad.transpose(ad.reshape(q, (bsz, seqlen, heads, head_dim)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (bsz, seqlen, heads, head_dim)), (0, 2, 1, 3))
        val = ad.transpose(ad.reshape(val, (bsz, seqlen, heads, head_dim)), (0, 2, 1, 3))
        scores = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(head_dim))
        weights = ad.softmax(scores + attn_bias)
        ctx = ad.reshape(ad.transpose(weights @ val, (0, 2, 1, 3)), (bsz, seqlen, d))
        attn_out = ctx @ p[f"layer{i}_wo"] + p[f"layer{i}_bo"]
        if drop > 0.0:
            attn_out = ad.dropout(attn_out, drop, rng)
        x = ad.layernorm(x + attn_out, p[f"layer{i}_ln1_g"], p[f"layer{i}_ln1_b"])
        h = ad.gelu(x @ p[f"layer{i}_ffn_w1"] + p[f"layer{i}_ffn_b1"])
        h = h @ p[f"layer{i}_ffn_w2"] + p[f"layer{i}_ffn_b2"]
        if drop > 0.0:
            h = ad.dropout(h, drop, rng)
        x = ad.layernorm(x + h, p[f"layer{i}_ln2_g"], p[f"layer{i}_ln2_b"])

    cls_state = ad.select_positions(x, np.arange(bsz), np.zeros(bsz, dtype=np.intp))
    pooled = ad.tanh(cls_state @ p["pooler_w"] + p["pooler_b"])
    return EncodedBatch(token_states=x, pooled=pooled, attention_mask=mask)


def mlm_logits(model: EncoderModel, token_states: Tensor) -> Tensor:
    """Vocabulary logits [B, T, |V|] from encoder token states."""
    p = model.params
    h = ad.gelu(token_states @ p["mlm_w"] + p["mlm_b"])
    h = ad.layernorm(h, p["mlm_ln_g"], p["mlm_ln_b"])
    if model.config.tie_mlm:
        decoder = ad.transpose(p["tok_emb"], (1, 0))
    else:
        decoder = p["mlm_decoder"]
    return h @ decoder + p["mlm_bias"]


def encode_texts(model: EncoderModel, texts, repr_mode: str = "pooled") -> np.ndarray:
    """Eval-mode sentence embeddings, either the pooled output or the raw CLS state."""
    ids, mask = tokenize_batch(texts, model.vocab, model.config.maxlen)
    batch = encode(model, ids, mask, train=False)
    if repr_mode == "pooled":
        return batch.pooled.data.copy()
    if repr_mode == "cls":
        return batch.cls_states.data.copy()
    raise ValueError(f"unknown representation mode: {repr_mode!r}")


def encode_pairs(model: EncoderModel, pairs, repr_mode: str = "pooled") -> np.ndarray:
    """Eval-mode embeddings of sentence pairs packed into one sequence."""
    rows = [tokenize_pair(a, b, model.vocab, model.config.maxlen) for a, b in pairs]
    ids = np.array([r[0] for r in rows], dtype=np.int64)
    mask = np.array([r[1] for r in rows], dtype=np.int64)
    batch = encode(model, ids, mask, train=False)
    if repr_mode == "pooled":
        return batch.pooled.data.copy()
    if repr_mode == "cls":
        return batch.cls_states.data.copy()
    raise ValueError(f"unknown representation mode: {repr_mode!r}")
