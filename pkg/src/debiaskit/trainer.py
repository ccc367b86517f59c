"""Training loop, token masking, optimization, probing, and checkpoint io."""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch, Corpus, make_batches
from .encoder import (CLS_ID, MASK_ID, SEP_ID, EncoderConfig, EncoderModel,
                      Vocabulary, _truncated_normal, encode, mlm_logits,
                      tokenize, tokenize_pair)
from .errors import (BadMagic, DegenerateLabels, DivergedLoss, LabelOutOfRange,
                     ManifestMismatch, TruncatedFile, VersionMismatch)
from .objective import (LossBreakdown, ObjectiveConfig, alignment_loss,
                        combine_losses, contrastive_loss, mlm_loss)

CHECKPOINT_MAGIC = b"MBL1"
CHECKPOINT_VERSION = 1

_RANDOM_TOKEN_START = 5  # corruption never plants a special token


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 32
    grad_accum: int = 1
    epochs: int = 2
    seed: int = 0
    maxlen: int = 32
    mask_prob: float = 0.15
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 0
    eval_every: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def __post_init__(self):
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError("mask_prob must be in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.grad_accum < 1:
            raise ValueError("grad_accum must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass
class TrainTrace:
    steps: list
    eval_points: list
    seed: int
    wall_clock: float = 0.0

    def to_jsonl(self) -> str:
        """Deterministic per-step trace (wall clock deliberately excluded)."""
        lines = []
        for i, bd in enumerate(self.steps):
            record = {"step": i + 1}
            record.update(bd.to_dict())
            lines.append(json.dumps(record, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


def mask_tokens(ids: np.ndarray, mask: np.ndarray, mask_prob: float, rng,
                vocab_size: Optional[int] = None):
    """BERT-style corruption of a [B, T] id batch.

    Candidate positions are real tokens other than the sentence delimiters.
    Each candidate is independently selected with probability mask_prob;
    selected positions become the mask token 80% of the time, a random
    non-special token 10%, and stay unchanged 10%. If no position is
    selected the draw is repeated once; a still-empty result is returned
    with an empty position list.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.int64)
    if vocab_size is None:
        vocab_size = int(ids.max()) + 1
    candidates = (mask == 1) & (ids != CLS_ID) & (ids != SEP_ID)

    def draw():
        selected = candidates & (rng.random(ids.shape) < mask_prob)
        split = rng.random(ids.shape)
        return selected, split

    selected, split = draw()
    if not selected.any():
        selected, split = draw()

    corrupted = ids.copy()
    corrupted[selected & (split < 0.8)] = MASK_ID
    random_ids = rng.integers(_RANDOM_TOKEN_START, max(_RANDOM_TOKEN_START + 1, vocab_size),
                              size=ids.shape)
    swap = selected & (split >= 0.8) & (split < 0.9)
    corrupted[swap] = random_ids[swap]
    # remaining selected positions keep their original token

    targets = np.where(selected, ids, -1)
    positions = [(int(r), int(c)) for r, c in zip(*np.nonzero(selected))]
    return corrupted, targets, positions


class Adam:
    """Adam with bias correction, constant lr, and optional linear warmup."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, warmup_steps: int = 0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.warmup_steps = warmup_steps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        lr = self.lr
        if self.warmup_steps > 0:
            lr = lr * min(1.0, self.t / self.warmup_steps)
        for name, g in grads.items():
            p = self.params[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / (1 - self.beta1 ** self.t)
            vhat = self.v[name] / (1 - self.beta2 ** self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


def _split_rows(pooled: Tensor, m: int):
    blocks = []
    for i in range(4):
        blocks.append(ad.embedding(pooled, np.arange(i * m, (i + 1) * m)))
    return blocks


def batch_loss(model: EncoderModel, batch: Batch, config: TrainConfig,
               mask_rng, drop_rng) -> tuple[Tensor, LossBreakdown]:
    """Forward pass for one batch: clean encodings feed the contrastive and
    alignment terms, corrupted copies feed the masked-token term."""
    obj = config.objective
    m = batch.size
    ids = np.concatenate([batch.premise_ids, batch.hypothesis_ids,
                          batch.premise_aug_ids, batch.hypothesis_aug_ids])
    masks = np.concatenate([batch.premise_mask, batch.hypothesis_mask,
                            batch.premise_aug_mask, batch.hypothesis_aug_mask])

    l_cl = l_al = l_mlm = None
    if obj.use_cl or obj.use_al:
        enc = encode(model, ids, masks, train=True, rng=drop_rng)
        p, h, p_aug, h_aug = _split_rows(enc.pooled, m)
        if obj.use_cl:
            l_cl = contrastive_loss(p, h, p_aug, h_aug, batch.exclusion_flags,
                                    obj.tau, obj.exclude_all_duplicates)
        if obj.use_al:
            l_al = alignment_loss(p, h, p_aug, h_aug, obj.align_variant, obj.tau)
    if obj.use_mlm:
        corrupted, targets, positions = mask_tokens(ids, masks, config.mask_prob,
                                                    mask_rng, vocab_size=len(model.vocab))
        if positions:
            enc_mlm = encode(model, corrupted, masks, train=True, rng=drop_rng)
            logits = mlm_logits(model, enc_mlm.token_states)
            l_mlm = mlm_loss(logits, ids, positions)
        else:
            l_mlm = Tensor(0.0)
    return combine_losses(l_cl, l_al, l_mlm, obj, batch_size=m)


def holdout_alignment(model: EncoderModel, corpus: Corpus, batch_size: int = 64) -> float:
    """Eval-mode mean squared similarity gap over a held-out corpus."""
    batches = make_batches(corpus, batch_size, seed=0, shuffle=False,
                           vocab=model.vocab, maxlen=model.config.maxlen)
    total, count = 0.0, 0
    for batch in batches:
        ids = np.concatenate([batch.premise_ids, batch.hypothesis_ids,
                              batch.premise_aug_ids, batch.hypothesis_aug_ids])
        masks = np.concatenate([batch.premise_mask, batch.hypothesis_mask,
                                batch.premise_aug_mask, batch.hypothesis_aug_mask])
        enc = encode(model, ids, masks, train=False)
        p, h, p_aug, h_aug = _split_rows(enc.pooled, batch.size)
        total += alignment_loss(p, h, p_aug, h_aug, "AL1").item() * batch.size
        count += batch.size
    return total / count


def _mean_breakdown(parts: list[LossBreakdown]) -> LossBreakdown:
    def agg(name):
        values = [getattr(b, name) for b in parts]
        if values[0] is None:
            return None
        return float(np.mean(values))

    return LossBreakdown(l_cl=agg("l_cl"), l_al=agg("l_al"), l_mlm=agg("l_mlm"),
                         total=float(np.mean([b.total for b in parts])),
                         batch_size=sum(b.batch_size for b in parts))


def train(model: EncoderModel, corpus: Corpus, config: TrainConfig,
          holdout: Optional[Corpus] = None,
          checkpoint_dir=None) -> tuple[EncoderModel, TrainTrace, list]:
    """Optimize the combined objective; deterministic given (seed, config, corpus)."""
    if len(corpus.quads) == 0:
        raise ValueError("corpus is empty")
    start = time.monotonic()
    master = np.random.default_rng(config.seed)
    shuffle_seeds = [int(master.integers(2 ** 62)) for _ in range(config.epochs)]
    mask_rng = np.random.default_rng(int(master.integers(2 ** 62)))
    drop_rng = np.random.default_rng(int(master.integers(2 ** 62)))

    optimizer = Adam(model.parameters(), lr=config.lr, beta1=config.beta1,
                     beta2=config.beta2, eps=config.adam_eps,
                     warmup_steps=config.warmup_steps)
    trace = TrainTrace(steps=[], eval_points=[], seed=config.seed)
    checkpoints = []
    step = 0
    for epoch in range(config.epochs):
        batches = make_batches(corpus, config.batch_size, shuffle_seeds[epoch],
                               shuffle=True, vocab=model.vocab, maxlen=config.maxlen)
        for group_start in range(0, len(batches), config.grad_accum):
            group = batches[group_start:group_start + config.grad_accum]
            accum: dict[str, np.ndarray] = {}
            parts = []
            for batch in group:
                loss, breakdown = batch_loss(model, batch, config, mask_rng, drop_rng)
                ad.backward(loss)
                for name, p in model.parameters().items():
                    if p.grad is not None:
                        accum[name] = accum.get(name, 0) + p.grad
                parts.append(breakdown)
            step += 1
            merged = _mean_breakdown(parts)
            if not np.isfinite(merged.total):
                raise DivergedLoss(f"non-finite loss at step {step}")
            trace.steps.append(merged)
            optimizer.step({n: g / len(group) for n, g in accum.items()})
            if config.eval_every > 0 and holdout is not None and step % config.eval_every == 0:
                trace.eval_points.append((step, holdout_alignment(model, holdout)))
        if checkpoint_dir is not None:
            os.makedirs(checkpoint_dir, exist_ok=True)
            path = os.path.join(checkpoint_dir, f"checkpoint-epoch{epoch + 1}.mbl")
            save_checkpoint(model, path, extra_config=train_config_dict(config))
            checkpoints.append(path)
    trace.wall_clock = time.monotonic() - start
    return model, trace, checkpoints


def train_config_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)


# ---------------------------------------------------------------------------
# frozen-encoder linear probe
# ---------------------------------------------------------------------------

@dataclass
class LinearProbe:
    weights: np.ndarray  # [d, C]
    bias: np.ndarray     # [C]

    def logits(self, embeddings: np.ndarray) -> np.ndarray:
        return embeddings @ self.weights + self.bias

    def predict_proba(self, embeddings: np.ndarray) -> np.ndarray:
        z = self.logits(embeddings)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        return self.logits(embeddings).argmax(axis=-1)

    def accuracy(self, embeddings: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict(embeddings) == np.asarray(labels)).mean())


def train_probe(embeddings: np.ndarray, labels, num_classes: int,
                lr: float = 1.0, steps: int = 300) -> LinearProbe:
    """Full-batch multinomial logistic regression on frozen embeddings."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if len(np.unique(y)) < 2:
        raise DegenerateLabels("probe training needs at least two distinct labels")
    if y.min() < 0 or y.max() >= num_classes:
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    xt = Tensor(x)
    w = Tensor(np.zeros((x.shape[1], num_classes)), requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    for _ in range(steps):
        loss = ad.cross_entropy_with_logits(xt @ w + b, y)
        ad.backward(loss)
        w.data = w.data - lr * w.grad
        b.data = b.data - lr * b.grad
    return LinearProbe(weights=w.data.copy(), bias=b.data.copy())


# ---------------------------------------------------------------------------
# classifier fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class FineTuneConfig:
    lr: float = 1e-3
    epochs: int = 3
    batch_size: int = 16
    seed: int = 0
    maxlen: int = 32


class SequenceClassifier:
    """An encoder plus an affine classification head over the pooled output."""

    def __init__(self, model: EncoderModel, num_classes: int, seed: int = 0):
        self.model = model
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)
        d = model.config.hidden_dim
        self.head_w = Tensor(_truncated_normal(rng, (d, num_classes)), requires_grad=True)
        self.head_b = Tensor(np.zeros(num_classes), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.model.parameters())
        params["head_w"] = self.head_w
        params["head_b"] = self.head_b
        return params

    def _tokenize(self, item):
        first, second = item
        if second is None:
            return tokenize(first, self.model.vocab, self.model.config.maxlen)
        return tokenize_pair(first, second, self.model.vocab, self.model.config.maxlen)

    def forward(self, items, train: bool = False, rng=None) -> Tensor:
        rows = [self._tokenize(it) for it in items]
        ids = np.array([r[0] for r in rows], dtype=np.int64)
        mask = np.array([r[1] for r in rows], dtype=np.int64)
        enc = encode(self.model, ids, mask, train=train, rng=rng)
        return enc.pooled @ self.head_w + self.head_b

    def predict_proba(self, items) -> np.ndarray:
        z = self.forward(items).data
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def predict(self, items) -> np.ndarray:
        return self.forward(items).data.argmax(axis=-1)


def fine_tune_classifier(model: EncoderModel, examples, num_classes: int,
                         config: FineTuneConfig) -> SequenceClassifier:
    """Cross-entropy fine-tuning of the whole encoder plus a fresh head.

    Each example is ((text_a, text_b_or_None), label); labels must lie in
    [0, num_classes).
    """
    labels = np.array([lab for _, lab in examples], dtype=np.intp)
    if len(labels) == 0:
        raise ValueError("no training examples")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    clf = SequenceClassifier(model, num_classes, seed=config.seed)
    master = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng(int(master.integers(2 ** 62)))
    optimizer = Adam(clf.parameters(), lr=config.lr)
    n = len(examples)
    for epoch in range(config.epochs):
        order = np.random.default_rng(int(master.integers(2 ** 62))).permutation(n)
        for start in range(0, n, config.batch_size):
            chosen = order[start:start + config.batch_size]
            items = [examples[i][0] for i in chosen]
            target = labels[chosen]
            logits = clf.forward(items, train=True, rng=drop_rng)
            loss = ad.cross_entropy_with_logits(logits, target)
            ad.backward(loss)
            grads = {name: p.grad for name, p in clf.parameters().items()
                     if p.grad is not None}
            optimizer.step(grads)
    return clf


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

def save_checkpoint(model: EncoderModel, path, extra_config: Optional[dict] = None):
    """Binary format: magic, u32 version, u64 metadata length, JSON metadata,
    then float64 little-endian parameter blobs in manifest order."""
    manifest = [[name, list(model.params[name].data.shape)]
                for name in sorted(model.params)]
    metadata = {
        "encoder": dataclasses.asdict(model.config),
        "vocab": model.vocab.tokens,
        "manifest": manifest,
    }
    if extra_config is not None:
        metadata["extra"] = extra_config
    blob = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, _ in manifest:
            fh.write(model.params[name].data.astype("<f8").tobytes())


def load_checkpoint(path) -> EncoderModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise TruncatedFile(f"{path}: shorter than the fixed header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: magic {raw[:4]!r}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    meta_len = struct.unpack("<Q", raw[8:16])[0]
    if len(raw) < 16 + meta_len:
        raise TruncatedFile(f"{path}: metadata runs past end of file")
    try:
        metadata = json.loads(raw[16:16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestMismatch(f"{path}: unreadable metadata ({exc})") from exc
    vocab = Vocabulary(metadata["vocab"])
    config = EncoderConfig(**metadata["encoder"])
    model = EncoderModel(vocab, config, seed=0)

    manifest = metadata["manifest"]
    expected = {name: list(model.params[name].data.shape) for name in model.params}
    listed = {name: shape for name, shape in manifest}
    if listed != expected:
        raise ManifestMismatch(f"{path}: manifest does not match the model architecture")

    offset = 16 + meta_len
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise TruncatedFile(f"{path}: parameter blob {name!r} is incomplete")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        model.params[name].data = arr.astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise ManifestMismatch(f"{path}: {len(raw) - offset} trailing bytes")
    return model
