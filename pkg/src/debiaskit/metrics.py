"""Fairness metric formulas and the model drivers that feed them.

Formula functions are pure and permutation-invariant over their inputs;
drivers score benchmark-style item files against an encoder and its
masked-token head.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .encoder import (MASK_ID, UNK_ID, EncoderModel, encode, mlm_logits,
                      tokenize, word_tokens)
from .errors import (BadTau, DimMismatch, EmptyInput, EmptySet,
                     MalformedItemFile, MissingGender, OutOfRange, ZeroNorm)


# ---------------------------------------------------------------------------
# likelihood-based stereotype scores
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StereoItem:
    """Log-probability scores of the three candidate completions of a context."""

    stereotype: float
    anti_stereotype: float
    unrelated: float

    def __post_init__(self):
        for v in (self.stereotype, self.anti_stereotype, self.unrelated):
            if not math.isfinite(v):
                raise ValueError("candidate scores must be finite")


@dataclass
class StereoSetResult:
    lm: float
    ss: float
    icat: float
    n: int
    lm_ties: int
    ss_ties: int


def icat_score(lm: float, ss: float) -> float:
    """Combined score: lm * min(ss, 100 - ss) / 50."""
    return lm * min(ss, 100.0 - ss) / 50.0


def stereoset_scores(items) -> StereoSetResult:
    """Language-modeling score, stereotype score, and their combination.

    A valid choice means some meaningful candidate outscores the unrelated
    one; ties count as non-wins and are tallied separately.
    """
    items = list(items)
    if not items:
        raise EmptyInput("stereoset_scores needs at least one item")
    lm_wins = ss_wins = lm_ties = ss_ties = 0
    for it in items:
        best_valid = max(it.stereotype, it.anti_stereotype)
        if best_valid > it.unrelated:
            lm_wins += 1
        elif best_valid == it.unrelated:
            lm_ties += 1
        if it.stereotype > it.anti_stereotype:
            ss_wins += 1
        elif it.stereotype == it.anti_stereotype:
            ss_ties += 1
    n = len(items)
    lm = 100.0 * lm_wins / n
    ss = 100.0 * ss_wins / n
    return StereoSetResult(lm=lm, ss=ss, icat=icat_score(lm, ss), n=n,
                           lm_ties=lm_ties, ss_ties=ss_ties)


@dataclass(frozen=True)
class CrowsItem:
    """Per-sentence (position, masked-token log probability) lists for the
    stereotypical and anti-stereotypical member of a minimal pair."""

    stereo_scores: tuple
    anti_scores: tuple

    def __post_init__(self):
        if not self.stereo_scores or not self.anti_scores:
            raise ValueError("each sentence needs at least one unique token")


@dataclass
class CrowsResult:
    ss: float
    n: int
    ties: int
    all_ties: bool


def crows_ss(items) -> CrowsResult:
    """Fraction of pairs whose stereotypical sentence gets the higher mean
    masked-token log probability over its unique tokens."""
    items = list(items)
    if not items:
        raise EmptyInput("crows_ss needs at least one item")
    wins = ties = 0
    for it in items:
        stereo = float(np.mean([s for _, s in it.stereo_scores]))
        anti = float(np.mean([s for _, s in it.anti_scores]))
        if stereo > anti:
            wins += 1
        elif stereo == anti:
            ties += 1
    n = len(items)
    return CrowsResult(ss=100.0 * wins / n, n=n, ties=ties, all_ties=(ties == n))


# ---------------------------------------------------------------------------
# embedding-association statistic
# ---------------------------------------------------------------------------

def _cosine_rows(w: np.ndarray, group: np.ndarray) -> np.ndarray:
    norms_w = np.linalg.norm(w)
    norms_g = np.linalg.norm(group, axis=1)
    if norms_w < 1e-12 or np.any(norms_g < 1e-12):
        raise ZeroNorm("embedding with near-zero norm")
    return (group @ w) / (norms_g * norms_w)


@dataclass
class SeatResult:
    per_word: dict
    statistic: float
    effect_size: float


def seat_statistic(targets_x, targets_y, attributes_a, attributes_b) -> SeatResult:
    """Association difference of two target concept sets with two attribute sets.

    Per word: mean cosine to A minus mean cosine to B. The statistic sums
    those values over X and subtracts the sum over Y; the effect size is
    the mean difference normalized by the pooled sample deviation over
    X union Y.
    """
    sets = [np.asarray(s, dtype=np.float64) for s in
            (targets_x, targets_y, attributes_a, attributes_b)]
    names = ("X", "Y", "A", "B")
    for name, s in zip(names, sets):
        if s.size == 0:
            raise EmptySet(f"embedding set {name} is empty")
    x, y, a, b = sets
    dims = {s.shape[-1] for s in sets}
    if len(dims) != 1 or any(s.ndim != 2 for s in sets):
        raise DimMismatch("all sets must be [n, d] with a common d")

    def assoc(w):
        return float(np.mean(_cosine_rows(w, a)) - np.mean(_cosine_rows(w, b)))

    s_x = [assoc(w) for w in x]
    s_y = [assoc(w) for w in y]
    statistic = float(np.sum(s_x) - np.sum(s_y))
    union = np.array(s_x + s_y)
    spread = float(union.std(ddof=1)) if len(union) > 1 else 0.0
    effect = 0.0 if spread == 0.0 else float((np.mean(s_x) - np.mean(s_y)) / spread)
    per_word = {("X", i): v for i, v in enumerate(s_x)}
    per_word.update({("Y", i): v for i, v in enumerate(s_y)})
    return SeatResult(per_word=per_word, statistic=statistic, effect_size=effect)


# ---------------------------------------------------------------------------
# classification parity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassifiedExample:
    gender: str   # "M" or "F"
    true: str
    pred: str


@dataclass
class TprResult:
    gap_overall: float
    per_class: dict        # class -> gap or None when undefined
    rms: float
    accuracy_m: float
    accuracy_f: float


def tpr_gaps(examples, classes=None) -> TprResult:
    """Recall gaps between gender groups, per class and in aggregate.

    A class with no true instances for one gender has no defined gap and
    is excluded from the root-mean-square.
    """
    examples = list(examples)
    if not examples:
        raise EmptyInput("tpr_gaps needs at least one example")
    genders = {e.gender for e in examples}
    if not {"M", "F"} <= genders:
        raise MissingGender(f"need examples of both genders, got {sorted(genders)}")
    if classes is None:
        classes = sorted({e.true for e in examples})

    def recall(gender, cls):
        relevant = [e for e in examples if e.gender == gender and e.true == cls]
        if not relevant:
            return None
        return sum(1 for e in relevant if e.pred == e.true) / len(relevant)

    per_class = {}
    squares = []
    for cls in classes:
        tpr_m, tpr_f = recall("M", cls), recall("F", cls)
        if tpr_m is None or tpr_f is None:
            per_class[cls] = None
            continue
        gap = abs(tpr_m - tpr_f)
        per_class[cls] = gap
        squares.append(gap * gap)
    rms = math.sqrt(sum(squares) / len(squares)) if squares else 0.0

    def overall(gender):
        rel = [e for e in examples if e.gender == gender]
        return sum(1 for e in rel if e.pred == e.true) / len(rel)

    acc_m, acc_f = overall("M"), overall("F")
    return TprResult(gap_overall=abs(acc_m - acc_f), per_class=per_class, rms=rms,
                     accuracy_m=acc_m, accuracy_f=acc_f)


# ---------------------------------------------------------------------------
# inference neutrality
# ---------------------------------------------------------------------------

NLI_CLASSES = ("entailment", "neutral", "contradiction")
_NEUTRAL_INDEX = 1


@dataclass
class BiasNliResult:
    nn: float
    fn: float
    thresholds: dict  # tau -> fraction above


def bias_nli_scores(distributions, tau_list) -> BiasNliResult:
    """Neutrality of three-class probability vectors ordered
    (entailment, neutral, contradiction)."""
    dists = np.asarray(list(distributions), dtype=np.float64)
    if dists.size == 0:
        raise EmptyInput("bias_nli_scores needs at least one distribution")
    if dists.ndim != 2 or dists.shape[1] != 3:
        raise ValueError("each distribution must have exactly three entries")
    if np.any(dists < 0) or np.any(np.abs(dists.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("rows must be probability vectors summing to 1")
    for tau in tau_list:
        if not 0.0 < tau < 1.0:
            raise BadTau(f"tau must be in (0, 1), got {tau}")
    neutral = dists[:, _NEUTRAL_INDEX]
    nn = float(neutral.mean())
    fn = float((dists.argmax(axis=1) == _NEUTRAL_INDEX).mean())
    thresholds = {float(tau): float((neutral > tau).mean()) for tau in tau_list}
    return BiasNliResult(nn=nn, fn=fn, thresholds=thresholds)


def winobias_tpr(f1_pro: float, f1_anti: float) -> float:
    """Absolute difference of pro- and anti-stereotypical average F1 scores."""
    for v in (f1_pro, f1_anti):
        if not 0.0 <= v <= 100.0:
            raise OutOfRange(f"F1 scores must be in [0, 100], got {v}")
    return abs(f1_pro - f1_anti)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Named metrics with per-seed values; mean and sample std derive from them."""

    values: dict = field(default_factory=dict)  # name -> list of per-seed values

    def add(self, name: str, value: float):
        self.values.setdefault(name, []).append(float(value))

    def summary(self) -> dict:
        out = {}
        for name, vals in sorted(self.values.items()):
            arr = np.asarray(vals, dtype=np.float64)
            std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
            out[name] = {"per_seed": [float(v) for v in vals],
                         "mean": float(arr.mean()),
                         "std": std,
                         "n": int(len(arr))}
        return out

    def to_json(self, resolved_config: Optional[dict] = None) -> str:
        payload = {"metrics": self.summary()}
        if resolved_config is not None:
            payload["config"] = resolved_config
        return json.dumps(payload, sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# model drivers
# ---------------------------------------------------------------------------

def _mlm_log_probs(model: EncoderModel, ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
    enc = encode(model, ids, mask, train=False)
    logits = mlm_logits(model, enc.token_states).data
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def score_candidate(model: EncoderModel, context: str, candidate: str) -> Optional[float]:
    """Mean masked-token log probability of the candidate tokens filling the
    single BLANK slot of the context; None when any token is out of vocabulary."""
    if context.count("BLANK") != 1:
        raise MalformedItemFile("context must contain exactly one BLANK")
    cand_tokens = word_tokens(candidate)
    if not cand_tokens:
        raise MalformedItemFile(f"candidate {candidate!r} has no tokens")
    cand_ids = [model.vocab.id_of(t) for t in cand_tokens]
    if UNK_ID in cand_ids:
        return None
    filled = context.replace("BLANK", candidate)
    ids, mask = tokenize(filled, model.vocab, model.config.maxlen)
    ids = np.array([ids], dtype=np.int64)
    mask = np.array([mask], dtype=np.int64)

    # locate the candidate span: tokens of the filled sentence align with the
    # context split around BLANK
    prefix_tokens = word_tokens(context.split("BLANK")[0])
    start = 1 + len(prefix_tokens)  # offset 1 for the leading [CLS]
    span = list(range(start, start + len(cand_ids)))
    if span[-1] >= ids.shape[1] or any(ids[0, t] != cand_ids[k] for k, t in enumerate(span)):
        return None  # candidate truncated away
    masked = ids.copy()
    masked[0, span] = MASK_ID
    log_probs = _mlm_log_probs(model, masked, mask)
    return float(np.mean([log_probs[0, t, cand_ids[k]] for k, t in enumerate(span)]))


@dataclass
class StereoDriverResult:
    items: list
    skipped_oov: int


def stereoset_driver(model: EncoderModel, records) -> StereoDriverResult:
    """Score fill-in-the-blank records; records lacking any in-vocabulary
    candidate score are skipped and counted."""
    items, skipped = [], 0
    for rec in records:
        try:
            context = rec["context"]
            scores = {role: score_candidate(model, context, rec[role])
                      for role in ("stereotype", "anti_stereotype", "unrelated")}
        except KeyError as exc:
            raise MalformedItemFile(f"missing field {exc.args[0]!r}") from exc
        if any(v is None for v in scores.values()):
            skipped += 1
            continue
        items.append(StereoItem(**scores))
    return StereoDriverResult(items=items, skipped_oov=skipped)


def _unique_positions(tokens_a, tokens_b):
    """Positions in tokens_a whose token is not matched in tokens_b (multiset)."""
    budget = {}
    for tok in tokens_b:
        budget[tok] = budget.get(tok, 0) + 1
    unique = []
    for pos, tok in enumerate(tokens_a):
        if budget.get(tok, 0) > 0:
            budget[tok] -= 1
        else:
            unique.append(pos)
    return unique


def _sentence_unique_scores(model: EncoderModel, sentence: str, other: str):
    """Mask each unique token in turn and collect its log probability."""
    toks = word_tokens(sentence)
    kept = min(len(toks), model.config.maxlen - 2)
    unique = _unique_positions(toks, word_tokens(other))
    ids, mask = tokenize(sentence, model.vocab, model.config.maxlen)
    ids = np.array([ids], dtype=np.int64)
    mask = np.array([mask], dtype=np.int64)
    scores = []
    for pos in unique:
        if pos >= kept:
            continue  # truncated away
        t = pos + 1  # [CLS] offset
        target = ids[0, t]
        if target == UNK_ID:
            continue
        masked = ids.copy()
        masked[0, t] = MASK_ID
        log_probs = _mlm_log_probs(model, masked, mask)
        scores.append((pos, float(log_probs[0, t, target])))
    return scores


@dataclass
class CrowsDriverResult:
    items: list
    skipped: int


def crows_driver(model: EncoderModel, records) -> CrowsDriverResult:
    """Build minimal-pair items from sent_more/sent_less records."""
    items, skipped = [], 0
    for rec in records:
        try:
            more, less = rec["sent_more"], rec["sent_less"]
        except KeyError as exc:
            raise MalformedItemFile(f"missing field {exc.args[0]!r}") from exc
        stereo = _sentence_unique_scores(model, more, less)
        anti = _sentence_unique_scores(model, less, more)
        if not stereo or not anti:
            skipped += 1
            continue
        items.append(CrowsItem(stereo_scores=tuple(stereo), anti_scores=tuple(anti)))
    return CrowsDriverResult(items=items, skipped=skipped)
