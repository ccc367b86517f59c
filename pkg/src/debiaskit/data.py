"""Corpus ingestion, synthetic corpus generation, and batch assembly."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .cda import AugmentedQuad, EntailmentPair, GenderLexicon, augment_pair
from .encoder import Vocabulary, tokenize
from .errors import BatchTooSmall, EmptyCorpus, MalformedLine

# Native SNLI/MNLI field names accepted on ingest.
_FIELD_ALIASES = {
    "premise": ("premise", "sentence1"),
    "hypothesis": ("hypothesis", "sentence2"),
    "label": ("label", "gold_label"),
}

LABELS = ("entailment", "neutral", "contradiction")


@dataclass
class Corpus:
    quads: list[AugmentedQuad]
    provenance: str
    total_read: int
    kept: int

    def __len__(self):
        return len(self.quads)

    def texts(self):
        """All sentences in the corpus (originals and augmentations)."""
        for q in self.quads:
            yield q.premise
            yield q.hypothesis
            yield q.premise_aug
            yield q.hypothesis_aug

    def dump_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for q in self.quads:
                fh.write(json.dumps({
                    "premise": q.premise,
                    "hypothesis": q.hypothesis,
                    "premise_aug": q.premise_aug,
                    "hypothesis_aug": q.hypothesis_aug,
                }, sort_keys=True) + "\n")


def _pick(record: dict, canonical: str, path, lineno: int):
    for alias in _FIELD_ALIASES[canonical]:
        if alias in record:
            value = record[alias]
            if not isinstance(value, str):
                raise MalformedLine(f"{path}:{lineno}: field {alias!r} is not a string")
            return value
    raise MalformedLine(f"{path}:{lineno}: missing field {canonical!r}")


def ingest_nli_jsonl(path, label_filter, lex: GenderLexicon,
                     gender_filter: bool = True) -> Corpus:
    """Read premise/hypothesis/label JSONL, filter, and augment each kept pair.

    label_filter is a set of label strings, or None to keep every label.
    With gender_filter on, pairs left untouched by augmentation on both
    sides are dropped.
    """
    quads = []
    total = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            total += 1
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise MalformedLine(f"{path}:{lineno}: line is not a JSON object")
            premise = _pick(record, "premise", path, lineno)
            hypothesis = _pick(record, "hypothesis", path, lineno)
            label = _pick(record, "label", path, lineno)
            if not premise.strip() or not hypothesis.strip():
                raise MalformedLine(f"{path}:{lineno}: empty premise or hypothesis")
            if label_filter is not None and label not in label_filter:
                continue
            quad = augment_pair(EntailmentPair(premise, hypothesis, label), lex)
            if gender_filter and quad.premise_unchanged and quad.hypothesis_unchanged:
                continue
            quads.append(quad)
    if not quads:
        raise EmptyCorpus(f"{path}: no pairs survived the filters "
                          f"(read {total}, kept 0)")
    provenance = (f"{path} label_filter={sorted(label_filter) if label_filter else None} "
                  f"gender_filter={gender_filter}")
    return Corpus(quads=quads, provenance=provenance, total_read=total, kept=len(quads))


# ---------------------------------------------------------------------------
# synthetic desk-scale corpus
# ---------------------------------------------------------------------------

OCCUPATIONS = ("nurse", "doctor", "engineer", "teacher", "mechanic", "librarian")
OCCUPATION_GENDER = {
    "nurse": "F", "doctor": "M", "engineer": "M",
    "teacher": "F", "mechanic": "M", "librarian": "F",
}
SUBJECTS = {"M": "man", "F": "woman"}
# (finite form, base form); the base form follows "did not".
ACTIVITIES = (
    ("ate lunch", "eat lunch"),
    ("read books", "read books"),
    ("drank coffee", "drink coffee"),
    ("played chess", "play chess"),
    ("watched films", "watch films"),
    ("wrote letters", "write letters"),
    ("rode buses", "ride buses"),
    ("fixed shelves", "fix shelves"),
)


@dataclass(frozen=True)
class PairTag:
    gender: str      # M or F
    occupation: str
    hypothesis_style: str  # "occupation" or "subject"


def generate_synthetic_corpus(seed: int, n_pairs: int, bias_strength: float,
                              lex: GenderLexicon) -> tuple[Corpus, list[PairTag]]:
    """Templated entailment pairs over a closed vocabulary.

    bias_strength interpolates the subject-gender draw between uniform (0)
    and fully determined by the occupation's assigned gender (1).
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if not 0.0 <= bias_strength <= 1.0:
        raise ValueError("bias_strength must be in [0, 1]")
    rng = np.random.default_rng(seed)
    quads, tags = [], []
    for _ in range(n_pairs):
        occ = OCCUPATIONS[rng.integers(len(OCCUPATIONS))]
        if rng.random() < bias_strength:
            gender = OCCUPATION_GENDER[occ]
        else:
            gender = "M" if rng.random() < 0.5 else "F"
        act, _ = ACTIVITIES[rng.integers(len(ACTIVITIES))]
        style = "subject" if rng.random() < 0.5 else "occupation"
        premise = f"The {SUBJECTS[gender]} who is a {occ} {act}."
        if style == "occupation":
            hypothesis = f"The {occ} {act}."
        else:
            hypothesis = f"The {SUBJECTS[gender]} {act}."
        quads.append(augment_pair(EntailmentPair(premise, hypothesis, "entailment"), lex))
        tags.append(PairTag(gender=gender, occupation=occ, hypothesis_style=style))
    corpus = Corpus(quads=quads,
                    provenance=f"synthetic seed={seed} n={n_pairs} bias={bias_strength}",
                    total_read=n_pairs, kept=n_pairs)
    return corpus, tags


def generate_synthetic_nli(seed: int, n_examples: int) -> list[EntailmentPair]:
    """Balanced three-way inference examples over the synthetic vocabulary.

    Entailment keeps the premise activity, contradiction negates it, and
    neutral either switches the activity or pairs two different occupation
    subjects, so the labels are decidable from surface cues alone. Gendered
    subjects never co-occur with a different occupation subject, keeping
    the gender-occupation axis out of the label signal.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_examples):
        occ = OCCUPATIONS[rng.integers(len(OCCUPATIONS))]
        gender = "M" if rng.random() < 0.5 else "F"
        subject = SUBJECTS[gender]
        act_idx = rng.integers(len(ACTIVITIES))
        finite, base = ACTIVITIES[act_idx]
        premise = f"The {subject} who is a {occ} {finite}."
        label = LABELS[i % 3]
        if label == "entailment":
            hyp_subject = occ if rng.random() < 0.5 else subject
            hypothesis = f"The {hyp_subject} {finite}."
        elif label == "neutral":
            if rng.random() < 0.5:
                other = (act_idx + 1 + rng.integers(len(ACTIVITIES) - 1)) % len(ACTIVITIES)
                hypothesis = f"The {occ} {ACTIVITIES[other][0]}."
            else:
                other_occ = OCCUPATIONS[(OCCUPATIONS.index(occ) + 1
                                         + rng.integers(len(OCCUPATIONS) - 1))
                                        % len(OCCUPATIONS)]
                premise = f"The {occ} {finite}."
                hypothesis = f"The {other_occ} {finite}."
        else:
            hypothesis = f"The {occ} did not {base}."
        out.append(EntailmentPair(premise, hypothesis, label))
    return out


def bias_probe_templates() -> list[tuple[str, str]]:
    """Gendered-subject vs occupation sentence pairs; all are gold neutral."""
    pairs = []
    for gender in ("M", "F"):
        for occ in OCCUPATIONS:
            for finite, _ in ACTIVITIES:
                pairs.append((f"The {SUBJECTS[gender]} {finite}.",
                              f"The {occ} {finite}."))
    return pairs


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Tokenized views of m quads plus which hypotheses the swap left unchanged."""

    premise_ids: np.ndarray
    premise_mask: np.ndarray
    hypothesis_ids: np.ndarray
    hypothesis_mask: np.ndarray
    premise_aug_ids: np.ndarray
    premise_aug_mask: np.ndarray
    hypothesis_aug_ids: np.ndarray
    hypothesis_aug_mask: np.ndarray
    exclusion_flags: np.ndarray  # bool [m], hypothesis == hypothesis_aug
    size: int = field(init=False)

    def __post_init__(self):
        self.size = self.premise_ids.shape[0]


def _tokenize_block(texts, vocab: Vocabulary, maxlen: int):
    rows = [tokenize(t, vocab, maxlen) for t in texts]
    return (np.array([r[0] for r in rows], dtype=np.int64),
            np.array([r[1] for r in rows], dtype=np.int64))


def make_batches(corpus: Corpus, batch_size: int, seed: int, shuffle: bool,
                 vocab: Vocabulary, maxlen: int) -> list[Batch]:
    """Partition the corpus into batches; a final partial batch below 2 is dropped."""
    if batch_size < 2:
        raise BatchTooSmall(f"batch_size must be >= 2, got {batch_size}")
    order = np.arange(len(corpus.quads))
    if shuffle:
        order = np.random.default_rng(seed).permutation(order)
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [corpus.quads[i] for i in order[start:start + batch_size]]
        if len(chunk) < 2:
            warnings.warn("dropping a final batch of size 1")
            continue
        # trim padding to the longest sequence in the batch
        toks = [tokenize(t, vocab, maxlen)
                for q in chunk
                for t in (q.premise, q.hypothesis, q.premise_aug, q.hypothesis_aug)]
        width = max(sum(m) for _, m in toks)
        p_ids, p_mask = _tokenize_block([q.premise for q in chunk], vocab, width)
        h_ids, h_mask = _tokenize_block([q.hypothesis for q in chunk], vocab, width)
        pa_ids, pa_mask = _tokenize_block([q.premise_aug for q in chunk], vocab, width)
        ha_ids, ha_mask = _tokenize_block([q.hypothesis_aug for q in chunk], vocab, width)
        flags = np.array([q.hypothesis == q.hypothesis_aug for q in chunk], dtype=bool)
        batches.append(Batch(p_ids, p_mask, h_ids, h_mask,
                             pa_ids, pa_mask, ha_ids, ha_mask, flags))
    return batches
