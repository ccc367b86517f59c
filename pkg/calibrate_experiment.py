"""Scratch calibration for the desk-scale debiasing experiment (not shipped)."""
import sys
import time

import numpy as np

from debiaskit.cda import builtin_lexicon
from debiaskit.data import (LABELS, bias_probe_templates, generate_synthetic_corpus,
                            generate_synthetic_nli)
from debiaskit.encoder import EncoderConfig, EncoderModel, build_vocab, encode_texts
from debiaskit.metrics import bias_nli_scores
from debiaskit.objective import ObjectiveConfig
from debiaskit.trainer import TrainConfig, holdout_alignment, train, train_probe

EPOCHS = int(sys.argv[1]) if len(sys.argv) > 1 else 10
LR = float(sys.argv[2]) if len(sys.argv) > 2 else 2e-3
N_PAIRS = int(sys.argv[3]) if len(sys.argv) > 3 else 2000

lex = builtin_lexicon()
corpus, _ = generate_synthetic_corpus(0, N_PAIRS, 1.0, lex)
holdout, _ = generate_synthetic_corpus(1000, 300, 1.0, lex)
nli_train = generate_synthetic_nli(5, 900)
templates = bias_probe_templates()
texts = list(corpus.texts()) + list(holdout.texts())
texts += [p.premise for p in nli_train] + [p.hypothesis for p in nli_train]
texts += [a for a, b in templates] + [b for a, b in templates]
vocab = build_vocab(texts)


def pair_features(model, pairs):
    a = encode_texts(model, [p for p, h in pairs], repr_mode="pooled")
    b = encode_texts(model, [h for p, h in pairs], repr_mode="pooled")
    return np.concatenate([a, b, np.abs(a - b), a * b], axis=1)


def arm(seed, alpha):
    model = EncoderModel(vocab, EncoderConfig(), seed=seed)
    cfg = TrainConfig(lr=LR, epochs=EPOCHS, seed=seed,
                      objective=ObjectiveConfig(alpha=alpha))
    t0 = time.time()
    model, trace, _ = train(model, corpus, cfg)
    al = holdout_alignment(model, holdout)
    pairs = [(p.premise, p.hypothesis) for p in nli_train]
    X = pair_features(model, pairs)
    y = np.array([LABELS.index(p.label) for p in nli_train])
    split = 720
    probe = train_probe(X[:split], y[:split], 3, lr=1.0, steps=400)
    acc = probe.accuracy(X[split:], y[split:])
    probs = probe.predict_proba(pair_features(model, templates))
    res = bias_nli_scores(probs, [0.5, 0.7])
    print(f"  seed={seed} alpha={alpha}: AL1={al:.4e} acc={acc:.3f} "
          f"FN={res.fn:.4f} NN={res.nn:.4f} wall={time.time() - t0:.0f}s", flush=True)
    return al, res.fn


print(f"epochs={EPOCHS} lr={LR} n_pairs={N_PAIRS}")
wins_a = wins_b = 0
for seed in (1, 2, 3):
    al_m, fn_m = arm(seed, 0.05)
    al_b, fn_b = arm(seed, 0.0)
    ok_a, ok_b = al_m < al_b, fn_m >= fn_b
    wins_a += ok_a
    wins_b += ok_b
    print(f"  seed {seed}: AL1 {al_m:.3e} vs {al_b:.3e} -> {ok_a}; "
          f"FN {fn_m:.3f} vs {fn_b:.3f} -> {ok_b}", flush=True)
print(f"criterion (a): {wins_a}/3, criterion (b): {wins_b}/3")
