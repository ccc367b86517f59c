"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (scalar loops, math.exp) and shares
no code with the library paths it checks.
"""

import math

import numpy as np


def fd_gradient(f, arrays, h=1e-6):
    """Central finite-difference gradients of a scalar function of arrays."""
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(*arrays)
            flat[i] = orig - h
            down = f(*arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(a, b):
    """Elementwise |a-b| / max(1, |a|, |b|), reduced to the worst entry."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float((np.abs(a - b) / denom).max())


def cos(u, v):
    num = sum(x * y for x, y in zip(u, v))
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(x * x for x in v))
    return num / (nu * nv)


def brute_contrastive(P, H, Pa, Ha, flags, tau, exclude_all=False):
    """Direct enumeration of the entailment contrastive loss."""
    m = len(P)
    total = 0.0
    for i in range(m):
        for anchor, positive in ((P[i], H[i]), (Pa[i], Ha[i])):
            num = math.exp(cos(anchor, positive) / tau)
            den = 0.0
            for j in range(m):
                den += math.exp(cos(anchor, H[j]) / tau)
                dropped = flags[j] and (j == i or exclude_all)
                if not dropped:
                    den += math.exp(cos(anchor, Ha[j]) / tau)
            total += -math.log(num / den)
    return total / m


def brute_al1(P, H, Pa, Ha):
    m = len(P)
    return sum((cos(Pa[i], Ha[i]) - cos(P[i], H[i])) ** 2 for i in range(m)) / m


def brute_al2(P, H, Pa, Ha, tau):
    m = len(P)
    total = 0.0
    for originals, augmented in ((P, Pa), (H, Ha)):
        pool = list(originals) + list(augmented)
        for i in range(m):
            num = math.exp(cos(originals[i], augmented[i]) / tau)
            den = 0.0
            for j, cand in enumerate(pool):
                if j == i:
                    continue  # the anchor itself
                den += math.exp(cos(originals[i], cand) / tau)
            total += -math.log(num / den)
    return total / (2 * m)


def brute_al3(P, H, Pa, Ha):
    m = len(P)
    return sum(-(cos(P[i], Pa[i]) - cos(H[i], Ha[i])) for i in range(m)) / m


def brute_stereoset(items):
    """items: list of (stereo, anti, unrelated) score triples."""
    n = len(items)
    lm = sum(1 for s, a, u in items if max(s, a) > u) / n * 100.0
    ss = sum(1 for s, a, u in items if s > a) / n * 100.0
    icat = lm * min(ss, 100.0 - ss) / 50.0
    return lm, ss, icat


def brute_crows(items):
    """items: list of (stereo score list, anti score list)."""
    wins = 0
    for stereo, anti in items:
        if sum(stereo) / len(stereo) > sum(anti) / len(anti):
            wins += 1
    return 100.0 * wins / len(items)


def brute_seat(X, Y, A, B):
    def s(w):
        return (sum(cos(w, a) for a in A) / len(A)
                - sum(cos(w, b) for b in B) / len(B))

    sx = [s(x) for x in X]
    sy = [s(y) for y in Y]
    stat = sum(sx) - sum(sy)
    union = sx + sy
    mean = sum(union) / len(union)
    var = sum((v - mean) ** 2 for v in union) / (len(union) - 1)
    effect = (sum(sx) / len(sx) - sum(sy) / len(sy)) / math.sqrt(var) if var > 0 else 0.0
    return stat, effect


def brute_tpr(examples, classes):
    """examples: list of (gender, true, pred)."""

    def recall(gender, cls):
        rel = [(g, t, p) for g, t, p in examples if g == gender and t == cls]
        if not rel:
            return None
        return sum(1 for g, t, p in rel if p == t) / len(rel)

    gaps = {}
    squares = []
    for cls in classes:
        tm, tf = recall("M", cls), recall("F", cls)
        if tm is None or tf is None:
            gaps[cls] = None
            continue
        gaps[cls] = abs(tm - tf)
        squares.append(gaps[cls] ** 2)
    rms = math.sqrt(sum(squares) / len(squares)) if squares else 0.0

    def acc(gender):
        rel = [(g, t, p) for g, t, p in examples if g == gender]
        return sum(1 for g, t, p in rel if p == t) / len(rel)

    return abs(acc("M") - acc("F")), gaps, rms


def brute_bias_nli(dists, taus):
    n = len(dists)
    nn = sum(d[1] for d in dists) / n
    fn = sum(1 for d in dists if max(range(3), key=lambda k: d[k]) == 1) / n
    t = {tau: sum(1 for d in dists if d[1] > tau) / n for tau in taus}
    return nn, fn, t
