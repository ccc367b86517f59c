"""Dense float64 tensors with reverse-mode automatic differentiation.

Ops record a define-by-run tape; ``backward`` walks it in reverse
topological order and accumulates gradients by summation over uses.
Everything is numpy-backed and single-threaded per graph, so repeated
runs on identical inputs are bit-identical.
"""

from __future__ import annotations

import itertools
import warnings

import numpy as np
from scipy.special import erf

from .errors import NonFinite, NotScalar, ShapeMismatch, ZeroNorm

_NEG_INF = -1.0e30  # additive-mask stand-in for -inf; exp() underflows to exactly 0.0
_node_counter = itertools.count()


class Tensor:
    """A float64 array plus the tape record that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.node_id = next(_node_counter)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped as non-grad leaves
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not an op; use mul with power(x, -1)")
        return scale(self, 1.0 / float(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents, backward, op: str) -> Tensor:
    """Wrap an op output, propagating requires_grad and checking finiteness."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = tuple(parents)
    out._backward = backward
    out.op = op
    out.node_id = next(_node_counter)
    if not np.all(np.isfinite(data)):
        raise NonFinite(f"non-finite values produced by op '{op}' (node {out.node_id})")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add: {a.data.shape} vs {b.data.shape}") from exc

    def backward(g, grads):
        if a.requires_grad:
            grads[a] = grads.get(a, 0) + _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            grads[b] = grads.get(b, 0) + _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), backward, "add")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g, grads):
        if a.requires_grad:
            grads[a] = grads.get(a, 0) + (-g)

    return _make(-a.data, (a,), backward, "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"mul: {a.data.shape} vs {b.data.shape}") from exc

    def backward(g, grads):
        if a.requires_grad:
            grads[a] = grads.get(a, 0) + _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            grads[b] = grads.get(b, 0) + _unbroadcast(g * a.data, b.data.shape)

    return _make(data, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def backward(g, grads):
        if a.requires_grad:
            grads[a] = grads.get(a, 0) + c * g

    return _make(c * a.data, (a,), backward, "scale")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch("matmul requires tensors of rank >= 2")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeMismatch(f"matmul: {a.data.shape} vs {b.data.shape}") from exc

    def backward(g, grads):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            grads[a] = grads.get(a, 0) + _unbroadcast(ga, a.data.shape)
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            grads[b] = grads.get(b, 0) + _unbroadcast(gb, b.data.shape)

    return _make(data, (a, b), backward, "matmul")


def power(a, exponent: float) -> Tensor:
    """Elementwise a**exponent for a constant exponent (a > 0 when exponent is fractional)."""
    a = _as_tensor(a)
    exponent = float(exponent)
    data = a.data ** exponent

    def backward(g, grads):
        if a.requires_grad:
            grads[a] = grads.get(a, 0) + g * exponent * a.data ** (exponent - 1.0)

    return _make(data, (a,), backward, "power")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # _make reports the overflow as NonFinite
        data = np.exp(a.data)

    def backward(g, grads):
        if a.requires_grad:
            grads[a] = grads.get(a, 0) + g * data

    return _make(data, (a,), backward, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def backward(g, grads):
        if a.requires_grad:
            grads[a] = grads.get(a, 0) + g / a.data

    return _make(data, (a,), backward, "log")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def backward(g, grads):
        if a.requires_grad:
            grads[a] = grads.get(a, 0) + g * (1.0 - data * data)

    return _make(data, (a,), backward, "tanh")


def gelu(a) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x)."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    data = x * cdf

    def backward(g, grads):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
            grads[a] = grads.get(a, 0) + g * (cdf + x * pdf)

    return _make(data, (a,), backward, "gelu")


def softmax(a) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g, grads):
        if a.requires_grad:
            inner = (g * data).sum(axis=-1, keepdims=True)
            grads[a] = grads.get(a, 0) + data * (g - inner)

    return _make(data, (a,), backward, "softmax")


def logsumexp(a) -> Tensor:
    """log(sum(exp(x))) over the last axis, stabilized by max subtraction."""
    a = _as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    data = (np.log(s) + m).squeeze(-1)

    def backward(g, grads):
        if a.requires_grad:
            grads[a] = grads.get(a, 0) + np.expand_dims(g, -1) * (e / s)

    return _make(data, (a,), backward, "logsumexp")


def layernorm(x, gain, bias, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def backward(g, grads):
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
            grads[gain] = grads.get(gain, 0) + gg.reshape(gain.data.shape)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
            grads[bias] = grads.get(bias, 0) + gb.reshape(bias.data.shape)
        if x.requires_grad:
            gy = g * gain.data
            gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                        - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
            grads[x] = grads.get(x, 0) + gx

    return _make(data, (x, gain, bias), backward, "layernorm")


def embedding(table, ids: np.ndarray) -> Tensor:
    """Gather rows of a [V, d] table by an integer id array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    data = table.data[ids]

    def backward(g, grads):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
            grads[table] = grads.get(table, 0) + gt

    return _make(data, (table,), backward, "embedding")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, grads):
        if a.requires_grad:
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            grads[a] = grads.get(a, 0) + np.broadcast_to(gg, a.data.shape).copy()

    return _make(np.asarray(data), (a,), backward, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)

    def backward(g, grads):
        if a.requires_grad:
            grads[a] = grads.get(a, 0) + g.reshape(a.data.shape)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inverse = np.argsort(axes)

    def backward(g, grads):
        if a.requires_grad:
            grads[a] = grads.get(a, 0) + g.transpose(inverse)

    return _make(a.data.transpose(axes), (a,), backward, "transpose")


def concat(parts, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g, grads):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                grads[p] = grads.get(p, 0) + g[tuple(idx)]

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


def select_positions(a, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick vectors a[rows[k], cols[k], :] from a rank-3 tensor, giving [K, d]."""
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    data = a.data[rows, cols, :]

    def backward(g, grads):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, (rows, cols), g)
            grads[a] = grads.get(a, 0) + ga

    return _make(data, (a,), backward, "select_positions")


def cross_entropy_with_logits(logits, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of [N, C] logits against integer targets."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    n = logits.data.shape[0]
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    lse = np.log(e.sum(axis=-1)) + m[:, 0]
    picked = logits.data[np.arange(n), targets]
    data = np.asarray((lse - picked).sum() / n)

    def backward(g, grads):
        if logits.requires_grad:
            probs = e / e.sum(axis=-1, keepdims=True)
            probs[np.arange(n), targets] -= 1.0
            grads[logits] = grads.get(logits, 0) + g * probs / n

    return _make(data, (logits,), backward, "cross_entropy_with_logits")


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with keep probability 1-p; mask drawn from rng."""
    a = _as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)

    def backward(g, grads):
        if a.requires_grad:
            grads[a] = grads.get(a, 0) + g * keep

    return _make(a.data * keep, (a,), backward, "dropout")


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def l2_normalize_rows(x, eps_check: float = 1e-12) -> Tensor:
    """Scale each row of [m, d] to unit norm; raises ZeroNorm on degenerate rows."""
    x = _as_tensor(x)
    norms = np.sqrt((x.data ** 2).sum(axis=-1))
    if np.any(norms < eps_check):
        raise ZeroNorm(f"row norm below {eps_check}")
    sq = tsum(mul(x, x), axis=-1, keepdims=True)
    return mul(x, power(sq, -0.5))


def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity of two vectors, differentiable in both."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape or a.data.size == 0:
        raise ShapeMismatch(f"cosine_similarity: {a.data.shape} vs {b.data.shape}")
    na = np.sqrt((a.data ** 2).sum())
    nb = np.sqrt((b.data ** 2).sum())
    if na < 1e-12 or nb < 1e-12:
        raise ZeroNorm("cosine_similarity on a near-zero vector")
    dot = tsum(mul(a, b))
    inv_a = power(tsum(mul(a, a)), -0.5)
    inv_b = power(tsum(mul(b, b)), -0.5)
    return mul(mul(dot, inv_a), inv_b)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt=None):
    """Populate .grad for every requires_grad tensor reachable from loss.

    When wrt is given, returns {tensor: grad array}; tensors in wrt that the
    loss does not depend on get zero gradients and a warning.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.data.shape}")

    grads: dict = {}
    grads[loss] = np.ones_like(loss.data)
    for node in reversed(_topo_order(loss)):
        g = grads.pop(node, None)
        if g is None or node._backward is None:
            if g is not None and node.requires_grad and node._backward is None:
                node.grad = np.asarray(g)
            continue
        node._backward(np.asarray(g), grads)
        if node.requires_grad and node._parents:
            node.grad = None  # interior nodes do not retain grads
    # leftover entries are leaves
    for node, g in grads.items():
        if node.requires_grad:
            node.grad = np.asarray(g)

    if wrt is None:
        return None
    out = {}
    for t in wrt:
        if t.grad is None:
            warnings.warn(f"tensor (node {t.node_id}) is not reachable from the loss; "
                          "returning a zero gradient")
            out[t] = np.zeros_like(t.data)
        else:
            out[t] = t.grad
    return out
