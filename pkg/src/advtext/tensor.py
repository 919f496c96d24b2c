"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation evaluates eagerly on numpy arrays and records a backward
closure, so a Tensor doubles as a node in the computation graph that
produced it. ``gradients(loss, wrt)`` walks that graph once and returns
adjoint arrays without mutating any state, which makes it safe to run a
throwaway backward pass (e.g. to build a perturbation against frozen
parameters) and then backpropagate the real training loss through the
same parameter tensors.
"""

from __future__ import annotations

import itertools
import zlib
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import NumericalError

_uid = itertools.count()


class RngStream:
    """Deterministic, splittable randomness backed by the Philox
    counter-based generator.

    Equal seeds give bitwise-equal sample sequences across runs and
    platforms. ``child(*tags)`` derives an independent stream from string
    or integer tags, so unrelated consumers (dropout, probe vectors,
    batch shuffling) never perturb each other's sequences.
    """

    def __init__(self, seed, _spawn_key=()):
        self.seed = int(seed)
        self._spawn_key = tuple(_spawn_key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self._spawn_key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *tags) -> "RngStream":
        key = tuple(t if isinstance(t, int) else zlib.crc32(str(t).encode())
                    for t in tags)
        return RngStream(self.seed, self._spawn_key + key)

    def normal(self, shape=()):
        return self._gen.standard_normal(shape)

    def uniform(self, shape=(), low=0.0, high=1.0):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=()):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)


class Tensor:
    """A node in the computation graph: a value plus how it was made."""

    __slots__ = ("data", "parents", "op", "uid", "_backward")

    def __init__(self, data, parents=(), op="leaf", backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.op = op
        self.uid = next(_uid)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # Operator sugar; the free functions below do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    """A leaf holding fixed data; gradients never flow out of it."""
    return Tensor(data, op="constant")


def _node(data, parents, op, backward) -> Tensor:
    out = Tensor(data, parents, op, backward)
    if not np.all(np.isfinite(out.data)):
        raise NumericalError(f"non-finite values produced by node {out.uid} (op '{op}')")
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data / b.data, (a, b), "div",
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data @ b.data, (a, b), "matmul",
                 lambda g: (g @ b.data.T, a.data.T @ g))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    return _node(y, (x,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node(y, (x,), "tanh", lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    keep = x.data > 0
    return _node(np.where(keep, x.data, 0.0), (x,), "relu", lambda g: (g * keep,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    return _node(y, (x,), "sqrt", lambda g: (g * 0.5 / y,))


def log_softmax(x) -> Tensor:
    """Log of softmax along the last axis, computed in log-space."""
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) + m
    y = x.data - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _node(y, (x,), "log_softmax", backward)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), "softmax", backward)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(y, (x,), "sum", backward)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), "reshape",
                 lambda g: (g.reshape(x.shape),))


def concat(parts: Sequence[Tensor], axis=0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis),
                 tuple(parts), "concat", backward)


def narrow(x, axis, start, length) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    x = as_tensor(x)
    idx = tuple(slice(None) if d != axis else slice(start, start + length)
                for d in range(x.ndim))

    def backward(g):
        gx = np.zeros(x.shape)
        gx[idx] = g
        return (gx,)

    return _node(x.data[idx].copy(), (x,), "narrow", backward)


def timestep(x, t) -> Tensor:
    """x[:, t, :] for a (B, T, D) tensor, as a (B, D) tensor."""
    b, _, d = x.shape
    return reshape(narrow(x, 1, t, 1), (b, d))


def gather_rows(table, ids) -> Tensor:
    """Rows of a 2-D table selected by an integer id array."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range for table with {table.shape[0]} rows")

    def backward(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _node(table.data[ids], (table,), "gather_rows", backward)


def stop_gradient(x) -> Tensor:
    """Same value as x, but backward never crosses into x's graph."""
    x = as_tensor(x)
    return Tensor(x.data, (), "stop_gradient")


def dropout(x, rate, rng, training=True) -> Tensor:
    """Inverted dropout: zero entries with probability ``rate`` and scale
    survivors by 1/(1-rate) at train time; identity at eval time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = rng.uniform(x.shape) >= rate
    return mul(x, constant(keep / (1.0 - rate)))


# ---------------------------------------------------------------------------
# composite losses
# ---------------------------------------------------------------------------

def kl_categorical(p_logits, q_logits) -> Tensor:
    """KL(softmax(p) || softmax(q)) summed over the class axis and averaged
    over any leading batch axis."""
    p_logits, q_logits = as_tensor(p_logits), as_tensor(q_logits)
    if p_logits.shape != q_logits.shape:
        raise ValueError(f"shape mismatch: {p_logits.shape} vs {q_logits.shape}")
    per = tsum(mul(softmax(p_logits), sub(log_softmax(p_logits), log_softmax(q_logits))),
               axis=-1)
    if per.ndim == 0:
        return per
    return tmean(reshape(per, (-1,)))


def sum_log_prob(logits, labels) -> Tensor:
    """Sum over the batch of log p(label | logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return tsum(mul(log_softmax(logits), constant(onehot)))


def nll(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under logits."""
    n = np.asarray(labels).shape[0]
    return mul(sum_log_prob(logits, labels), -1.0 / n)


def l2_norm(x) -> Tensor:
    return sqrt(tsum(mul(x, x)))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-consumers ordering of the graph below root."""
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
        for p in node.parents:
            stack.append((p, False))
    return order


def gradients(output: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Adjoints of a scalar output with respect to each tensor in ``wrt``.

    ``wrt`` entries may be leaves or interior nodes. Tensors not reached
    by the backward pass get zero gradients. No state on any Tensor is
    modified, so repeated calls never interfere; in particular a backward
    pass used only to extract the gradient at an intermediate node leaves
    no trace on the parameters upstream of it.
    """
    wrt = list(wrt)
    if output.data.shape != ():
        raise ValueError(f"backward requires a scalar output, got shape {output.data.shape}")
    wanted = {id(t) for t in wrt}
    adjoint: dict[int, np.ndarray] = {id(output): np.asarray(1.0)}
    result: dict[int, np.ndarray] = {}
    for node in reversed(_topo_order(output)):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if id(node) in wanted:
            result[id(node)] = np.broadcast_to(g, node.shape).copy()
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not np.all(np.isfinite(pg)):
                raise NumericalError(
                    f"non-finite gradient at node {node.uid} (op '{node.op}')")
            acc = adjoint.get(id(parent))
            adjoint[id(parent)] = pg if acc is None else acc + pg
    return [result.get(id(t), np.zeros(t.shape)) for t in wrt]
