"""Dense float64 arrays with a reverse-mode tape, plus Adam.

Every op here produces a new ``Tensor`` and, when any input requires a
gradient, records a closure mapping the output gradient to input gradients.
``backward`` walks the recorded graph in reverse topological order and
returns gradients for whichever nodes were asked for, so graphs are never
mutated and can be built and differentiated independently on separate
workers.

Randomness goes through :func:`make_rng`, which is numpy's PCG64 bit
generator keyed by ``SeedSequence(seed, spawn_key=stream ids)``.  PCG64 is
specified bit-for-bit and portable across platforms.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def make_rng(seed: int, *stream: str | int) -> np.random.Generator:
    """PCG64 generator for ``seed`` on an independent named sub-stream."""
    key = tuple(s if isinstance(s, int) else zlib.crc32(s.encode()) for s in stream)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


class Tensor:
    __slots__ = ("data", "parents", "grad_fn", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 parents: tuple = (), grad_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents = parents
        self.grad_fn = grad_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], grad_fn) -> Tensor:
    _check(data, op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), grad_fn=grad_fn, name=op)
    return Tensor(data, name=op)


# ---------------------------------------------------------------------------
# graph


@dataclass
class CompGraph:
    """Nodes reachable from a root, in topological order (inputs first)."""

    nodes: list[Tensor]
    params: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "CompGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        params = [n for n in order if n.grad_fn is None]
        return cls(order, params)


def backward(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    ``wrt`` may contain leaves or intermediate nodes.  Tensors the loss does
    not depend on get zero gradients.
    """
    wrt = list(wrt)
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        graph = CompGraph.from_root(loss)
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(graph.nodes):
            g = grads.get(id(node))
            if g is None or node.grad_fn is None:
                continue
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b) -> Tensor:
    """Same-shape addition, or bias addition along the trailing axis."""
    b = as_tensor(b)
    if a.shape != b.shape:
        if b.data.ndim != 1 or a.shape[-1:] != b.shape:
            raise ValueError(f"add: shapes {a.shape} and {b.shape} are not bias-compatible")
        lead = tuple(range(a.data.ndim - 1))
        return _make(a.data + b.data, "add", (a, b), lambda g: (g, g.sum(axis=lead)))
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product.

    ``b`` may be a python scalar or a constant array broadcastable to ``a``
    (used for masks), or a Tensor of the same shape or a trailing-axis gain.
    """
    if not isinstance(b, Tensor):
        c = b if np.isscalar(b) else np.asarray(b, dtype=DTYPE)
        out = a.data * c
        if out.shape != a.shape:
            raise ValueError("mul: constant operand must broadcast to the tensor shape")
        return _make(out, "scale", (a,), lambda g: (g * c,))
    if a.shape != b.shape:
        if b.data.ndim != 1 or a.shape[-1:] != b.shape:
            raise ValueError(f"mul: shapes {a.shape} and {b.shape} are not gain-compatible")
        lead = tuple(range(a.data.ndim - 1))
        return _make(a.data * b.data, "mul", (a, b),
                     lambda g: (g * b.data, (g * a.data).sum(axis=lead)))
    return _make(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy batching; a 2-D ``b`` is shared across batch dims."""
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "matmul", (a, b), grad_fn)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def sum_(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), grad_fn)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis), 1.0 / float(n))


def mean_pool(a: Tensor) -> Tensor:
    """Average over the sequence axis of a (batch, seq, d) tensor."""
    return mean(a, axis=1)


def index(a: Tensor, key) -> Tensor:
    """Basic/advanced indexing; repeated indices accumulate in the gradient."""
    out = a.data[key]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out), "index", (a,), grad_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], "embedding", (table,), grad_fn)


# ---------------------------------------------------------------------------
# normalisation, softmax, attention


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def grad_fn(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (a,), grad_fn)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, "layer_norm", (a, gain, bias), grad_fn)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Unmasked softmax(q k^T / sqrt(dh)) v over (..., seq, dh) inputs."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    s = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    w = np.exp(s)
    w /= w.sum(axis=-1, keepdims=True)
    out = np.matmul(w, v.data)

    def grad_fn(g):
        gv = np.matmul(np.swapaxes(w, -1, -2), g)
        gw = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * scale
        gq = np.matmul(gs, k.data)
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data)
        return gq, gk, gv

    return _make(out, "attention", (q, k, v), grad_fn)


# ---------------------------------------------------------------------------
# batched losses (graph level)


def batch_cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean (or weighted-sum) cross-entropy over a (batch, classes) tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError("label out of range")
    lp = log_softmax(logits)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=DTYPE)
    picked = index(lp, (np.arange(n), labels))
    return neg(sum_(mul(picked, Tensor(w))))


def batch_soft_cross_entropy(logits: Tensor, target_probs: np.ndarray) -> Tensor:
    """Mean over the batch of -sum_k p_k log softmax(logits)_k."""
    n = logits.shape[0]
    lp = log_softmax(logits)
    return neg(mul(sum_(mul(lp, Tensor(target_probs))), 1.0 / n))


# ---------------------------------------------------------------------------
# value-level helpers on plain vectors


def softmax_temp(logits, tau: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    if not np.isfinite(z).all():
        raise NonFiniteError("softmax_temp: non-finite logits")
    if not tau > 0:
        raise ValueError("softmax_temp: tau must be positive")
    z = z / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_vec(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, label: int) -> float:
    z = np.asarray(logits, dtype=DTYPE)
    if not 0 <= label < z.shape[-1]:
        raise ValueError(f"label {label} out of range for {z.shape[-1]} classes")
    return float(-log_softmax_vec(z)[label])


def kl_div(p, q) -> float:
    p = np.asarray(p, dtype=DTYPE)
    q = np.asarray(q, dtype=DTYPE)
    if p.shape != q.shape:
        raise ValueError("kl_div: shape mismatch")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("kl_div: inputs must sum to 1")
    support = p > 0
    if np.any(q[support] <= 0):
        raise ValueError("kl_div: q must be positive wherever p is")
    if np.array_equal(p, q):
        return 0.0
    return max(float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support])))), 0.0)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Sequence[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, lr, beta1, beta2, eps)


def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_update: parameter/gradient/state counts differ")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"adam_update: shape mismatch {p.shape} vs {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)
