"""Small reverse-mode autodiff on top of numpy, plus Adam, dropout and seeded RNG.

Everything is float64. A :class:`Tensor` wraps an ndarray; operations on tensors
that require grad record a closure on the result, and :func:`backward` walks the
recorded graph in reverse topological order.

    >>> w = Tensor(np.eye(2), requires_grad=True)
    >>> loss = affine(Tensor([[1.0, 2.0]]), w, Tensor(np.zeros(2))).sum()
    >>> backward(loss)
    >>> w.grad
    array([[1., 1.],
           [2., 2.]])
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

EPS_CLIP = 1e-7
EPS_NORM = 1e-12
SOFTPLUS_CUTOFF = 30.0


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return mul(tsum(self, axis), 1.0 / n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    # backward_fn(g) returns one gradient (or None) per parent, in order
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return _make(data, (a, b), lambda g: (g, g))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return _make(data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data
    return _make(data, (a, b), lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    keep = x.data > 0
    return _make(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,))


def sigmoid_value(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = sigmoid_value(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def softplus_value(x, beta: float = 1.0):
    """(1/beta)*ln(1+exp(beta*x)), branching at |beta*x| > 30 so beta=500 cannot overflow."""
    z = beta * np.asarray(x, dtype=np.float64)
    mid = np.log1p(np.exp(np.clip(z, -SOFTPLUS_CUTOFF, SOFTPLUS_CUTOFF)))
    small = np.exp(np.minimum(z, 0.0))
    out = np.where(z > SOFTPLUS_CUTOFF, z, np.where(z < -SOFTPLUS_CUTOFF, small, mid)) / beta
    return float(out) if out.ndim == 0 else out


def softplus(x, beta: float = 1.0) -> Tensor:
    x = as_tensor(x)
    val = np.asarray(softplus_value(x.data, beta), dtype=np.float64)
    slope = sigmoid_value(beta * x.data)
    return _make(val, (x,), lambda g: (g * slope,))


def softmax_value(x, axis=-1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    s = softmax_value(x.data, axis)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape} do not conform")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None, a.data.T @ g if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), bw)


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (B, I), ``weight`` (I, O), ``bias`` (O,)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise DimensionError("affine expects input[B,I], weight[I,O], bias[O]")
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise DimensionError(f"affine shapes {x.shape}, {weight.shape}, {bias.shape} do not conform")

    def bw(g):
        return (
            g @ weight.data.T if x.requires_grad else None,
            x.data.T @ g if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return _make(x.data @ weight.data + bias.data, (x, weight, bias), bw)


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape),)

    return _make(x.data.sum(axis=axis), (x,), bw)


# -------------------------------------------------------------------- losses


def binary_cross_entropy(p, y, reduction: str = "mean") -> Tensor:
    """Two-term BCE on probabilities clamped to [EPS_CLIP, 1 - EPS_CLIP].

    Entries outside the clamp range pass no gradient.
    """
    p = as_tensor(p)
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), p.data.shape)
    pc = np.clip(p.data, EPS_CLIP, 1.0 - EPS_CLIP)
    inside = (p.data >= EPS_CLIP) & (p.data <= 1.0 - EPS_CLIP)
    elem = -y * np.log(pc) - (1.0 - y) * np.log1p(-pc)
    dp = np.where(inside, -y / pc + (1.0 - y) / (1.0 - pc), 0.0)

    if reduction == "none":
        return _make(elem, (p,), lambda g: (g * dp,))
    if reduction == "sum":
        return _make(elem.sum(), (p,), lambda g: (g * dp,))
    if reduction == "mean":
        n = elem.size
        return _make(elem.sum() / n, (p,), lambda g: (g * dp / n,))
    raise ContractError(f"unknown reduction {reduction!r}")


def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity along the last axis (1-D -> scalar, 2-D -> per row).

    A row where either norm is <= EPS_NORM is degenerate: similarity 0, no gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine operands differ in shape: {a.shape} vs {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    ok = (na > EPS_NORM) & (nb > EPS_NORM)
    if not np.all(ok):
        logger.warning("cosine similarity: %d degenerate zero-norm row(s)", int(np.size(ok) - np.count_nonzero(ok)))
    na = np.where(ok, na, 1.0)[..., None]
    nb = np.where(ok, nb, 1.0)[..., None]
    cos = np.where(ok, (a.data * b.data).sum(axis=-1) / (na * nb)[..., 0], 0.0)

    def bw(g):
        g = np.where(ok, g, 0.0)[..., None]
        c = cos[..., None]
        ga = g * (b.data / (na * nb) - c * a.data / (na * na)) if a.requires_grad else None
        gb = g * (a.data / (na * nb) - c * b.data / (nb * nb)) if b.requires_grad else None
        return ga, gb

    return _make(cos, (a, b), bw)


# ------------------------------------------------------------------ backward


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    The recorded graph is dropped afterwards, so each forward pass supports one
    backward call.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node._parents if p.requires_grad and id(p) not in seen)

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg, dtype=np.float64), parent.data.shape)
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    for node in order:
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> AdamState:
        return AdamState(
            self.lr, self.beta1, self.beta2, self.eps, self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step,
            "m": {k: a.tolist() for k, a in sorted(self.m.items())},
            "v": {k: a.tolist() for k, a in sorted(self.v.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> AdamState:
        return cls(
            d["lr"], d["beta1"], d["beta2"], d["eps"], d["step"],
            {k: np.asarray(a, dtype=np.float64) for k, a in d["m"].items()},
            {k: np.asarray(a, dtype=np.float64) for k, a in d["v"].items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float | None = None) -> dict:
    """One bias-corrected Adam update, in place on the arrays in ``params``.

    ``params`` and ``grads`` map parameter names to ndarrays. Parameters missing
    from ``grads`` are left alone (their moments are not advanced either).
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


# ----------------------------------------------------------------- randomness


@dataclass
class RngStream:
    """Counter-addressed random stream.

    Each :meth:`generator` call hands out a fresh ``numpy.random.Generator``
    keyed on ``(seed, counter)`` and bumps the counter, so any draw can be
    replayed from the pair alone. PCG64 + SeedSequence output is stable across
    platforms.
    """

    seed: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.counter])))
        self.counter += 1
        return g

    def child(self, *tags) -> RngStream:
        """Independent stream named by ``tags``; does not advance this one."""
        words = [self.seed, self.counter] + [_tag_word(t) for t in tags]
        derived = np.random.SeedSequence(words).generate_state(2, np.uint64)
        return RngStream(int(derived[0]) ^ (int(derived[1]) >> 1))


def _tag_word(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(tag).encode())


def dropout_mask(shape, rate: float, rng: RngStream | np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    keep = gen.random(shape) >= rate
    return keep / (1.0 - rate)
