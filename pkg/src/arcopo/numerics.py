"""Seeded randomness, a small reverse-mode tape, and a finite-difference oracle.

Everything is float64.  Random draws come from Philox blocks addressed by
``(key, counter)`` where the key is a hash of ``(root_seed, label_path)``, so a
stream can be re-created anywhere from its labels and siblings never interact.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import InvalidArgument, NumericFailure, UnsupportedOperation

_U53 = 2.0**-53


# --------------------------------------------------------------------------
# randomness


@dataclass(frozen=True)
class RngStream:
    """Immutable position in a labelled random stream.

    Drawing returns the values together with the advanced stream; the original
    value is never mutated.
    """

    root_seed: int
    label_path: tuple[str, ...] = ()
    counter: int = 0

    def child(self, *labels: str) -> "RngStream":
        return RngStream(self.root_seed, self.label_path + tuple(labels), 0)

    @property
    def path(self) -> str:
        return "/".join(self.label_path)

    def _key(self) -> np.ndarray:
        h = hashlib.blake2b(digest_size=16)
        h.update(int(self.root_seed).to_bytes(8, "little", signed=True))
        h.update(self.path.encode("utf-8"))
        return np.frombuffer(h.digest(), dtype="<u8").astype(np.uint64)

    def _blocks(self, n: int) -> np.ndarray:
        # one Philox block (4 x uint64) per draw keeps "counter += n" exact
        bitgen = np.random.Philox(key=self._key(), counter=self.counter)
        return bitgen.random_raw(4 * n).reshape(n, 4)

    def advance(self, n: int) -> "RngStream":
        return RngStream(self.root_seed, self.label_path, self.counter + n)


def _unit_open(words: np.ndarray) -> np.ndarray:
    # (0, 1], never 0 so log() below is finite
    return ((words >> np.uint64(11)).astype(np.float64) + 1.0) * _U53


def gaussian(stream: RngStream, n: int) -> tuple[np.ndarray, RngStream]:
    """``n`` standard normal draws (Box-Muller, one block per draw)."""
    if n < 1:
        raise InvalidArgument(f"gaussian needs n >= 1, got {n}")
    b = stream._blocks(n)
    u1 = _unit_open(b[:, 0])
    u2 = _unit_open(b[:, 1])
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
    return z, stream.advance(n)


def uniform(stream: RngStream, n: int) -> tuple[np.ndarray, RngStream]:
    if n < 1:
        raise InvalidArgument(f"uniform needs n >= 1, got {n}")
    b = stream._blocks(n)
    return (b[:, 0] >> np.uint64(11)).astype(np.float64) * _U53, stream.advance(n)


def integers(stream: RngStream, n: int, high: int) -> tuple[np.ndarray, RngStream]:
    """Draws in ``[0, high)``; the modulo bias is below 2**-40 for the sizes used here."""
    if high < 1:
        raise InvalidArgument("high must be >= 1")
    if n < 1:
        raise InvalidArgument(f"integers needs n >= 1, got {n}")
    b = stream._blocks(n)
    return (b[:, 2] % np.uint64(high)).astype(np.int64), stream.advance(n)


def sample_without_replacement(stream: RngStream, population: int, k: int) -> tuple[list[int], RngStream]:
    if not 1 <= k <= population:
        raise InvalidArgument(f"cannot pick {k} of {population}")
    u, stream = uniform(stream, population)
    # sorting i.i.d. uniforms gives a uniform random permutation
    order = np.argsort(u, kind="stable")
    return [int(i) for i in order[:k]], stream


# --------------------------------------------------------------------------
# softmax


def softmax_neg_scaled(distances, tau: float):
    """``exp(-d/tau)`` normalised over the last axis, with max-subtraction.

    Accepts arrays or tape variables.  For arrays the inputs are validated.
    """
    if not tau > 0:
        raise InvalidArgument(f"tau must be positive, got {tau}")
    if isinstance(distances, Var):
        logits = distances * (-1.0 / tau)
        shift = logits.value.max(axis=-1, keepdims=True)
        e = exp(logits - shift)
        return e / e.sum(axis=-1, keepdims=True)
    d = np.asarray(distances, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise InvalidArgument("distances must be finite")
    logits = -d / tau
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_neg_scaled(distances, tau: float):
    """Log of :func:`softmax_neg_scaled`; finite even where the softmax underflows."""
    if not tau > 0:
        raise InvalidArgument(f"tau must be positive, got {tau}")
    if isinstance(distances, Var):
        logits = distances * (-1.0 / tau)
        shift = logits.value.max(axis=-1, keepdims=True)
        z = logits - shift
        return z - log(exp(z).sum(axis=-1, keepdims=True))
    d = np.asarray(distances, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise InvalidArgument("distances must be finite")
    z = -d / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# reverse-mode tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


class Var:
    """A node on the gradient tape wrapping a float64 array."""

    __slots__ = ("value", "parents")
    __array_priority__ = 100.0

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        # parents: sequence of (Var, vector-Jacobian product closure)
        self.parents = parents

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)

    def __repr__(self) -> str:
        return f"Var({self.value!r})"

    # numpy protocol: only the ufuncs the toy model needs are allowed through
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method == "__call__" and not kwargs:
            fn = _UFUNCS.get(ufunc.__name__)
            if fn is not None:
                return fn(*inputs)
        raise UnsupportedOperation(f"'{ufunc.__name__}' is not a supported primitive")

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedOperation(f"'{func.__name__}' is not a supported primitive")

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(o))

    def __rsub__(self, o):
        return add(o, neg(self))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Var):
            return mul(self, reciprocal(o))
        return mul(self, 1.0 / _val(o))

    def __rtruediv__(self, o):
        return mul(o, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        if isinstance(k, Var):
            raise UnsupportedOperation("variable exponents are not supported")
        return power(self, float(k))

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        v = self.value
        shape = v.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return out

        return Var(v[idx], ((self, vjp),))

    @property
    def T(self):
        return Var(self.value.T, ((self, lambda g: g.T),))

    def reshape(self, *shape):
        old = self.value.shape
        return Var(self.value.reshape(*shape), ((self, lambda g: g.reshape(old)),))

    def sum(self, axis=None, keepdims=False):
        shape = self.value.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return Var(self.value.sum(axis=axis, keepdims=keepdims), ((self, vjp),))

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def add(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return _val(a) + _val(b)
    a, b = _lift(a), _lift(b)
    out = a.value + b.value
    return Var(out, ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))))


def neg(a):
    if not isinstance(a, Var):
        return -_val(a)
    return Var(-a.value, ((a, lambda g: -g),))


def mul(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return _val(a) * _val(b)
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    return Var(av * bv, ((a, lambda g: _unbroadcast(g * bv, a.shape)), (b, lambda g: _unbroadcast(g * av, b.shape))))


def reciprocal(a):
    if not isinstance(a, Var):
        return 1.0 / _val(a)
    r = 1.0 / a.value
    return Var(r, ((a, lambda g: -g * r * r),))


def power(a, k: float):
    if not isinstance(a, Var):
        return _val(a) ** k
    v = a.value
    return Var(v**k, ((a, lambda g: g * k * v ** (k - 1.0)),))


def matmul(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return _val(a) @ _val(b)
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise UnsupportedOperation("matmul is supported for 2-D operands only")
    return Var(av @ bv, ((a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)))


def tanh(a):
    if not isinstance(a, Var):
        return np.tanh(_val(a))
    y = np.tanh(a.value)
    return Var(y, ((a, lambda g: g * (1.0 - y * y)),))


def exp(a):
    if not isinstance(a, Var):
        return np.exp(_val(a))
    y = np.exp(a.value)
    return Var(y, ((a, lambda g: g * y),))


def log(a):
    if not isinstance(a, Var):
        return np.log(_val(a))
    v = a.value
    return Var(np.log(v), ((a, lambda g: g / v),))


def minimum(a, b):
    """Elementwise min; ties send the gradient to ``a``."""
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.minimum(_val(a), _val(b))
    a, b = _lift(a), _lift(b)
    take_a = a.value <= b.value
    out = np.where(take_a, a.value, b.value)
    return Var(
        out,
        (
            (a, lambda g: _unbroadcast(np.where(take_a, g, 0.0), a.shape)),
            (b, lambda g: _unbroadcast(np.where(take_a, 0.0, g), b.shape)),
        ),
    )


def clip(a, lo: float, hi: float):
    """Clamp to ``[lo, hi]``; gradient passes only strictly inside or on the bounds."""
    if not isinstance(a, Var):
        return np.clip(_val(a), lo, hi)
    v = a.value
    inside = (v >= lo) & (v <= hi)
    return Var(np.clip(v, lo, hi), ((a, lambda g: np.where(inside, g, 0.0)),))


def concat(parts, axis: int = -1):
    if not any(isinstance(p, Var) for p in parts):
        return np.concatenate([_val(p) for p in parts], axis=axis)
    vs = [_lift(p) for p in parts]
    values = [v.value for v in vs]
    out = np.concatenate(values, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in values])
    parents = []
    for v, lo, hi in zip(vs, bounds[:-1], bounds[1:]):
        sl = [slice(None)] * out.ndim
        sl[ax] = slice(int(lo), int(hi))
        parents.append((v, lambda g, sl=tuple(sl): g[sl]))
    return Var(out, tuple(parents))


def stop_gradient(a):
    return Var(_val(a))


def value_of(x) -> np.ndarray:
    return _val(x)


_UFUNCS = {
    "add": add,
    "subtract": lambda a, b: add(a, neg(b)),
    "multiply": mul,
    "negative": neg,
    "matmul": matmul,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "minimum": minimum,
}


def backward(out: Var) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``out`` keyed by ``id`` of each reachable node."""
    if out.value.size != 1:
        raise InvalidArgument("backward needs a scalar output")
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    grads = {id(out): np.ones_like(out.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            pg = vjp(g)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return grads


Params = Mapping[str, np.ndarray]


def grad(loss_fn: Callable[[dict], object], params: Params) -> dict[str, np.ndarray]:
    """Exact gradient of ``loss_fn(params)`` with respect to every entry of ``params``."""
    leaves = {k: Var(np.array(v, dtype=np.float64)) for k, v in params.items()}
    out = loss_fn(leaves)
    if not isinstance(out, Var):
        return {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
    if not np.all(np.isfinite(out.value)):
        raise NumericFailure("loss is not finite")
    grads = backward(out)
    return {k: grads.get(id(leaf), np.zeros_like(leaf.value)) for k, leaf in leaves.items()}


def finite_diff_grad(loss_fn: Callable[[dict], object], params: Params, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences, one coordinate at a time.  ``loss_fn`` sees plain arrays."""
    if not h > 0:
        raise InvalidArgument("step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def f(p):
        val = float(np.asarray(_val(loss_fn(p))).reshape(()))
        if not math.isfinite(val):
            raise NumericFailure("loss is not finite")
        return val

    out = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(base)
            flat[i] = orig - h
            down = f(base)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        out[name] = g
    return out


def flatten(tree: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(tree[k]) for k in sorted(tree)]) if tree else np.zeros(0)


def relative_error(a, b, floor: float = 1e-8) -> float:
    """``max|a-b| / max(max|a|, max|b|, floor)`` over flattened gradients."""
    a = flatten(a) if isinstance(a, Mapping) else np.ravel(a)
    b = flatten(b) if isinstance(b, Mapping) else np.ravel(b)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)
