"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every operation as a node holding the op kind, the
ids of its parents, its forward value and any static attributes. Nodes are
appended in evaluation order, so parent ids always precede the child and a
single reverse sweep in :func:`backward` yields exact adjoints.

Broadcasting follows numpy (trailing dimensions aligned, size-1 or missing
axes stretched). Adjoints of broadcast operands are summed back to the
operand's shape.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy import special

__all__ = [
    "ContractError",
    "GradCheckFailure",
    "Tape",
    "Var",
    "backward",
    "grad_check",
    "OP_KINDS",
]


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


class GradCheckFailure(ArithmeticError):
    def __init__(self, index: int, message: str):
        super().__init__(f"coordinate {index}: {message}")
        self.index = index


def _as_array(x) -> np.ndarray:
    a = np.array(x, dtype=np.float64)
    a.flags.writeable = False
    return a


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2) if a.ndim >= 2 else a


def _log1pexp(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _expand_reduced(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(in_shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, in_shape)


def _reduced_count(in_shape, axis):
    if axis is None:
        return int(np.prod(in_shape))
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([in_shape[a] for a in axes]))


def _matmul_vjp(g, vals, out, attrs):
    a, b = vals
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 1:
        ga = np.matmul(b, g[..., None])[..., 0] if b.ndim > 2 else b @ g
        gb = np.multiply.outer(a, g) if b.ndim == 2 else a[:, None] * g[..., None, :]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    if b.ndim == 1:
        ga = g[..., :, None] * b
        gb = np.matmul(_swap(a), g[..., None])[..., 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    ga = np.matmul(g, _swap(b))
    gb = np.matmul(_swap(a), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _log_ndtr_vjp(g, vals, out, attrs):
    (x,) = vals
    # d/dx log Phi(x) = pdf(x) / Phi(x), evaluated in log space for x << 0
    ratio = np.exp(-0.5 * x * x - 0.5 * np.log(2 * np.pi) - out)
    return (g * ratio,)


# kind -> (forward(values, **attrs), vjp(g, values, out, attrs) -> grads)
_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda v: v[0] + v[1],
            lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape))),
    "subtract": (lambda v: v[0] - v[1],
                 lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape))),
    "multiply": (lambda v: v[0] * v[1],
                 lambda g, v, o, a: (_unbroadcast(g * v[1], v[0].shape),
                                     _unbroadcast(g * v[0], v[1].shape))),
    "divide": (lambda v: v[0] / v[1],
               lambda g, v, o, a: (_unbroadcast(g / v[1], v[0].shape),
                                   _unbroadcast(-g * o / v[1], v[1].shape))),
    "matmul": (lambda v: np.matmul(v[0], v[1]), _matmul_vjp),
    "transpose": (lambda v: _swap(v[0]), lambda g, v, o, a: (_swap(g),)),
    "broadcast": (lambda v, shape: np.broadcast_to(v[0], shape).copy(),
                  lambda g, v, o, a: (_unbroadcast(g, v[0].shape),)),
    "reshape": (lambda v, shape: v[0].reshape(shape),
                lambda g, v, o, a: (g.reshape(v[0].shape),)),
    "sum": (lambda v, axis=None, keepdims=False: np.sum(v[0], axis=axis, keepdims=keepdims),
            lambda g, v, o, a: (_expand_reduced(g, v[0].shape, a.get("axis"), a.get("keepdims", False)),)),
    "mean": (lambda v, axis=None, keepdims=False: np.mean(v[0], axis=axis, keepdims=keepdims),
             lambda g, v, o, a: (_expand_reduced(g, v[0].shape, a.get("axis"), a.get("keepdims", False))
                                 / _reduced_count(v[0].shape, a.get("axis")),)),
    "tanh": (lambda v: np.tanh(v[0]), lambda g, v, o, a: (g * (1.0 - o * o),)),
    "cos": (lambda v: np.cos(v[0]), lambda g, v, o, a: (-g * np.sin(v[0]),)),
    "exp": (lambda v: np.exp(v[0]), lambda g, v, o, a: (g * o,)),
    "log": (lambda v: np.log(v[0]), lambda g, v, o, a: (g / v[0],)),
    "square": (lambda v: v[0] * v[0], lambda g, v, o, a: (2.0 * g * v[0],)),
    "sqrt": (lambda v: np.sqrt(v[0]), lambda g, v, o, a: (0.5 * g / o,)),
    "negate": (lambda v: -v[0], lambda g, v, o, a: (-g,)),
    "scale": (lambda v, factor: factor * v[0], lambda g, v, o, a: (a["factor"] * g,)),
    "softplus": (lambda v: _log1pexp(v[0]), lambda g, v, o, a: (g * special.expit(v[0]),)),
    "tril": (lambda v, k=0: np.tril(v[0], k), lambda g, v, o, a: (np.tril(g, a.get("k", 0)),)),
    "log_ndtr": (lambda v: special.log_ndtr(v[0]), _log_ndtr_vjp),
    "logsumexp": (lambda v, axis: special.logsumexp(v[0], axis=axis),
                  lambda g, v, o, a: (np.expand_dims(g, a["axis"])
                                      * np.exp(v[0] - np.expand_dims(o, a["axis"])),)),
    "getitem": (lambda v, index: v[0][index],
                lambda g, v, o, a: (_scatter(g, v[0].shape, a["index"]),)),
    "concat": (lambda v, axis: np.concatenate(v, axis=axis),
               lambda g, v, o, a: tuple(np.split(g, np.cumsum([x.shape[a["axis"]] for x in v])[:-1],
                                                 axis=a["axis"]))),
}


def _scatter(g, shape, index):
    out = np.zeros(shape)
    np.add.at(out, index, g)
    return out


OP_KINDS = frozenset(["leaf", *_OPS])


@dataclass
class Node:
    kind: str
    parents: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)


class Tape:
    """Ordered record of the operations behind one objective evaluation."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> "Var":
        self.nodes.append(Node("leaf", (), _as_array(value)))
        return Var(self, len(self.nodes) - 1)

    const = leaf

    def record(self, kind: str, parents, forward_value=None, **attrs) -> int:
        """Append an op node; computes the forward value unless one is given."""
        if kind not in _OPS:
            raise ContractError(f"unknown op kind {kind!r}")
        ids = tuple(p.id if isinstance(p, Var) else int(p) for p in parents)
        n = len(self.nodes)
        if any(i < 0 or i >= n for i in ids):
            raise ContractError(f"parents {ids} not on tape of length {n}")
        if forward_value is None:
            forward_value = _OPS[kind][0]([self.nodes[i].value for i in ids], **attrs)
        self.nodes.append(Node(kind, ids, _as_array(forward_value), attrs))
        return n

    def lift(self, x) -> "Var":
        if isinstance(x, Var):
            if x.tape is not self:
                raise ContractError("operands recorded on different tapes")
            return x
        return self.leaf(x)

    def replay(self, leaf_values: dict[int, Any]) -> list[np.ndarray]:
        """Re-run every recorded op with some leaves replaced; returns all values."""
        values: list[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if node.kind == "leaf":
                values.append(_as_array(leaf_values[i]) if i in leaf_values else node.value)
            else:
                fwd = _OPS[node.kind][0]
                values.append(_as_array(fwd([values[j] for j in node.parents], **node.attrs)))
        return values


def tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands recorded on different tapes")
    return tape if tape is not None else Tape()


def differentiable(fn):
    """Let ``fn`` accept plain arrays: results are unwrapped when no input is a Var."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        out = fn(*args, **kwargs)
        if _contains_var(args) or _contains_var(tuple(kwargs.values())):
            return out
        return _unwrap(out)

    return wrapper


def _contains_var(items) -> bool:
    for x in items:
        if isinstance(x, Var):
            return True
        if isinstance(x, (tuple, list)) and _contains_var(x):
            return True
        if isinstance(x, dict) and _contains_var(tuple(x.values())):
            return True
        if hasattr(x, "__dataclass_fields__") and _contains_var(tuple(vars(x).values())):
            return True
    return False


def _unwrap(out):
    if isinstance(out, Var):
        return out.value
    if isinstance(out, tuple):
        return type(out)(*(_unwrap(o) for o in out)) if hasattr(out, "_fields") else tuple(
            _unwrap(o) for o in out)
    if hasattr(out, "__dataclass_fields__"):
        return type(out)(**{k: _unwrap(v) for k, v in vars(out).items()})
    return out


class Var:
    """Handle to a node on a tape, with numpy-style operator overloads."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

    def _op(self, kind, *others, **attrs) -> "Var":
        parents = [self] + [self.tape.lift(o) for o in others]
        return Var(self.tape, self.tape.record(kind, parents, **attrs))

    def _rop(self, kind, other) -> "Var":
        return self.tape.lift(other)._op(kind, self)

    __add__ = lambda self, o: self._op("add", o)
    __radd__ = lambda self, o: self._rop("add", o)
    __sub__ = lambda self, o: self._op("subtract", o)
    __rsub__ = lambda self, o: self._rop("subtract", o)
    __mul__ = lambda self, o: self.scale(o) if np.isscalar(o) else self._op("multiply", o)
    __rmul__ = lambda self, o: self.scale(o) if np.isscalar(o) else self._rop("multiply", o)
    __truediv__ = lambda self, o: self.scale(1.0 / o) if np.isscalar(o) else self._op("divide", o)
    __rtruediv__ = lambda self, o: self._rop("divide", o)
    __matmul__ = lambda self, o: self._op("matmul", o)
    __rmatmul__ = lambda self, o: self._rop("matmul", o)
    __neg__ = lambda self: self._op("negate")
    __getitem__ = lambda self, index: self._op("getitem", index=index)

    @property
    def T(self) -> "Var":
        return self._op("transpose")

    def scale(self, factor: float) -> "Var":
        return self._op("scale", factor=float(factor))

    def sum(self, axis=None, keepdims=False) -> "Var":
        return self._op("sum", axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Var":
        return self._op("mean", axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Var":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self._op("reshape", shape=tuple(shape))

    def broadcast_to(self, shape) -> "Var":
        return self._op("broadcast", shape=tuple(shape))


def _unary(kind):
    def f(x, **attrs):
        if not isinstance(x, Var):
            x = Tape().leaf(x)
        return x._op(kind, **attrs)

    f.__name__ = kind
    return f


tanh = _unary("tanh")
cos = _unary("cos")
exp = _unary("exp")
log = _unary("log")
square = _unary("square")
sqrt = _unary("sqrt")
softplus = _unary("softplus")
log_ndtr = _unary("log_ndtr")


def tril(x: Var, k: int = 0) -> Var:
    return x._op("tril", k=k)


def logsumexp(x: Var, axis: int) -> Var:
    return x._op("logsumexp", axis=axis)


def concat(xs, axis: int = 0) -> Var:
    tape = tape_of(*xs)
    vs = [tape.lift(x) for x in xs]
    return Var(tape, tape.record("concat", vs, axis=axis))


def backward(tape: Tape, seed: Var | int, wrt=None) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar seed.

    Returns adjoints keyed by node id. With ``wrt`` (an iterable of Vars or ids)
    only those nodes are returned; otherwise every node on the tape is, with
    zeros for nodes the seed does not depend on.
    """
    sid = seed.id if isinstance(seed, Var) else int(seed)
    nodes = tape.nodes
    if nodes[sid].value.size != 1:
        raise ContractError(f"seed must be scalar, got shape {nodes[sid].value.shape}")
    adj: list[np.ndarray | None] = [None] * len(nodes)
    adj[sid] = np.ones_like(nodes[sid].value)
    for i in range(sid, -1, -1):
        g = adj[i]
        node = nodes[i]
        if g is None or node.kind == "leaf":
            continue
        vals = [nodes[j].value for j in node.parents]
        grads = _OPS[node.kind][1](g, vals, node.value, node.attrs)
        for j, gj in zip(node.parents, grads):
            gj = np.asarray(gj, dtype=np.float64)
            if gj.shape != nodes[j].value.shape:
                gj = np.broadcast_to(gj, nodes[j].value.shape)
            adj[j] = gj.copy() if adj[j] is None else adj[j] + gj
    ids = range(len(nodes)) if wrt is None else [w.id if isinstance(w, Var) else int(w) for w in wrt]
    return {i: (adj[i] if adj[i] is not None else np.zeros_like(nodes[i].value)) for i in ids}


def grad_check(fn: Callable[[Var], Var], point, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(point)
    y = fn(x)
    if not np.all(np.isfinite(y.value)):
        raise GradCheckFailure(-1, "non-finite value at the base point")
    analytic = backward(tape, y, wrt=[x])[x.id].ravel()

    def value_at(p):
        return float(np.sum(fn(Tape().leaf(p)).value))

    worst = 0.0
    flat = point.ravel()
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += step
        dn[i] -= step
        fu, fd = value_at(up.reshape(point.shape)), value_at(dn.reshape(point.shape))
        if not (np.isfinite(fu) and np.isfinite(fd)):
            raise GradCheckFailure(i, "non-finite value in the difference stencil")
        numeric = (fu - fd) / (2 * step)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return worst
