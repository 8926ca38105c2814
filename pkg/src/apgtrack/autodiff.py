"""Tape-based reverse-mode automatic differentiation on dense float64 arrays.

Every primitive is evaluated eagerly and appended to a :class:`Tape`. A
backward sweep over the tape (in reverse recording order) accumulates
adjoints with the chain rule.

The module-level functions (``tanh``, ``concat``, ``matvec`` ...) accept
either plain numpy arrays or :class:`Var` handles. With plain arrays they
run straight through numpy and nothing is recorded, so the same dynamics
and policy code serves both the differentiated training path and the fast
evaluation path.

Example::

    tape = Tape()
    x = tape.variable(3.0)
    loss = x * x
    grads = tape.backward(loss)
    grads[x.id]  # -> 6.0
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class InvalidOperationError(ValueError):
    """Unknown primitive or malformed primitive arguments."""


class ShapeError(ValueError):
    """Loss is not a scalar, or operand shapes are incompatible."""


class DivergedGradientError(FloatingPointError):
    """A non-finite adjoint appeared during the reverse sweep."""

    def __init__(self, node_id: int, op_kind: str):
        super().__init__(f"non-finite adjoint at node {node_id} ({op_kind})")
        self.node_id = node_id
        self.op_kind = op_kind


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(Ellipsis), type(None))) for i in items)


def _getitem_vjp(g, out, a, index):
    z = np.zeros_like(a)
    if _is_basic_index(index):
        z[index] += g
    else:
        np.add.at(z, index, g)
    return z


def _sum_vjp(g, out, a, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


def _matvec_fwd(m, x):
    if m.ndim == 2:
        return x @ m.T
    return np.einsum("...ij,...j->...i", m, x)


def _matvec_vjp_m(g, out, m, x):
    if m.ndim == 2:
        return g.reshape(-1, m.shape[0]).T @ x.reshape(-1, m.shape[1])
    return g[..., :, None] * x[..., None, :]


def _matvec_vjp_x(g, out, m, x):
    if m.ndim == 2:
        return g @ m
    return np.einsum("...ij,...i->...j", m, g)


def _split_vjp(i):
    def vjp(g, out, *parts, axis=0):
        offsets = np.cumsum([0] + [p.shape[axis] for p in parts])
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        return g[tuple(sl)]
    return vjp


def _unstack_vjp(i):
    def vjp(g, out, *parts, axis=0):
        return np.take(g, i, axis=axis)
    return vjp


# kind -> (forward(*values, **attrs), vjp(g, out, *values, **attrs) per parent)
# Variadic kinds (concat, stack) build their vjps per arity.
_OPS: dict[str, tuple[Callable, tuple[Callable, ...] | None]] = {
    "add": (np.add, (lambda g, o, a, b: g, lambda g, o, a, b: g)),
    "sub": (np.subtract, (lambda g, o, a, b: g, lambda g, o, a, b: -g)),
    "mul": (np.multiply, (lambda g, o, a, b: g * b, lambda g, o, a, b: g * a)),
    "div": (np.divide, (lambda g, o, a, b: g / b, lambda g, o, a, b: -g * o / b)),
    "neg": (np.negative, (lambda g, o, a: -g,)),
    "sin": (np.sin, (lambda g, o, a: g * np.cos(a),)),
    "cos": (np.cos, (lambda g, o, a: -g * np.sin(a),)),
    "tanh": (np.tanh, (lambda g, o, a: g * (1.0 - o * o),)),
    "sigmoid": (expit, (lambda g, o, a: g * o * (1.0 - o),)),
    "exp": (np.exp, (lambda g, o, a: g * o,)),
    "log": (np.log, (lambda g, o, a: g / a,)),
    "arctan": (np.arctan, (lambda g, o, a: g / (1.0 + a * a),)),
    "arcsin": (np.arcsin, (lambda g, o, a: g / np.sqrt(1.0 - a * a),)),
    "power": (
        lambda a, exponent: np.power(a, exponent),
        (lambda g, o, a, exponent: g * exponent * np.power(a, exponent - 1.0),),
    ),
    "sum": (
        lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
        (_sum_vjp,),
    ),
    "dot": (
        lambda a, b: np.sum(a * b, axis=-1),
        (lambda g, o, a, b: g[..., None] * b, lambda g, o, a, b: g[..., None] * a),
    ),
    "matvec": (_matvec_fwd, (_matvec_vjp_m, _matvec_vjp_x)),
    "matmul": (
        np.matmul,
        (
            lambda g, o, a, b: g @ np.swapaxes(b, -1, -2),
            lambda g, o, a, b: np.swapaxes(a, -1, -2) @ g,
        ),
    ),
    # gradient is zero wherever the clamp is active (no straight-through)
    "clamp": (
        lambda a, lo, hi: np.clip(a, lo, hi),
        (lambda g, o, a, lo, hi: g * ((a > lo) & (a < hi)),),
    ),
    "select": (
        lambda a, b, cond: np.where(cond, a, b),
        (lambda g, o, a, b, cond: g * cond, lambda g, o, a, b, cond: g * ~cond),
    ),
    "getitem": (lambda a, index: a[index], (_getitem_vjp,)),
    "reshape": (
        lambda a, shape: np.reshape(a, shape),
        (lambda g, o, a, shape: g.reshape(a.shape),),
    ),
    "swapaxes": (
        lambda a, axis1, axis2: np.swapaxes(a, axis1, axis2),
        (lambda g, o, a, axis1, axis2: np.swapaxes(g, axis1, axis2),),
    ),
    "concat": (lambda *parts, axis=0: np.concatenate(parts, axis=axis), None),
    "stack": (lambda *parts, axis=0: np.stack(parts, axis=axis), None),
    "variable": (None, ()),
    "const": (None, ()),
}

OP_KINDS = frozenset(_OPS)


@dataclass(eq=False)
class TapeNode:
    op_kind: str
    parent_ids: tuple[int, ...]
    local_partials: tuple[Callable[[np.ndarray], np.ndarray], ...]
    value: np.ndarray


@dataclass(eq=False)
class Tape:
    """Append-only record of primitive evaluations.

    A tape is owned by one rollout; it is never mutated by :meth:`backward`,
    so several backward sweeps from different scalar nodes may share it.
    """

    nodes: list[TapeNode] = field(default_factory=list)
    variable_ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def _leaf(self, kind: str, value) -> Var:
        value = np.array(value, dtype=np.float64)
        self.nodes.append(TapeNode(kind, (), (), value))
        return Var(self, len(self.nodes) - 1)

    def variable(self, value) -> Var:
        """Add a differentiation root."""
        v = self._leaf("variable", value)
        self.variable_ids.append(v.id)
        return v

    def constant(self, value) -> Var:
        return self._leaf("const", value)

    def record(self, op_kind: str, parents: Sequence[int], **attrs) -> int:
        """Evaluate ``op_kind`` on the parent nodes and append the result."""
        try:
            forward, vjps = _OPS[op_kind]
        except KeyError:
            raise InvalidOperationError(f"unknown op kind {op_kind!r}") from None
        if forward is None:
            raise InvalidOperationError(f"{op_kind!r} is a leaf kind; use variable()/constant()")
        parents = tuple(int(p) for p in parents)
        n = len(self.nodes)
        if any(p < 0 or p >= n for p in parents):
            raise InvalidOperationError("parents must already be on the tape")
        vals = [self.nodes[p].value for p in parents]
        if vjps is None:
            maker = _split_vjp if op_kind == "concat" else _unstack_vjp
            vjps = tuple(maker(i) for i in range(len(parents)))
        elif len(vjps) != len(parents):
            raise InvalidOperationError(
                f"{op_kind!r} takes {len(vjps)} parents, got {len(parents)}"
            )
        out = np.asarray(forward(*vals, **attrs), dtype=np.float64)
        partials = tuple(_bind(vjp, out, vals, attrs) for vjp in vjps)
        self.nodes.append(TapeNode(op_kind, parents, partials, out))
        return n

    def backward(self, loss, check_finite: bool = True) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar node.

        Returns the adjoint of every variable node keyed by node id;
        variables the loss does not depend on get zeros.
        """
        loss_id = loss.id if isinstance(loss, Var) else int(loss)
        root = self.nodes[loss_id].value
        if root.size != 1:
            raise ShapeError(f"loss node must be scalar, got shape {root.shape}")
        adj: list[np.ndarray | None] = [None] * (loss_id + 1)
        adj[loss_id] = np.ones_like(root)
        nodes = self.nodes
        for i in range(loss_id, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = nodes[i]
            if not node.parent_ids:
                continue
            if check_finite and not np.isfinite(g).all():
                raise DivergedGradientError(i, node.op_kind)
            for pid, vjp in zip(node.parent_ids, node.local_partials):
                c = _unbroadcast(np.asarray(vjp(g)), nodes[pid].value.shape)
                adj[pid] = c if adj[pid] is None else adj[pid] + c
        grads = {}
        for vid in self.variable_ids:
            g = adj[vid] if vid <= loss_id else None
            if g is None:
                g = np.zeros_like(nodes[vid].value)
            elif check_finite and not np.isfinite(g).all():
                raise DivergedGradientError(vid, "variable")
            grads[vid] = g
        return grads


def _bind(vjp, out, vals, attrs):
    return lambda g: vjp(g, out, *vals, **attrs)


class Var:
    """Handle to a node on a tape, with numpy-style operators."""

    __slots__ = ("tape", "id")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape})"

    def __len__(self) -> int:
        return len(self.value)

    def __add__(self, other):
        return _binary("add", self, other)

    def __radd__(self, other):
        return _binary("add", other, self)

    def __sub__(self, other):
        return _binary("sub", self, other)

    def __rsub__(self, other):
        return _binary("sub", other, self)

    def __mul__(self, other):
        return _binary("mul", self, other)

    def __rmul__(self, other):
        return _binary("mul", other, self)

    def __truediv__(self, other):
        return _binary("div", self, other)

    def __rtruediv__(self, other):
        return _binary("div", other, self)

    def __neg__(self):
        return _unary("neg", self)

    def __pow__(self, exponent):
        if isinstance(exponent, Var):
            raise InvalidOperationError("power exponent must be a constant")
        return _unary("power", self, exponent=float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _unary("getitem", self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _unary("reshape", self, shape=shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


Array = "np.ndarray | Var"


def _find_tape(args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _lift(tape: Tape, x) -> int:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise InvalidOperationError("operands live on different tapes")
        return x.id
    return tape.constant(x).id


def _binary(kind: str, a, b):
    tape = _find_tape((a, b))
    return Var(tape, tape.record(kind, (_lift(tape, a), _lift(tape, b))))


def _unary(kind: str, a: Var, **attrs):
    return Var(a.tape, a.tape.record(kind, (a.id,), **attrs))


def _elementwise(kind: str, numpy_fn):
    def fn(x):
        if isinstance(x, Var):
            return _unary(kind, x)
        return numpy_fn(x)
    fn.__name__ = kind
    return fn


sin = _elementwise("sin", np.sin)
cos = _elementwise("cos", np.cos)
tanh = _elementwise("tanh", np.tanh)
sigmoid = _elementwise("sigmoid", expit)
exp = _elementwise("exp", np.exp)
log = _elementwise("log", np.log)
arctan = _elementwise("arctan", np.arctan)
arcsin = _elementwise("arcsin", np.arcsin)


def sqrt(x):
    return x ** 0.5 if isinstance(x, Var) else np.sqrt(x)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if isinstance(x, Var):
        return _unary("sum", x, axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def dot(a, b):
    """Inner product over the last axis."""
    if isinstance(a, Var) or isinstance(b, Var):
        return _binary("dot", a, b)
    return np.sum(a * b, axis=-1)


def matvec(m, x):
    """``m @ x`` over the last axis of ``x``; a 2-D ``m`` is shared across the batch."""
    if isinstance(m, Var) or isinstance(x, Var):
        return _binary("matvec", m, x)
    return _matvec_fwd(np.asarray(m), np.asarray(x))


def matmul(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        return _binary("matmul", a, b)
    return np.matmul(a, b)


def clamp(x, lo: float, hi: float):
    if isinstance(x, Var):
        return _unary("clamp", x, lo=lo, hi=hi)
    return np.clip(x, lo, hi)


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    tape = _find_tape((a, b))
    if tape is None:
        return np.where(cond, a, b)
    return Var(tape, tape.record("select", (_lift(tape, a), _lift(tape, b)), cond=cond))


def reshape(x, shape):
    if isinstance(x, Var):
        return x.reshape(shape)
    return np.reshape(x, shape)


def swapaxes(x, axis1: int, axis2: int):
    if isinstance(x, Var):
        return _unary("swapaxes", x, axis1=axis1, axis2=axis2)
    return np.swapaxes(x, axis1, axis2)


def _variadic(kind: str, parts, axis: int):
    tape = _find_tape(parts)
    if tape is None:
        fn = np.concatenate if kind == "concat" else np.stack
        return fn([np.asarray(p, dtype=np.float64) for p in parts], axis=axis)
    ids = tuple(_lift(tape, p) for p in parts)
    return Var(tape, tape.record(kind, ids, axis=axis))


def concat(parts, axis: int = -1):
    return _variadic("concat", list(parts), axis)


def stack(parts, axis: int = -1):
    return _variadic("stack", list(parts), axis)


def norm(x, eps: float = 0.0):
    """Euclidean norm over the last axis."""
    return sqrt(dot(x, x) + eps)


def cross(a, b):
    """Cross product of 3-vectors over the last axis."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def value(x) -> np.ndarray:
    """Plain array behind ``x`` (identity for arrays)."""
    return x.value if isinstance(x, Var) else np.asarray(x)
