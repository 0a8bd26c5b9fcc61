"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive records its operands and a vector-Jacobian product written in
terms of other primitives. Gradients returned by :func:`backward` with
``create_graph=True`` are therefore ordinary graph nodes and can themselves
be differentiated, which is what unrolled inner-loop meta-gradients need.

Example::

    x = Value(3.0, requires_grad=True)
    (g,) = grad(x * x, [x], create_graph=True)
    (h,) = grad(g, [x])
    # g.data == 6.0, h.data == 2.0
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

# Creation sequence numbers. ``next`` on a count is atomic under the GIL, and
# only the relative order inside one graph matters, so independent graphs in
# different threads do not interfere.
_SEQ = itertools.count()


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by {op}")


class Value:
    """A node in a differentiable computation graph.

    Forward values are computed eagerly. ``parents`` and the backward rule are
    only retained when at least one operand requires a gradient, so constant
    subexpressions never enter the graph.
    """

    __slots__ = ("data", "op", "parents", "requires_grad", "_vjp", "seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "leaf construction")
        arr.flags.writeable = False
        self.data = arr
        self.op = "leaf"
        self.parents: tuple[Value, ...] = ()
        self.requires_grad = bool(requires_grad)
        self._vjp = None
        self.seq = next(_SEQ)
        self.name = name

    @classmethod
    def _from_op(cls, data, op, parents, vjp):
        node = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        _check_finite(data, op)
        data.flags.writeable = False
        node.data = data
        node.op = op
        node.name = None
        if any(p.requires_grad for p in parents):
            node.parents = tuple(parents)
            node.requires_grad = True
            node._vjp = vjp
        else:
            node.parents = ()
            node.requires_grad = False
            node._vjp = None
        node.seq = next(_SEQ)
        return node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Value":
        """Same data, cut from the graph."""
        node = Value.__new__(Value)
        node.data = self.data
        node.op = "leaf"
        node.parents = ()
        node.requires_grad = False
        node._vjp = None
        node.seq = next(_SEQ)
        node.name = self.name
        return node

    def __repr__(self):
        return f"Value(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar; identity-based hashing is kept on purpose so Values can
    # key gradient maps
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _unbroadcast(g: Value, shape: tuple[int, ...]) -> Value:
    return g if g.shape == shape else sum_to(g, shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    try:
        out = np.add(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc

    def vjp(g, inputs, out, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return Value._from_op(out, "add", (a, b), vjp)


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    try:
        out = np.subtract(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a.shape} and {b.shape}") from exc

    def vjp(g, inputs, out, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(scale(g, -1.0), b.shape) if needs[1] else None,
        )

    return Value._from_op(out, "sub", (a, b), vjp)


def mul(a, b) -> Value:
    """Elementwise product with broadcasting."""
    a, b = as_value(a), as_value(b)
    try:
        out = np.multiply(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc

    def vjp(g, inputs, out, needs):
        ia, ib = inputs
        return (
            _unbroadcast(mul(g, ib), a.shape) if needs[0] else None,
            _unbroadcast(mul(g, ia), b.shape) if needs[1] else None,
        )

    return Value._from_op(out, "mul", (a, b), vjp)


def scale(a, c: float) -> Value:
    a = as_value(a)
    c = float(c)

    def vjp(g, inputs, out, needs):
        return (scale(g, c),)

    return Value._from_op(a.data * c, "scale", (a,), vjp)


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} not conformable")

    def vjp(g, inputs, out, needs):
        ia, ib = inputs
        return (
            matmul(g, transpose(ib)) if needs[0] else None,
            matmul(transpose(ia), g) if needs[1] else None,
        )

    return Value._from_op(a.data @ b.data, "matmul", (a, b), vjp)


def transpose(a) -> Value:
    a = as_value(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")

    def vjp(g, inputs, out, needs):
        return (transpose(g),)

    return Value._from_op(a.data.T, "transpose", (a,), vjp)


def relu(a) -> Value:
    """Rectifier. The subgradient at exactly zero is zero."""
    a = as_value(a)
    mask = (a.data > 0.0).astype(np.float64)

    def vjp(g, inputs, out, needs):
        return (mul(g, Value(mask)),)

    return Value._from_op(np.where(mask > 0, a.data, 0.0), "relu", (a,), vjp)


def reshape(a, shape: Sequence[int]) -> Value:
    a = as_value(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    src = a.shape

    def vjp(g, inputs, out, needs):
        return (reshape(g, src),)

    return Value._from_op(out, "reshape", (a,), vjp)


def sum(a, axis: int | None = None, keepdims: bool = False) -> Value:  # noqa: A001
    a = as_value(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    src = a.shape

    def vjp(g, inputs, out, needs):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(np.empty(g.shape), axis).shape)
        return (broadcast_to(g, src),)

    return Value._from_op(out, "sum", (a,), vjp)


def mean(a) -> Value:
    a = as_value(a)
    if a.size == 0:
        raise ContractError("mean of an empty Value")
    return scale(sum(a), 1.0 / a.size)


def broadcast_to(a, shape: Sequence[int]) -> Value:
    a = as_value(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: {a.shape} -> {shape}") from exc
    src = a.shape

    def vjp(g, inputs, out, needs):
        return (sum_to(g, src),)

    return Value._from_op(np.array(out), "broadcast_to", (a,), vjp)


def sum_to(a, shape: Sequence[int]) -> Value:
    """Sum ``a`` down to ``shape``; the adjoint of broadcasting."""
    a = as_value(a)
    shape = tuple(shape)
    data = a.data
    lead = data.ndim - len(shape)
    if lead < 0:
        raise DimensionError(f"sum_to: {a.shape} has fewer dims than {shape}")
    if lead:
        data = data.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and data.shape[i] != 1)
    if axes:
        data = data.sum(axis=axes, keepdims=True)
    if data.shape != shape:
        raise DimensionError(f"sum_to: {a.shape} cannot reduce to {shape}")
    src = a.shape

    def vjp(g, inputs, out, needs):
        return (broadcast_to(g, src),)

    return Value._from_op(data, "sum_to", (a,), vjp)


def take_rows(a, rows) -> Value:
    """Select rows (first axis) by an index array or slice."""
    a = as_value(a)
    idx = np.arange(a.shape[0])[rows] if isinstance(rows, slice) else np.asarray(rows, dtype=np.intp)
    n = a.shape[0]

    def vjp(g, inputs, out, needs):
        return (scatter_rows(g, idx, n),)

    return Value._from_op(a.data[idx], "take_rows", (a,), vjp)


def scatter_rows(a, rows, n: int) -> Value:
    """Place the rows of ``a`` at ``rows`` of an ``n``-row zero array (summing repeats)."""
    a = as_value(a)
    idx = np.asarray(rows, dtype=np.intp)
    out = np.zeros((n,) + a.shape[1:])
    np.add.at(out, idx, a.data)

    def vjp(g, inputs, out, needs):
        return (take_rows(g, idx),)

    return Value._from_op(out, "scatter_rows", (a,), vjp)


def concat_rows(parts: Sequence[Value]) -> Value:
    parts = [as_value(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=0)
    except ValueError as exc:
        raise DimensionError("concat_rows: trailing shapes differ") from exc
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g, inputs, out, needs):
        return tuple(
            take_rows(g, slice(bounds[i], bounds[i + 1])) if needs[i] else None
            for i in range(len(parts))
        )

    return Value._from_op(out, "concat_rows", tuple(parts), vjp)


def softmax(a) -> Value:
    """Softmax over the last axis."""
    a = as_value(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, inputs, out, needs):
        gs = mul(g, out)
        return (sub(gs, mul(out, sum(gs, axis=-1, keepdims=True))),)

    return Value._from_op(s, "softmax", (a,), vjp)


def mse(pred, target) -> Value:
    """Mean over all entries of the squared error."""
    pred, target = as_value(pred), as_value(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ContractError("mse of an empty batch")
    diff = pred.data - target.data
    k = 2.0 / pred.size

    def vjp(g, inputs, out, needs):
        d = scale(sub(inputs[0], inputs[1]), k)
        gd = mul(g, d)
        return (gd if needs[0] else None, scale(gd, -1.0) if needs[1] else None)

    return Value._from_op(np.mean(diff * diff), "mse", (pred, target), vjp)


def softmax_cross_entropy(logits, labels) -> Value:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``).

    ``logits`` is (batch, classes) or a single (classes,) row; labels are
    integer class indices and are never differentiated.
    """
    logits = as_value(logits)
    if logits.data.ndim == 1:
        logits = reshape(logits, (1, logits.shape[0]))
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects (batch, classes), got {logits.shape}")
    labels = np.atleast_1d(np.asarray(labels))
    batch, n_classes = logits.shape
    if batch == 0:
        raise ContractError("softmax_cross_entropy of an empty batch")
    if labels.shape != (batch,):
        raise DimensionError(f"expected {batch} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= n_classes:
        raise ContractError(f"labels must be integer class indices in [0, {n_classes})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(batch), labels]
    onehot = np.zeros((batch, n_classes))
    onehot[np.arange(batch), labels] = 1.0

    def vjp(g, inputs, out, needs):
        d = scale(sub(softmax(inputs[0]), Value(onehot)), 1.0 / batch)
        return (mul(g, d),)

    return Value._from_op(np.mean(nll), "softmax_cross_entropy", (logits,), vjp)


def stop_gradient(a) -> Value:
    return as_value(a).detach()


# ---------------------------------------------------------------------------
# reverse pass


def backward(output: Value, leaves: Iterable[Value], create_graph: bool = False) -> dict:
    """Gradients of scalar ``output`` with respect to each Value in ``leaves``.

    ``leaves`` may be any graph nodes, not only leaves proper; the gradient of
    an intermediate node is its adjoint. Returns a dict keyed by the Value
    objects themselves (identity hashing). Unreachable leaves get zeros.

    With ``create_graph`` the returned gradients are differentiable Values
    connected to the original graph.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    targets: list[Value] = []
    seen = set()
    for leaf in leaves:
        if not isinstance(leaf, Value):
            raise ContractError("backward leaves must be Values")
        if not leaf.requires_grad:
            raise ContractError("backward leaf does not require grad")
        if id(leaf) not in seen:
            seen.add(id(leaf))
            targets.append(leaf)
    result = {t: Value(np.zeros(t.shape)) for t in targets}
    if not targets or not output.requires_grad:
        return result

    # A node created before every target cannot have a target among its
    # ancestors, so the search never needs to descend below ``floor``.
    floor = min(t.seq for t in targets)
    target_ids = {id(t) for t in targets}
    nodes: dict[int, Value] = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        for p in node.parents:
            if p.requires_grad and p.seq >= floor and id(p) not in nodes:
                stack.append(p)
    order = sorted(nodes.values(), key=lambda n: n.seq)

    relevant: dict[int, bool] = {}
    for node in order:
        relevant[id(node)] = id(node) in target_ids or any(
            relevant.get(id(p), False) for p in node.parents
        )
    if not relevant[id(output)]:
        return result

    adjoint: dict[int, Value] = {id(output): Value(np.ones(output.shape))}
    for node in reversed(order):
        g = adjoint.get(id(node))
        if g is None or not node.parents:
            continue
        needs = tuple(relevant.get(id(p), False) for p in node.parents)
        if not any(needs):
            continue
        if create_graph:
            inputs, out = node.parents, node
        else:
            inputs = tuple(p.detach() for p in node.parents)
            out = node.detach()
        grads = node._vjp(g, inputs, out, needs)
        for p, gp, need in zip(node.parents, grads, needs):
            if not need or gp is None:
                continue
            prev = adjoint.get(id(p))
            adjoint[id(p)] = gp if prev is None else add(prev, gp)
    for t in targets:
        g = adjoint.get(id(t))
        if g is not None:
            result[t] = g if create_graph else g.detach()
    return result


def grad(output: Value, leaves: Sequence[Value], create_graph: bool = False) -> list[Value]:
    """List form of :func:`backward`, aligned with ``leaves``."""
    gm = backward(output, leaves, create_graph=create_graph)
    return [gm[leaf] for leaf in leaves]


def ancestors(output: Value) -> list[Value]:
    """Every graph node reachable from ``output`` through recorded parents."""
    found: dict[int, Value] = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if id(node) in found:
            continue
        found[id(node)] = node
        stack.extend(node.parents)
    return sorted(found.values(), key=lambda n: n.seq)


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], point, epsilon: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at flat ``point``."""
    if not epsilon > 0:
        raise ContractError("epsilon must be positive")
    x = np.array(point, dtype=np.float64).reshape(-1)
    out = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += epsilon
        xm[i] -= epsilon
        fp, fm = float(f(xp)), float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * epsilon)
    return out
