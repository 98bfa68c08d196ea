"""Small reverse-mode differentiation engine on top of numpy.

Tensors hold float64 arrays. Operations are recorded on the active
:class:`ComputeTape` only when at least one operand requires a gradient, so
inference code runs with no bookkeeping at all::

    w = Tensor(np.ones((2, 3)), requires_grad=True)
    with ComputeTape() as tape:
        loss = sum_all(fc(w, b, x))
    backward(loss, tape)
    w.grad

Row-batched inputs are supported throughout: ``fc`` accepts an input of shape
``(in,)`` or ``(rows, in)`` and ``layer_norm`` normalizes along the last axis.
That is what lets a whole batch of graphs run as one disjoint union.
"""

from __future__ import annotations

import numpy as np

LAYER_NORM_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """Argument outside the domain of a primitive (e.g. log of a non-positive value)."""


class ContractError(RuntimeError):
    """A caller broke an engine precondition."""


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_node")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar, used heavily by the model code
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("index", "inputs", "output", "backward_fn", "name")

    def __init__(self, index, inputs, output, backward_fn, name):
        self.index = index
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name


_ACTIVE: list["ComputeTape"] = []


class ComputeTape:
    """Ordered record of the primitive operations run while it is active."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "ComputeTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, name, inputs, output, backward_fn) -> None:
        node = _Node(len(self.nodes), inputs, output, backward_fn, name)
        output._node = node
        output.requires_grad = True
        self.nodes.append(node)

    def check_topological(self) -> bool:
        """True when every recorded input was produced earlier on this tape (or is a leaf)."""
        for node in self.nodes:
            for t in node.inputs:
                src = t._node
                if src is not None and src.index >= node.index:
                    return False
        return True


def _emit(name, inputs, out_values, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = out_values
    out.requires_grad = False
    out.grad = None
    out._node = None
    if _ACTIVE and any(t.requires_grad for t in inputs):
        _ACTIVE[-1].record(name, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from err


# --- affine -----------------------------------------------------------------


def fc(weights: Tensor, bias: Tensor, x: Tensor) -> Tensor:
    """Fully connected map ``x @ weights.T + bias``; weights are (out, in)."""
    x = _wrap(x)
    if weights.values.ndim != 2 or bias.shape != (weights.shape[0],):
        raise DimensionError(f"fc: weights {weights.shape} / bias {bias.shape} inconsistent")
    if x.shape[-1:] != (weights.shape[1],) or x.values.ndim > 2:
        raise DimensionError(f"fc: input {x.shape} does not match weights {weights.shape}")
    W, xv = weights.values, x.values
    out = xv @ W.T + bias.values

    def backward_fn(g):
        g2 = g if g.ndim == 2 else g[None, :]
        x2 = xv if xv.ndim == 2 else xv[None, :]
        return (g2.T @ x2, g2.sum(axis=0), g @ W)

    return _emit("fc", (weights, bias, x), out, backward_fn)


# --- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.values + b.values,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.values - b.values,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.values, b.values
    return _emit("mul", (a, b), av * bv,
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "div")
    av, bv = a.values, b.values
    out = av / bv
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.values, lambda g: (-g,))


def sigmoid(a: Tensor) -> Tensor:
    v = a.values
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    v = a.values
    out = np.logaddexp(0.0, v)

    def backward_fn(g):
        e = np.exp(-np.abs(v))
        s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * s,)

    return _emit("softplus", (a,), out, backward_fn)


def relu(a: Tensor) -> Tensor:
    v = a.values
    mask = v > 0
    return _emit("relu", (a,), np.where(mask, v, 0.0), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    v = a.values
    if np.any(v <= 0):
        raise DomainError("log of a non-positive value")
    return _emit("log", (a,), np.log(v), lambda g: (g / v,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def sqrt(a: Tensor) -> Tensor:
    v = a.values
    if np.any(v < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(v)
    return _emit("sqrt", (a,), out, lambda g: (g / (2.0 * out),))


def square(a: Tensor) -> Tensor:
    v = a.values
    return _emit("square", (a,), v * v, lambda g: (2.0 * g * v,))


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "softplus": softplus,
    "relu": relu,
    "log": log,
    "exp": exp,
    "sqrt": sqrt,
    "square": square,
    "neg": neg,
    "mul": mul,
    "add": add,
    "sub": sub,
    "div": div,
}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch a pointwise primitive by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# --- normalization / structure ---------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    k = x.shape[-1]
    if k < 1 or gain.shape != (k,) or shift.shape != (k,):
        raise DimensionError(f"layer_norm: input {x.shape}, gain {gain.shape}, shift {shift.shape}")
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gv = gain.values
    out = xhat * gv + shift.values

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        d_gain = (g * xhat).sum(axis=lead)
        d_shift = g.sum(axis=lead)
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, d_gain, d_shift)

    return _emit("layer_norm", (x, gain, shift), out, backward_fn)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    vals = [p.values for p in parts]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(parts), out, backward_fn)


def gather(x: Tensor, index) -> Tensor:
    """Rows ``x[index]`` (first axis)."""
    idx = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def backward_fn(g):
        dx = np.zeros(shape)
        np.add.at(dx, idx, g)
        return (dx,)

    return _emit("gather", (x,), x.values[idx], backward_fn)


def segment_sum(x: Tensor, segments, n_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``n_segments`` buckets given by ``segments``."""
    seg = np.asarray(segments, dtype=np.intp)
    if seg.shape != x.shape[:1]:
        raise DimensionError("segment_sum: one segment id per row required")
    out = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(out, seg, x.values)
    return _emit("segment_sum", (x,), out, lambda g: (g[seg],))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit("reshape", (x,), x.values.reshape(shape), lambda g: (g.reshape(old),))


def sum_last(x: Tensor) -> Tensor:
    """Sum over the last axis, keeping it with size 1."""
    shape = x.shape
    return _emit("sum_last", (x,), x.values.sum(axis=-1, keepdims=True),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.values.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit("mean", (x,), np.asarray(x.values.mean()),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


# --- reverse pass -----------------------------------------------------------


def backward(loss: Tensor, tape: ComputeTape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf on ``tape``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None or node.index >= len(tape.nodes) or tape.nodes[node.index] is not node:
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes[: node.index + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if not t.requires_grad:
                continue
            if t._node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
