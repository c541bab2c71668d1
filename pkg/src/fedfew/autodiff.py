"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every operation appends a node to a :class:`Tape`; :func:`backward` walks the
tape once in reverse.  The op set is deliberately small: it covers MLP
forward passes, the energy losses and the stop-gradient needed by SimSiam.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

OP_KINDS = (
    "leaf",
    "matmul",
    "add",
    "mul",
    "relu",
    "sigmoid",
    "softplus",
    "log",
    "exp",
    "square",
    "sum",
    "mean",
    "scale",
    "concat",
    "l2_normalize",
    "stop_gradient",
)


class ShapeError(ValueError):
    pass


class GradCheckError(RuntimeError):
    def __init__(self, message: str, name: str, index: int):
        super().__init__(message)
        self.name = name
        self.index = index


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "id", "value")
    __array_priority__ = 100

    def __init__(self, tape: Tape, node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(self.tape, other), -1.0))

    def __rsub__(self, other):
        return add(_lift(self.tape, other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("kind", "inputs", "value", "backward", "requires_grad")

    def __init__(self, kind, inputs, value, backward, requires_grad):
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.backward = backward
        self.requires_grad = requires_grad


class Tape:
    """Ordered record of forward computations.

    Node inputs always refer to earlier nodes, so the record is already in
    topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, kind, inputs, value, backward, requires_grad) -> Var:
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node(kind, tuple(inputs), value, backward, requires_grad))
        return Var(self, len(self.nodes) - 1, value)

    def param(self, value) -> Var:
        return self._append("leaf", (), np.array(value, dtype=np.float64), None, True)

    def constant(self, value) -> Var:
        return self._append("leaf", (), np.array(value, dtype=np.float64), None, False)

    def forward(self, op_kind: str, inputs: Sequence[Var], **attrs) -> Var:
        try:
            fn = _FORWARD[op_kind]
        except KeyError:
            raise ValueError(f"unsupported op kind {op_kind!r}") from None
        for v in inputs:
            if v.tape is not self:
                raise ValueError("input belongs to a different tape")
        return fn(self, *inputs, **attrs)


def constant(value) -> Var:
    """Wrap a value as a constant on a fresh tape."""
    return Tape().constant(value)


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    return tape.constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    # Only same-shape, scalar, and trailing-row (bias) patterns are allowed.
    if a.shape == b.shape or b.size == 1 or a.size == 1:
        return
    if b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim == 2 and b.shape[1] == a.shape[0]:
        return
    if a.ndim == 2 and b.ndim == 2 and a.shape[0] == b.shape[0] and b.shape[1] == 1:
        return
    raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _requires(*vs: Var) -> bool:
    return any(v.tape.nodes[v.id].requires_grad for v in vs)


# -- op implementations ------------------------------------------------------


def _matmul(tape, a, b):
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim != 2 or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")

    def back(g):
        if av.ndim == 1:
            return g @ bv.T, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return tape._append("matmul", (a.id, b.id), av @ bv, back, _requires(a, b))


def _add(tape, a, b):
    _check_broadcast("add", a.value, b.value)
    sa, sb = a.value.shape, b.value.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return tape._append("add", (a.id, b.id), a.value + b.value, back, _requires(a, b))


def _mul(tape, a, b):
    _check_broadcast("mul", a.value, b.value)
    av, bv = a.value, b.value

    def back(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return tape._append("mul", (a.id, b.id), av * bv, back, _requires(a, b))


def _relu(tape, a):
    mask = a.value > 0.0  # subgradient 0 at the kink
    return tape._append(
        "relu", (a.id,), np.where(mask, a.value, 0.0), lambda g: (g * mask,), _requires(a)
    )


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus_values(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(tape, a):
    s = _sigmoid_values(a.value)
    return tape._append("sigmoid", (a.id,), s, lambda g: (g * s * (1.0 - s),), _requires(a))


def _softplus(tape, a):
    s = _sigmoid_values(a.value)
    return tape._append(
        "softplus", (a.id,), _softplus_values(a.value), lambda g: (g * s,), _requires(a)
    )


def _log(tape, a):
    if np.any(a.value <= 0.0):
        raise ValueError("log: non-positive input")
    av = a.value
    return tape._append("log", (a.id,), np.log(av), lambda g: (g / av,), _requires(a))


def _exp(tape, a):
    e = np.exp(a.value)
    return tape._append("exp", (a.id,), e, lambda g: (g * e,), _requires(a))


def _square(tape, a):
    av = a.value
    return tape._append("square", (a.id,), av * av, lambda g: (2.0 * g * av,), _requires(a))


def _sum(tape, a, axis: int | None = None):
    shape = a.value.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return tape._append("sum", (a.id,), a.value.sum(axis=axis), back, _requires(a))


def _mean(tape, a, axis: int | None = None):
    shape = a.value.shape
    n = a.value.size if axis is None else shape[axis]
    if n == 0:
        raise ShapeError("mean: empty input")

    def back(g):
        if axis is None:
            return (np.full(shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return tape._append("mean", (a.id,), a.value.mean(axis=axis), back, _requires(a))


def _scale(tape, a, factor: float = 1.0):
    c = float(factor)
    return tape._append("scale", (a.id,), a.value * c, lambda g: (g * c,), _requires(a))


def _concat(tape, *parts, axis: int = -1):
    if not parts:
        raise ShapeError("concat: no inputs")
    values = [p.value for p in parts]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in values]}") from exc
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape._append("concat", tuple(p.id for p in parts), out, back, _requires(*parts))


def _l2_normalize(tape, a, axis: int = -1):
    av = a.value
    norm = np.sqrt((av * av).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise ValueError("l2_normalize: zero-norm vector")
    y = av / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return tape._append("l2_normalize", (a.id,), y, back, _requires(a))


def _stop_gradient(tape, a):
    return tape._append("stop_gradient", (a.id,), a.value, None, False)


_FORWARD: dict[str, Callable] = {
    "matmul": _matmul,
    "add": _add,
    "mul": _mul,
    "relu": _relu,
    "sigmoid": _sigmoid,
    "softplus": _softplus,
    "log": _log,
    "exp": _exp,
    "square": _square,
    "sum": _sum,
    "mean": _mean,
    "scale": _scale,
    "concat": _concat,
    "l2_normalize": _l2_normalize,
    "stop_gradient": _stop_gradient,
}


# -- functional front end ----------------------------------------------------


def _binary(kind: str, a, b) -> Var:
    if not isinstance(a, Var) and not isinstance(b, Var):
        tape = Tape()
    else:
        tape = a.tape if isinstance(a, Var) else b.tape
    return tape.forward(kind, (_lift(tape, a), _lift(tape, b)))


def _unary(kind: str, a, **attrs) -> Var:
    if not isinstance(a, Var):
        a = constant(a)
    return a.tape.forward(kind, (a,), **attrs)


def matmul(a, b) -> Var:
    return _binary("matmul", a, b)


def add(a, b) -> Var:
    return _binary("add", a, b)


def mul(a, b) -> Var:
    return _binary("mul", a, b)


def relu(a) -> Var:
    return _unary("relu", a)


def sigmoid(a) -> Var:
    return _unary("sigmoid", a)


def softplus(a) -> Var:
    return _unary("softplus", a)


def log(a) -> Var:
    return _unary("log", a)


def exp(a) -> Var:
    return _unary("exp", a)


def square(a) -> Var:
    return _unary("square", a)


def sum(a, axis: int | None = None) -> Var:  # noqa: A001
    return _unary("sum", a, axis=axis)


def mean(a, axis: int | None = None) -> Var:
    return _unary("mean", a, axis=axis)


def scale(a, factor: float) -> Var:
    return _unary("scale", a, factor=factor)


def l2_normalize(a, axis: int = -1) -> Var:
    return _unary("l2_normalize", a, axis=axis)


def stop_gradient(a) -> Var:
    return _unary("stop_gradient", a)


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    tape = parts[0].tape
    return tape.forward("concat", tuple(parts), axis=axis)


# -- backward ----------------------------------------------------------------


def backward(output: Var) -> dict[int, np.ndarray]:
    """Gradients of a scalar output with respect to every differentiable node.

    Returns a map from node id to gradient.  Nodes that do not influence the
    output through a differentiable path are absent from the map.
    """
    if output.value.size != 1 or output.value.ndim > 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.value.shape}")
    tape = output.tape
    grads: dict[int, np.ndarray] = {output.id: np.ones_like(output.value)}
    for node_id in range(output.id, -1, -1):
        g = grads.get(node_id)
        if g is None:
            continue
        node = tape.nodes[node_id]
        if node.backward is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if not tape.nodes[inp].requires_grad:
                continue
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    return {k: v for k, v in grads.items() if tape.nodes[k].requires_grad}


def gradients(output: Var, wrt: Mapping[str, Var]) -> dict[str, np.ndarray]:
    """Named gradients; parameters without a path to the output get zeros."""
    grads = backward(output)
    return {
        name: grads.get(v.id, np.zeros_like(v.value)) for name, v in wrt.items()
    }


# -- finite-difference verification -----------------------------------------

LossBuilder = Callable[[Tape, dict[str, Var]], Var]


def _evaluate(builder: LossBuilder, point: Mapping[str, np.ndarray]) -> float:
    tape = Tape()
    leaves = {k: tape.param(v) for k, v in point.items()}
    return float(builder(tape, leaves).value)


def _evaluate_or_nan(builder: LossBuilder, point: Mapping[str, np.ndarray]) -> float:
    # out-of-domain inputs (log of a non-positive value, ...) count as non-finite
    try:
        return _evaluate(builder, point)
    except (ValueError, FloatingPointError):
        return float("nan")


def grad_check(
    loss_builder: LossBuilder, point: Mapping[str, np.ndarray], eps: float = 1e-5
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    tape = Tape()
    leaves = {k: tape.param(v) for k, v in point.items()}
    analytic = gradients(loss_builder(tape, leaves), leaves)

    worst = 0.0
    for name, base in point.items():
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = _evaluate_or_nan(loss_builder, point)
            flat[i] = orig - eps
            down = _evaluate_or_nan(loss_builder, point)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradCheckError(
                    f"non-finite loss at perturbed coordinate {name}[{i}]", name, i
                )
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def one_sided_differences(
    loss_builder: LossBuilder,
    point: Mapping[str, np.ndarray],
    name: str,
    index: int,
    eps: float = 1e-5,
) -> tuple[float, float]:
    """(left, right) difference quotients at one coordinate, for inspecting kinks."""
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    flat = point[name].reshape(-1)
    orig = flat[index]
    center = _evaluate(loss_builder, point)
    flat[index] = orig - eps
    left = (center - _evaluate(loss_builder, point)) / eps
    flat[index] = orig + eps
    right = (_evaluate(loss_builder, point) - center) / eps
    flat[index] = orig
    return left, right
