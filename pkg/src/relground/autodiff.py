"""Reverse-mode automatic differentiation over float64 numpy arrays.

The engine is deliberately small: a ``Tape`` records one node per operation
in creation order (which is topological by construction), and ``backward``
replays the tape once in reverse, dispatching per-op backward rules from a
registry.  Everything is eager; the numpy result of an op is available
immediately and the tape only stores what the backward rule needs.

Gradient correctness is checked against central finite differences via
``finite_difference_check``; every op kind is covered by randomized
property tests in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "ShapeError",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "smul",
    "concat",
    "take_slice",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "tanh",
    "relu",
    "sigmoid",
    "softmax",
    "l2_normalize",
    "exp",
    "log",
    "reshape",
    "transpose",
    "backward",
    "finite_difference_check",
    "FdCheckReport",
    "OP_KINDS",
    "BACKWARD_RULES",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; the message names both."""


class Node:
    """One recorded operation: (op kind, input node ids, saved values)."""

    __slots__ = ("kind", "input_ids", "saved")

    def __init__(self, kind, input_ids, saved):
        self.kind = kind
        self.input_ids = input_ids
        self.saved = saved


class Tape:
    """Ordered record of operations; append order is topological order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def leaf(self, data, requires_grad=True):
        """Register an input tensor.  Only grad-requiring leaves go on tape."""
        arr = np.asarray(data, dtype=np.float64)
        if not requires_grad:
            return Tensor(arr)
        node_id = len(self.nodes)
        self.nodes.append(Node("leaf", (), (arr.shape,)))
        return Tensor(arr, tape=self, node_id=node_id)


class Tensor:
    """A float64 array, optionally tied to a node on an active tape."""

    __slots__ = ("data", "requires_grad", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id
        self.requires_grad = tape is not None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return smul(self, other)

    def __rmul__(self, other):
        return smul(self, other)

    def __neg__(self):
        return smul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)


def constant(data):
    """Wrap an array as a non-differentiable tensor."""
    return Tensor(data)


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _register(kind, out, inputs, saved):
    """Finish an op: finiteness check, tape bookkeeping, output wrapping."""
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{kind}: non-finite values in result")
    tape = None
    for t in inputs:
        tp = t.tape
        if tp is not None:
            if tape is None:
                tape = tp
            elif tape is not tp:
                raise ValueError(f"{kind}: inputs live on different tapes")
    if tape is None:
        return Tensor(out)
    ids = tuple(t.node_id if t.tape is not None else None for t in inputs)
    node_id = len(tape.nodes)
    tape.nodes.append(Node(kind, ids, saved))
    return Tensor(out, tape=tape, node_id=node_id)


def _unbroadcast(grad, shape):
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shapes(kind, a, b):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    """2-D matrix product."""
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} are incompatible")
    out = a.data @ b.data
    return _register("matmul", out, (a, b), (a.data, b.data))


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    _broadcast_shapes("add", a, b)
    return _register("add", a.data + b.data, (a, b), (a.data.shape, b.data.shape))


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    _broadcast_shapes("sub", a, b)
    return _register("sub", a.data - b.data, (a, b), (a.data.shape, b.data.shape))


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    a, b = _coerce(a), _coerce(b)
    _broadcast_shapes("mul", a, b)
    return _register("mul", a.data * b.data, (a, b), (a.data, b.data))


def div(a, b):
    """Elementwise quotient with numpy broadcasting."""
    a, b = _coerce(a), _coerce(b)
    _broadcast_shapes("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _register("div", out, (a, b), (a.data, b.data, out))


def smul(a, scalar):
    """Multiply by a python scalar."""
    a = _coerce(a)
    c = float(scalar)
    return _register("smul", a.data * c, (a,), (c,))


def concat(tensors, axis=0):
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    nd = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != nd:
            raise ShapeError(
                f"concat: rank mismatch {tensors[0].data.shape} vs {t.data.shape}")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.data.shape for t in tensors]} do not align on axis {axis}") from None
    sizes = tuple(t.data.shape[axis] for t in tensors)
    return _register("concat", out, tuple(tensors), (axis, sizes))


def take_slice(a, key):
    """Basic numpy indexing (ints/slices); gradient scatters back."""
    a = _coerce(a)
    out = np.asarray(a.data[key], dtype=np.float64)
    return _register("slice", out, (a,), (a.data.shape, key))


def reduce_sum(a, axis=None):
    a = _coerce(a)
    return _register("sum", np.sum(a.data, axis=axis), (a,), (a.data.shape, axis))


def reduce_mean(a, axis=None):
    a = _coerce(a)
    return _register("mean", np.mean(a.data, axis=axis), (a,), (a.data.shape, axis))


def reduce_max(a, axis=None):
    """Max reduction; ties route the gradient to the first maximum."""
    a = _coerce(a)
    out = np.max(a.data, axis=axis)
    if axis is None:
        mask = np.zeros(a.data.size)
        mask[np.argmax(a.data)] = 1.0
        mask = mask.reshape(a.data.shape)
    else:
        mask = np.zeros(a.data.shape)
        idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
        np.put_along_axis(mask, idx, 1.0, axis=axis)
    return _register("max", out, (a,), (mask, a.data.shape, axis))


def tanh(a):
    a = _coerce(a)
    out = np.tanh(a.data)
    return _register("tanh", out, (a,), (out,))


def relu(a):
    a = _coerce(a)
    out = np.maximum(a.data, 0.0)
    return _register("relu", out, (a,), (a.data > 0.0,))


def sigmoid(a):
    a = _coerce(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _register("sigmoid", out, (a,), (out,))


def softmax(a, axis=-1):
    """Numerically stable softmax along one axis."""
    a = _coerce(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _register("softmax", out, (a,), (out, axis))


def l2_normalize(a, axis=-1):
    """Scale slices along ``axis`` to unit euclidean norm.

    Rejects inputs whose norm falls below 1e-12: the direction of a
    near-zero vector is noise and its gradient explodes.
    """
    a = _coerce(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    if np.any(norm < 1e-12):
        raise ValueError("l2_normalize: input norm below 1e-12")
    out = a.data / norm
    return _register("l2norm", out, (a,), (out, norm, axis))


def exp(a):
    a = _coerce(a)
    out = np.exp(a.data)
    return _register("exp", out, (a,), (out,))


def log(a):
    a = _coerce(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _register("log", out, (a,), (a.data,))


def reshape(a, shape):
    a = _coerce(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.data.shape} as {shape}") from None
    return _register("reshape", out, (a,), (a.data.shape,))


def transpose(a, axes=None):
    a = _coerce(a)
    return _register("transpose", np.transpose(a.data, axes), (a,), (axes,))


# ---------------------------------------------------------------------------
# backward rules, one per op kind
# ---------------------------------------------------------------------------

def _bw_matmul(saved, g):
    a, b = saved
    return g @ b.T, a.T @ g


def _bw_add(saved, g):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _bw_sub(saved, g):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def _bw_mul(saved, g):
    a, b = saved
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _bw_div(saved, g):
    a, b, out = saved
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


def _bw_smul(saved, g):
    return (g * saved[0],)


def _bw_concat(saved, g):
    axis, sizes = saved
    splits = np.cumsum(sizes[:-1])
    return tuple(np.split(g, splits, axis=axis))


def _bw_slice(saved, g):
    shape, key = saved
    full = np.zeros(shape)
    full[key] += g
    return (full,)


def _bw_sum(saved, g):
    shape, axis = saved
    if axis is None:
        return (np.broadcast_to(g, shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)


def _bw_mean(saved, g):
    shape, axis = saved
    if axis is None:
        count = int(np.prod(shape))
        return (np.broadcast_to(g / count, shape).copy(),)
    count = shape[axis]
    return (np.broadcast_to(np.expand_dims(g / count, axis), shape).copy(),)


def _bw_max(saved, g):
    mask, shape, axis = saved
    if axis is None:
        return (mask * g,)
    return (mask * np.expand_dims(g, axis),)


def _bw_tanh(saved, g):
    out = saved[0]
    return (g * (1.0 - out * out),)


def _bw_relu(saved, g):
    return (g * saved[0],)


def _bw_sigmoid(saved, g):
    out = saved[0]
    return (g * out * (1.0 - out),)


def _bw_softmax(saved, g):
    out, axis = saved
    inner = np.sum(g * out, axis=axis, keepdims=True)
    return (out * (g - inner),)


def _bw_l2norm(saved, g):
    out, norm, axis = saved
    inner = np.sum(g * out, axis=axis, keepdims=True)
    return ((g - out * inner) / norm,)


def _bw_exp(saved, g):
    return (g * saved[0],)


def _bw_log(saved, g):
    return (g / saved[0],)


def _bw_reshape(saved, g):
    return (g.reshape(saved[0]),)


def _bw_transpose(saved, g):
    axes = saved[0]
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


BACKWARD_RULES = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "div": _bw_div,
    "smul": _bw_smul,
    "concat": _bw_concat,
    "slice": _bw_slice,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "max": _bw_max,
    "tanh": _bw_tanh,
    "relu": _bw_relu,
    "sigmoid": _bw_sigmoid,
    "softmax": _bw_softmax,
    "l2norm": _bw_l2norm,
    "exp": _bw_exp,
    "log": _bw_log,
    "reshape": _bw_reshape,
    "transpose": _bw_transpose,
}

OP_KINDS = tuple(sorted(BACKWARD_RULES))


def backward(tape, loss):
    """Accumulate d(loss)/d(leaf) for every leaf on the tape.

    ``loss`` must be a scalar tensor recorded on ``tape``.  Returns a map
    from leaf node id to a float64 gradient array; leaves the loss does not
    depend on get explicit zero arrays.
    """
    if not isinstance(loss, Tensor) or loss.tape is not tape or loss.node_id is None:
        raise ValueError("backward: loss is not recorded on this tape")
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    nodes = tape.nodes
    grads = [None] * (loss.node_id + 1)
    grads[loss.node_id] = np.ones_like(loss.data)
    reached = {}
    for i in range(loss.node_id, -1, -1):
        g = grads[i]
        grads[i] = None
        if g is None:
            continue
        node = nodes[i]
        if node.kind == "leaf":
            reached[i] = g
            continue
        for input_id, gi in zip(node.input_ids, BACKWARD_RULES[node.kind](node.saved, g)):
            if input_id is None or gi is None:
                continue
            if grads[input_id] is None:
                grads[input_id] = gi
            else:
                grads[input_id] = grads[input_id] + gi
    result = {}
    for i, node in enumerate(nodes):
        if node.kind == "leaf":
            g = reached.get(i)
            result[i] = g if g is not None else np.zeros(node.saved[0])
    return result


@dataclass
class FdCheckReport:
    """Outcome of a finite-difference gradient check."""

    passed: bool
    max_rel_error: float
    worst_param: int
    worst_coord: int
    per_param: list

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (f"fd-check {status}: max rel err {self.max_rel_error:.3e} "
                f"at param {self.worst_param} coord {self.worst_coord}")


def _relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_difference_check(fn, params, epsilon=1e-5, tolerance=1e-4):
    """Compare tape gradients of ``fn`` against central finite differences.

    ``fn(tape, leaves)`` must build a scalar loss from the given leaf
    tensors and be deterministic — it is evaluated twice at the base point
    and rejected if the values differ.  Every coordinate of every parameter
    is perturbed by ±epsilon; the relative error of the analytic gradient
    against (f(x+eps) - f(x-eps)) / (2 eps) must stay below ``tolerance``.
    """
    if not (1e-8 < epsilon < 1e-2):
        raise ValueError(f"finite_difference_check: epsilon {epsilon} outside (1e-8, 1e-2)")
    arrays = [np.array(p, dtype=np.float64) for p in params]

    def evaluate(values):
        tape = Tape()
        leaves = [tape.leaf(a) for a in values]
        out = fn(tape, leaves)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ValueError("finite_difference_check: fn must return a scalar tensor")
        return tape, leaves, out

    tape, leaves, out = evaluate(arrays)
    _, _, out2 = evaluate(arrays)
    if float(out.data) != float(out2.data):
        raise ValueError("finite_difference_check: fn is not deterministic (two evaluations differ)")
    grad_map = backward(tape, out)
    analytic = [grad_map[leaf.node_id].reshape(-1) for leaf in leaves]

    max_err, worst_param, worst_coord = 0.0, -1, -1
    per_param = []
    for pi, base in enumerate(arrays):
        flat = base.reshape(-1)
        param_err = 0.0
        for ci in range(flat.size):
            orig = flat[ci]
            flat[ci] = orig + epsilon
            f_plus = float(evaluate(arrays)[2].data)
            flat[ci] = orig - epsilon
            f_minus = float(evaluate(arrays)[2].data)
            flat[ci] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = _relative_error(float(analytic[pi][ci]), numeric)
            if err > param_err:
                param_err = err
            if err > max_err:
                max_err, worst_param, worst_coord = err, pi, ci
        per_param.append(param_err)
    return FdCheckReport(
        passed=max_err < tolerance,
        max_rel_error=max_err,
        worst_param=worst_param,
        worst_coord=worst_coord,
        per_param=per_param,
    )
