"""
Reverse-mode differentiation over dense float64 tensors

Every trainable model in the package is written as a sequence of
``Graph.forward_op`` calls. A graph is a tape: nodes are appended in
topological order, leaves are either named trainable parameters or
constants, and ``backward`` walks the tape in reverse.

Each op kind is registered with four rules:

- ``forward(values, attrs)``   the mathematical definition
- ``backward(g, values, out, attrs)``   one gradient (or None) per input
- ``check(shapes, attrs)``   raises ShapeError naming the op and shapes
- ``branch(values, attrs)``   optional; the active piece of a piecewise op
  (ReLU sign, max argmax, ...). ``gradient_check`` skips coordinates whose
  perturbation switches a piece, i.e. nondifferentiable points.

Subgradient conventions: max routes all credit to the first maximal index,
|x| has derivative 0 at 0, ReLU has derivative 0 at 0.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence
from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, logsumexp

from .exceptions import ConfigError, DataError, ShapeError


class OpKind(Enum):
    """Differentiable operations understood by the graph"""
    MATVEC = "matvec"          # x @ W.T, W stored as (out, in)
    ADD_BIAS = "add_bias"
    RELU = "relu"
    MAX = "max"                # 1-max pooling over an axis
    CONCAT = "concat"
    GATHER = "gather"          # embedding row lookup
    WINDOWS = "windows"        # sliding concatenated windows x_{i:i+w}
    SOFTMAX = "softmax"
    SOFTPLUS = "softplus"
    SOFTSIGN = "softsign"
    LOG = "log"
    EXP = "exp"
    LOGSUMEXP = "logsumexp"
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    ABS = "abs"
    SQUARE = "square"
    SUM = "sum"
    DROPOUT = "dropout"
    RESHAPE = "reshape"
    TAKE = "take"
    SCALE = "scale"
    CLIP = "clip"


@dataclass
class OpDef:
    forward: Callable
    backward: Callable
    check: Optional[Callable] = None
    branch: Optional[Callable] = None


@dataclass
class Node:
    """One tape entry"""
    id: int
    kind: Optional[OpKind]  # None for leaves
    inputs: tuple
    value: np.ndarray
    attrs: Dict[str, Any] = field(default_factory=dict)
    name: Optional[str] = None
    trainable: bool = False

    @property
    def is_leaf(self) -> bool:
        return self.kind is None


_OPS: Dict[OpKind, OpDef] = {}


def _register(kind: OpKind, forward, backward, check=None, branch=None) -> None:
    _OPS[kind] = OpDef(forward, backward, check, branch)


def _fail(kind: OpKind, shapes, detail: str) -> None:
    raise ShapeError(f"{kind.value}: {detail} (input shapes {', '.join(str(s) for s in shapes)})")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(kind):
    def check(shapes, attrs):
        try:
            np.broadcast_shapes(*shapes)
        except ValueError:
            _fail(kind, shapes, "shapes do not broadcast")
    return check


def _check_unary(kind):
    def check(shapes, attrs):
        if len(shapes) != 1:
            _fail(kind, shapes, "expects exactly one input")
    return check


def _normalize_axis(axis: int, ndim: int) -> int:
    return axis + ndim if axis < 0 else axis


# ----- linear algebra -------------------------------------------------------

def _matvec_check(shapes, attrs):
    x, w = shapes
    if len(w) != 2 or len(x) < 1 or x[-1] != w[1]:
        _fail(OpKind.MATVEC, shapes, "need x (..., n) and W (out, n)")


def _matvec_backward(g, values, out, attrs):
    x, w = values
    gx = g @ w
    gw = g.reshape(-1, w.shape[0]).T @ x.reshape(-1, w.shape[1])
    return [gx, gw]


_register(OpKind.MATVEC, lambda v, a: v[0] @ v[1].T, _matvec_backward, _matvec_check)


def _add_bias_check(shapes, attrs):
    x, b = shapes
    if len(b) != 1 or len(x) < 1 or x[-1] != b[0]:
        _fail(OpKind.ADD_BIAS, shapes, "bias must match the last axis")


_register(
    OpKind.ADD_BIAS,
    lambda v, a: v[0] + v[1],
    lambda g, v, out, a: [g, g.reshape(-1, v[1].shape[0]).sum(axis=0)],
    _add_bias_check,
)


# ----- piecewise ------------------------------------------------------------

_register(
    OpKind.RELU,
    lambda v, a: np.maximum(v[0], 0.0),
    lambda g, v, out, a: [g * (v[0] > 0.0)],
    _check_unary(OpKind.RELU),
    branch=lambda v, a: np.sign(v[0]),
)


def _max_check(shapes, attrs):
    (x,) = shapes
    axis = attrs['axis']
    if not -len(x) <= axis < len(x) or x[axis] < 1:
        _fail(OpKind.MAX, shapes, f"cannot reduce axis {axis}")


def _max_backward(g, values, out, attrs):
    x = values[0]
    axis = _normalize_axis(attrs['axis'], x.ndim)
    first = np.expand_dims(np.argmax(x, axis=axis), axis)
    gx = np.zeros_like(x)
    np.put_along_axis(gx, first, np.expand_dims(g, axis), axis=axis)
    return [gx]


_register(
    OpKind.MAX,
    lambda v, a: v[0].max(axis=a['axis']),
    _max_backward,
    _max_check,
    branch=lambda v, a: np.argmax(v[0], axis=a['axis']),
)

_register(
    OpKind.ABS,
    lambda v, a: np.abs(v[0]),
    lambda g, v, out, a: [g * np.sign(v[0])],
    _check_unary(OpKind.ABS),
    branch=lambda v, a: np.sign(v[0]),
)


def _clip_branch(values, attrs):
    x = values[0]
    return (x > attrs['hi']).astype(np.int8) - (x < attrs['lo']).astype(np.int8)


_register(
    OpKind.CLIP,
    lambda v, a: np.clip(v[0], a['lo'], a['hi']),
    lambda g, v, out, a: [g * ((v[0] >= a['lo']) & (v[0] <= a['hi']))],
    _check_unary(OpKind.CLIP),
    branch=_clip_branch,
)


# ----- layout ---------------------------------------------------------------

def _concat_check(shapes, attrs):
    axis = attrs['axis']
    ref = list(shapes[0])
    for shape in shapes[1:]:
        if len(shape) != len(ref):
            _fail(OpKind.CONCAT, shapes, "rank mismatch")
        ax = _normalize_axis(axis, len(ref))
        if [s for i, s in enumerate(shape) if i != ax] != [s for i, s in enumerate(ref) if i != ax]:
            _fail(OpKind.CONCAT, shapes, f"sizes differ off axis {axis}")


def _concat_backward(g, values, out, attrs):
    axis = attrs['axis']
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
    return np.split(g, bounds, axis=axis)


_register(
    OpKind.CONCAT,
    lambda v, a: np.concatenate(v, axis=a['axis']),
    _concat_backward,
    _concat_check,
)


def _gather_check(shapes, attrs):
    (table,) = shapes
    if len(table) != 2:
        _fail(OpKind.GATHER, shapes, "table must be 2-D")


def _gather_backward(g, values, out, attrs):
    table = values[0]
    grad = np.zeros_like(table)
    np.add.at(grad, attrs['ids'], g)
    return [grad]


_register(
    OpKind.GATHER,
    lambda v, a: v[0][a['ids']],
    _gather_backward,
    _gather_check,
)


def _windows_check(shapes, attrs):
    (x,) = shapes
    if len(x) != 3:
        _fail(OpKind.WINDOWS, shapes, "expects (batch, length, dim)")
    if x[1] < attrs['width']:
        _fail(OpKind.WINDOWS, shapes, f"length below window width {attrs['width']}")


def _windows_forward(values, attrs):
    x = values[0]
    width = attrs['width']
    batch, length, dim = x.shape
    # (B, P, d, w) -> (B, P, w, d) so each row reads x_i ⊕ ... ⊕ x_{i+w-1}
    view = sliding_window_view(x, width, axis=1).transpose(0, 1, 3, 2)
    return np.ascontiguousarray(view).reshape(batch, length - width + 1, width * dim)


def _windows_backward(g, values, out, attrs):
    x = values[0]
    width = attrs['width']
    batch, length, dim = x.shape
    positions = length - width + 1
    parts = g.reshape(batch, positions, width, dim)
    gx = np.zeros_like(x)
    for offset in range(width):
        gx[:, offset:offset + positions] += parts[:, :, offset]
    return [gx]


_register(OpKind.WINDOWS, _windows_forward, _windows_backward, _windows_check)


def _reshape_check(shapes, attrs):
    (x,) = shapes
    try:
        np.empty(x, dtype=np.int8).reshape(attrs['shape'])
    except ValueError:
        _fail(OpKind.RESHAPE, shapes, f"cannot reshape to {attrs['shape']}")


_register(
    OpKind.RESHAPE,
    lambda v, a: v[0].reshape(a['shape']),
    lambda g, v, out, a: [g.reshape(v[0].shape)],
    _reshape_check,
)


def _take_check(shapes, attrs):
    (x,) = shapes
    if not 0 <= attrs['index'] < x[-1]:
        _fail(OpKind.TAKE, shapes, f"index {attrs['index']} outside last axis")


def _take_backward(g, values, out, attrs):
    gx = np.zeros_like(values[0])
    gx[..., attrs['index']] = g
    return [gx]


_register(OpKind.TAKE, lambda v, a: v[0][..., a['index']], _take_backward, _take_check)


# ----- smooth elementwise ---------------------------------------------------

def _softmax_forward(values, attrs):
    x = values[0]
    return np.exp(x - logsumexp(x, axis=attrs['axis'], keepdims=True))


def _softmax_backward(g, values, out, attrs):
    inner = (g * out).sum(axis=attrs['axis'], keepdims=True)
    return [out * (g - inner)]


_register(OpKind.SOFTMAX, _softmax_forward, _softmax_backward, _check_unary(OpKind.SOFTMAX))
_register(
    OpKind.SOFTPLUS,
    lambda v, a: np.logaddexp(0.0, v[0]),
    lambda g, v, out, a: [g * expit(v[0])],
    _check_unary(OpKind.SOFTPLUS),
)
_register(
    OpKind.SOFTSIGN,
    lambda v, a: v[0] / (1.0 + np.abs(v[0])),
    lambda g, v, out, a: [g / (1.0 + np.abs(v[0])) ** 2],
    _check_unary(OpKind.SOFTSIGN),
)
_register(OpKind.LOG, lambda v, a: np.log(v[0]), lambda g, v, out, a: [g / v[0]],
          _check_unary(OpKind.LOG))
_register(OpKind.EXP, lambda v, a: np.exp(v[0]), lambda g, v, out, a: [g * out],
          _check_unary(OpKind.EXP))
_register(OpKind.SQUARE, lambda v, a: v[0] * v[0], lambda g, v, out, a: [2.0 * v[0] * g],
          _check_unary(OpKind.SQUARE))
_register(OpKind.SCALE, lambda v, a: v[0] * a['factor'], lambda g, v, out, a: [g * a['factor']],
          _check_unary(OpKind.SCALE))


def _lse_backward(g, values, out, attrs):
    x = values[0]
    axis, keepdims = attrs['axis'], attrs['keepdims']
    if not keepdims:
        g = np.expand_dims(g, axis)
        out = np.expand_dims(out, axis)
    return [g * np.exp(x - out)]


_register(
    OpKind.LOGSUMEXP,
    lambda v, a: logsumexp(v[0], axis=a['axis'], keepdims=a['keepdims']),
    _lse_backward,
    _check_unary(OpKind.LOGSUMEXP),
)


# ----- binary with broadcasting ---------------------------------------------

_register(
    OpKind.ADD,
    lambda v, a: v[0] + v[1],
    lambda g, v, out, a: [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)],
    _check_broadcast(OpKind.ADD),
)
_register(
    OpKind.SUB,
    lambda v, a: v[0] - v[1],
    lambda g, v, out, a: [_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)],
    _check_broadcast(OpKind.SUB),
)
_register(
    OpKind.MUL,
    lambda v, a: v[0] * v[1],
    lambda g, v, out, a: [_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)],
    _check_broadcast(OpKind.MUL),
)
_register(
    OpKind.DIV,
    lambda v, a: v[0] / v[1],
    lambda g, v, out, a: [_unbroadcast(g / v[1], v[0].shape),
                          _unbroadcast(-g * v[0] / (v[1] * v[1]), v[1].shape)],
    _check_broadcast(OpKind.DIV),
)


# ----- reductions -----------------------------------------------------------

def _sum_backward(g, values, out, attrs):
    x = values[0]
    axis = attrs['axis']
    if axis is not None and not attrs['keepdims']:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape).copy()]


_register(
    OpKind.SUM,
    lambda v, a: np.asarray(v[0].sum(axis=a['axis'], keepdims=a['keepdims'])),
    _sum_backward,
    _check_unary(OpKind.SUM),
)


def _dropout_check(shapes, attrs):
    (x,) = shapes
    if tuple(x) != attrs['mask'].shape:
        _fail(OpKind.DROPOUT, shapes, f"mask shape {attrs['mask'].shape}")


_register(
    OpKind.DROPOUT,
    lambda v, a: v[0] * a['mask'],
    lambda g, v, out, a: [g * a['mask']],
    _dropout_check,
)


class Graph:
    """Tape of operations with a registry of named trainable leaves"""

    def __init__(self):
        self.nodes: List[Node] = []
        self.parameters: Dict[str, int] = {}

    # ----- leaves -----

    def parameter(self, name: str, value: np.ndarray) -> int:
        """Register a trainable leaf; the array is referenced, not copied"""
        if name in self.parameters:
            return self.parameters[name]
        if value.dtype != np.float64:
            raise ShapeError(f"parameter {name}: expected float64, got {value.dtype}")
        node_id = self._append(Node(len(self.nodes), None, (), value, name=name, trainable=True))
        self.parameters[name] = node_id
        return node_id

    def constant(self, value) -> int:
        array = np.asarray(value, dtype=np.float64)
        return self._append(Node(len(self.nodes), None, (), array))

    # ----- operations -----

    def forward_op(self, kind, inputs: Sequence[int], **attrs) -> int:
        """Record one operation and compute its value"""
        kind = OpKind(kind) if not isinstance(kind, OpKind) else kind
        for node_id in inputs:
            if not 0 <= node_id < len(self.nodes):
                raise ShapeError(f"{kind.value}: unknown input node {node_id}")
        op = _OPS[kind]
        values = [self.nodes[i].value for i in inputs]
        if op.check is not None:
            op.check([v.shape for v in values], attrs)
        out = np.asarray(op.forward(values, attrs), dtype=np.float64)
        return self._append(Node(len(self.nodes), kind, tuple(inputs), out, attrs))

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def shape(self, node_id: int) -> tuple:
        return self.nodes[node_id].value.shape

    def replay(self) -> None:
        """Recompute every operation from the current leaf values"""
        for node in self.nodes:
            if node.is_leaf:
                continue
            values = [self.nodes[i].value for i in node.inputs]
            node.value = np.asarray(_OPS[node.kind].forward(values, node.attrs), dtype=np.float64)

    def branch_signature(self) -> List[np.ndarray]:
        """Active pieces of every piecewise op, in tape order"""
        signature = []
        for node in self.nodes:
            if node.is_leaf or _OPS[node.kind].branch is None:
                continue
            values = [self.nodes[i].value for i in node.inputs]
            signature.append(np.asarray(_OPS[node.kind].branch(values, node.attrs)))
        return signature

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return node.id

    # ----- convenience wrappers -----

    def matvec(self, x: int, w: int) -> int:
        return self.forward_op(OpKind.MATVEC, (x, w))

    def linear(self, x: int, w: int, b: int) -> int:
        return self.add_bias(self.matvec(x, w), b)

    def add_bias(self, x: int, b: int) -> int:
        return self.forward_op(OpKind.ADD_BIAS, (x, b))

    def relu(self, x: int) -> int:
        return self.forward_op(OpKind.RELU, (x,))

    def max(self, x: int, axis: int) -> int:
        return self.forward_op(OpKind.MAX, (x,), axis=axis)

    def concat(self, xs: Sequence[int], axis: int = -1) -> int:
        return self.forward_op(OpKind.CONCAT, tuple(xs), axis=axis)

    def gather(self, table: int, ids) -> int:
        ids = np.asarray(ids, dtype=np.int64)
        rows = self.shape(table)[0] if len(self.shape(table)) == 2 else 0
        if ids.size and (ids.min() < 0 or ids.max() >= rows):
            raise DataError(f"gather: index outside [0, {rows}) for table {self.shape(table)}")
        return self.forward_op(OpKind.GATHER, (table,), ids=ids)

    def windows(self, x: int, width: int) -> int:
        return self.forward_op(OpKind.WINDOWS, (x,), width=width)

    def softmax(self, x: int, axis: int = -1) -> int:
        return self.forward_op(OpKind.SOFTMAX, (x,), axis=axis)

    def softplus(self, x: int) -> int:
        return self.forward_op(OpKind.SOFTPLUS, (x,))

    def softsign(self, x: int) -> int:
        return self.forward_op(OpKind.SOFTSIGN, (x,))

    def log(self, x: int) -> int:
        return self.forward_op(OpKind.LOG, (x,))

    def exp(self, x: int) -> int:
        return self.forward_op(OpKind.EXP, (x,))

    def logsumexp(self, x: int, axis: int = -1, keepdims: bool = False) -> int:
        return self.forward_op(OpKind.LOGSUMEXP, (x,), axis=axis, keepdims=keepdims)

    def add(self, a: int, b: int) -> int:
        return self.forward_op(OpKind.ADD, (a, b))

    def sub(self, a: int, b: int) -> int:
        return self.forward_op(OpKind.SUB, (a, b))

    def mul(self, a: int, b: int) -> int:
        return self.forward_op(OpKind.MUL, (a, b))

    def div(self, a: int, b: int) -> int:
        return self.forward_op(OpKind.DIV, (a, b))

    def abs(self, x: int) -> int:
        return self.forward_op(OpKind.ABS, (x,))

    def square(self, x: int) -> int:
        return self.forward_op(OpKind.SQUARE, (x,))

    def sum(self, x: int, axis: Optional[int] = None, keepdims: bool = False) -> int:
        return self.forward_op(OpKind.SUM, (x,), axis=axis, keepdims=keepdims)

    def scale(self, x: int, factor: float) -> int:
        return self.forward_op(OpKind.SCALE, (x,), factor=float(factor))

    def clip(self, x: int, lo: float, hi: float) -> int:
        return self.forward_op(OpKind.CLIP, (x,), lo=lo, hi=hi)

    def reshape(self, x: int, shape: tuple) -> int:
        return self.forward_op(OpKind.RESHAPE, (x,), shape=tuple(shape))

    def take(self, x: int, index: int) -> int:
        return self.forward_op(OpKind.TAKE, (x,), index=int(index))

    def dropout(self, x: int, rate: float, rng: Optional[np.random.Generator],
                training: bool) -> int:
        """Inverted dropout: identity unless training"""
        if not training or rate <= 0.0:
            return x
        if rng is None:
            raise ConfigError("dropout in training mode needs a random generator")
        keep = rng.random(self.shape(x)) >= rate
        mask = keep.astype(np.float64) / (1.0 - rate)
        return self.forward_op(OpKind.DROPOUT, (x,), mask=mask)


def backward(graph: Graph, loss: int) -> Dict[str, np.ndarray]:
    """Gradient of a scalar node with respect to every trainable parameter"""
    if graph.value(loss).size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {graph.shape(loss)}")

    grads: Dict[int, np.ndarray] = {loss: np.ones_like(graph.value(loss))}
    result = {name: np.zeros_like(graph.value(nid)) for name, nid in graph.parameters.items()}

    for node in reversed(graph.nodes[:loss + 1]):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.is_leaf:
            if node.trainable:
                result[node.name] += g
            continue
        values = [graph.nodes[i].value for i in node.inputs]
        input_grads = _OPS[node.kind].backward(g, values, node.value, node.attrs)
        for input_id, input_grad in zip(node.inputs, input_grads):
            if input_grad is None:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + input_grad
            else:
                grads[input_id] = np.asarray(input_grad, dtype=np.float64)
    return result


@dataclass
class GradCheckReport:
    """Finite-difference comparison of analytic gradients"""
    max_error: float
    per_parameter: Dict[str, float]
    checked: int
    excluded: int  # coordinates sitting on a nondifferentiable point

    def passed(self, threshold: float) -> bool:
        return self.max_error < threshold


def _same_branches(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check_report(graph: Graph, loss: int, step: float = 1e-5) -> GradCheckReport:
    """Central differences for every parameter coordinate, compared to ``backward``"""
    analytic = backward(graph, loss)
    base = graph.branch_signature()
    per_parameter: Dict[str, float] = {}
    checked = excluded = 0

    for name, node_id in graph.parameters.items():
        array = graph.value(node_id)
        worst = 0.0
        for index in np.ndindex(array.shape):
            original = array[index]
            array[index] = original + step
            graph.replay()
            f_plus, sig_plus = graph.value(loss).item(), graph.branch_signature()
            array[index] = original - step
            graph.replay()
            f_minus, sig_minus = graph.value(loss).item(), graph.branch_signature()
            array[index] = original

            if not (_same_branches(base, sig_plus) and _same_branches(base, sig_minus)):
                excluded += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            exact = float(analytic[name][index])
            worst = max(worst, abs(exact - numeric) / max(1.0, abs(exact)))
            checked += 1
        per_parameter[name] = worst

    graph.replay()
    max_error = max(per_parameter.values(), default=0.0)
    return GradCheckReport(max_error, per_parameter, checked, excluded)


def gradient_check(graph: Graph, loss: int, step: float = 1e-5) -> float:
    """Max relative error |analytic - numeric| / max(1, |analytic|) over all parameters"""
    return gradient_check_report(graph, loss, step).max_error
