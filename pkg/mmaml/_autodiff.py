import threading
from contextlib import contextmanager
from enum import Enum
from typing import (
    Any,
    Callable,
    ContextManager,
    Dict,
    Iterator,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
    cast,
)

import numpy as np

__all__ = ("Node", "OpKind", "ShapeError", "NonFiniteError", "GradientError",
           "leaf", "constant", "tensor_op", "grad", "no_grad", "is_grad_enabled",
           "matmul", "add", "sub", "mul", "scale", "relu", "tanh", "sigmoid", "sin", "cos",
           "exp", "abs_", "square", "mean", "sum_", "concat", "softmax", "broadcast",
           "transpose", "reshape", "slice_", "check_gradients", "GradientCheckResult",)

Shape = Tuple[int, ...]
ArrayLike = Union[np.ndarray, float, Sequence[Any]]
BackwardFn = Callable[["Node", "Node"], Sequence[Optional["Node"]]]


class ShapeError(ValueError):
    """
    Raised when operand shapes do not conform for the requested op.

    The message names the op kind and every operand shape involved.
    """

    def __init__(self, op: str, *shapes: Shape, detail: str = "") -> None:
        self.op = op
        self.shapes = shapes
        rendered = " and ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: incompatible shapes {rendered}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class NonFiniteError(ArithmeticError):
    """
    Raised when an op produces NaN or infinite values.

    Non-finite values are never stored in a node; the op that produced
    them aborts instead.
    """

    def __init__(self, op: str, shape: Shape) -> None:
        self.op = op
        self.shape = shape
        super().__init__(f"{op}: produced non-finite values (shape {tuple(shape)})")


class GradientError(ValueError):
    """
    Raised when a gradient is requested for something that is not differentiable,
    such as a non-scalar output.
    """
    pass


class OpKind(str, Enum):
    LEAF = "leaf"
    MATMUL = "matmul"
    ADD = "add"
    SUB = "sub"
    MUL = "elementwise_mul"
    SCALE = "scale"
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    SIN = "sin"
    COS = "cos"
    EXP = "exp"
    ABS = "abs"
    SQUARE = "square"
    MEAN = "mean"
    SUM = "sum"
    CONCAT = "concat"
    SOFTMAX = "softmax_over_axis"
    BROADCAST = "broadcast"
    TRANSPOSE = "transpose"
    RESHAPE = "reshape"
    SLICE = "slice"


_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return cast(bool, getattr(_grad_state, "enabled", True))


@contextmanager
def _grad_mode(enabled: bool) -> Iterator[None]:
    previous = is_grad_enabled()
    _grad_state.enabled = enabled
    try:
        yield
    finally:
        _grad_state.enabled = previous


def no_grad() -> ContextManager[None]:
    """
    Disable graph recording for the current thread.

    Nodes created inside the block are constants: they keep their value but
    have no parents, so nothing downstream can differentiate through them.
    """
    return _grad_mode(False)


class Node:
    """
    A value in the computation graph.

    The value is an immutable row-major float64 array computed eagerly when
    the node is created. Nodes that require gradients keep references to
    their inputs and a backward rule; all other nodes are plain constants.
    """

    __slots__ = ("op", "inputs", "value", "requires_grad", "_backward", "__weakref__")

    def __init__(self, op: OpKind, value: np.ndarray, *,
                 inputs: Tuple["Node", ...] = (),
                 backward: Optional[BackwardFn] = None,
                 requires_grad: bool = False) -> None:
        value.setflags(write=False)
        self.op = op
        self.value = value
        self.inputs = inputs
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self) -> Shape:
        return cast(Shape, self.value.shape)

    @property
    def ndim(self) -> int:
        return int(self.value.ndim)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Node":
        return Node(OpKind.LEAF, self.value)

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return mul(self, other)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)

    def __neg__(self) -> "Node":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return (f"<Node op={self.op.value!r} shape={self.shape} "
                f"requires_grad={self.requires_grad!r}>")


def _as_array(value: ArrayLike) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def leaf(value: ArrayLike, *, requires_grad: bool = True) -> Node:
    """
    Create a graph input (a parameter or a differentiable input).

    The value is copied, so later changes to the caller's array never leak
    into the graph.
    """
    array = _as_array(value)
    _check_finite(OpKind.LEAF, array)
    return Node(OpKind.LEAF, array, requires_grad=requires_grad)


def constant(value: ArrayLike) -> Node:
    """A leaf that never requires a gradient."""
    return leaf(value, requires_grad=False)


def _check_finite(op: OpKind, value: np.ndarray) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteError(op.value, value.shape)


def _make(op: OpKind, value: np.ndarray, inputs: Tuple[Node, ...],
          backward: BackwardFn) -> Node:
    value = np.asarray(value, dtype=np.float64)
    _check_finite(op, value)
    if is_grad_enabled() and any(x.requires_grad for x in inputs):
        return Node(op, value, inputs=inputs, backward=backward, requires_grad=True)
    return Node(op, value)


# Broadcasting

def _binary_shape(op: OpKind, a: Node, b: Node) -> Shape:
    # Only a vector against a matrix along its last axis is broadcast implicitly
    if a.shape == b.shape:
        return a.shape
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return a.shape
    if a.ndim == 1 and b.ndim == 2 and b.shape[1] == a.shape[0]:
        return b.shape
    raise ShapeError(op.value, a.shape, b.shape)


def _unbroadcast(g: Node, shape: Shape) -> Node:
    if g.shape == shape:
        return g
    return sum_(g, axis=0)


# Elementwise binary ops

def add(a: Node, b: Node) -> Node:
    """
    Elementwise sum. A vector is broadcast along the last axis of a matrix.

    :raises ShapeError: If the shapes are incompatible.
    """
    _binary_shape(OpKind.ADD, a, b)

    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(OpKind.ADD, a.value + b.value, (a, b), backward)


def sub(a: Node, b: Node) -> Node:
    """Elementwise difference ``a - b``, broadcast like :func:`add`."""
    _binary_shape(OpKind.SUB, a, b)

    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(scale(g, -1.0), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(OpKind.SUB, a.value - b.value, (a, b), backward)


def mul(a: Node, b: Node) -> Node:
    """Elementwise product, broadcast like :func:`add`."""
    _binary_shape(OpKind.MUL, a, b)

    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(OpKind.MUL, a.value * b.value, (a, b), backward)


def scale(a: Node, factor: float) -> Node:
    """Multiply by a constant scalar."""
    factor = float(factor)

    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (scale(g, factor),)

    return _make(OpKind.SCALE, a.value * factor, (a,), backward)


def matmul(a: Node, b: Node) -> Node:
    """
    Matrix product of two 2-D nodes.

    :param a: An ``(n, k)`` node.
    :param b: A ``(k, m)`` node.
    :return: The ``(n, m)`` product.
    :raises ShapeError: If either operand is not a matrix or the inner sizes differ.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(OpKind.MATMUL.value, a.shape, b.shape)

    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make(OpKind.MATMUL, a.value @ b.value, (a, b), backward)


# Elementwise unary ops

def relu(a: Node) -> Node:
    """Elementwise ``max(a, 0)``; the gradient at zero is zero."""
    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (mul(g, constant(a.value > 0)),)

    return _make(OpKind.RELU, np.maximum(a.value, 0.0), (a,), backward)


def tanh(a: Node) -> Node:
    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (mul(g, sub(constant(np.ones(out.shape)), square(out))),)

    return _make(OpKind.TANH, np.tanh(a.value), (a,), backward)


def sigmoid(a: Node) -> Node:
    """Elementwise logistic function."""
    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (mul(g, mul(out, sub(constant(np.ones(out.shape)), out))),)

    # Split by sign so exp never overflows
    x = a.value
    value = np.empty_like(x)
    positive = x >= 0
    value[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    value[~positive] = exp_x / (1.0 + exp_x)
    return _make(OpKind.SIGMOID, value, (a,), backward)


def sin(a: Node) -> Node:
    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (mul(g, cos(a)),)

    return _make(OpKind.SIN, np.sin(a.value), (a,), backward)


def cos(a: Node) -> Node:
    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (scale(mul(g, sin(a)), -1.0),)

    return _make(OpKind.COS, np.cos(a.value), (a,), backward)


def exp(a: Node) -> Node:
    """
    Elementwise exponential.

    :raises NonFiniteError: If the result overflows.
    """
    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (mul(g, out),)

    with np.errstate(over="ignore"):
        value = np.exp(a.value)
    return _make(OpKind.EXP, value, (a,), backward)


def abs_(a: Node) -> Node:
    """Elementwise absolute value; the gradient at zero is zero."""
    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (mul(g, constant(np.sign(a.value))),)

    return _make(OpKind.ABS, np.abs(a.value), (a,), backward)


def square(a: Node) -> Node:
    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (mul(g, scale(a, 2.0)),)

    with np.errstate(over="ignore"):
        value = np.square(a.value)
    return _make(OpKind.SQUARE, value, (a,), backward)


# Reductions

def _normalize_axis(op: OpKind, a: Node, axis: Optional[int]) -> Optional[int]:
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(op.value, a.shape, detail=f"axis {axis} out of range")
    return axis % a.ndim


def _expand_reduced(g: Node, shape: Shape, axis: Optional[int], keepdims: bool) -> Node:
    if axis is None:
        return broadcast(reshape(g, ()), shape)
    if not keepdims:
        kept = list(shape)
        kept[axis] = 1
        g = reshape(g, tuple(kept))
    return broadcast(g, shape)


def sum_(a: Node, axis: Optional[int] = None, *, keepdims: bool = False) -> Node:
    """
    Sum over one axis, or over all elements when ``axis`` is None.

    :param keepdims: Keep the reduced axis with size 1.
    """
    axis = _normalize_axis(OpKind.SUM, a, axis)

    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    value = np.sum(a.value, axis=axis, keepdims=keepdims if axis is not None else False)
    return _make(OpKind.SUM, np.asarray(value), (a,), backward)


def mean(a: Node, axis: Optional[int] = None, *, keepdims: bool = False) -> Node:
    """Mean over one axis or all elements, like :func:`sum_`."""
    axis = _normalize_axis(OpKind.MEAN, a, axis)
    count = a.value.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError(OpKind.MEAN.value, a.shape, detail="mean of an empty tensor")

    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (scale(_expand_reduced(g, a.shape, axis, keepdims), 1.0 / count),)

    value = np.mean(a.value, axis=axis, keepdims=keepdims if axis is not None else False)
    return _make(OpKind.MEAN, np.asarray(value), (a,), backward)


def softmax(a: Node, axis: int = -1) -> Node:
    """
    Normalized exponentials along ``axis``; each slice sums to one.

    Inputs are shifted by their maximum along ``axis`` before exponentiating.
    """
    norm_axis = _normalize_axis(OpKind.SOFTMAX, a, axis)
    assert norm_axis is not None

    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        weighted = sum_(mul(out, g), axis=norm_axis, keepdims=True)
        return (mul(out, sub(g, broadcast(weighted, out.shape))),)

    shifted = a.value - np.max(a.value, axis=norm_axis, keepdims=True)
    exps = np.exp(shifted)
    value = exps / np.sum(exps, axis=norm_axis, keepdims=True)
    return _make(OpKind.SOFTMAX, value, (a,), backward)


# Structural ops

def broadcast(a: Node, shape: Shape) -> Node:
    """
    Expand a node to a larger shape.

    Allowed expansions: a scalar to any shape, a vector to a matrix along the
    last axis, and size-1 axes of a same-rank tensor (as left by reductions
    with ``keepdims``).
    """
    shape = tuple(int(s) for s in shape)
    if a.shape == shape:
        return a
    if a.ndim == 0:
        mode = "scalar"
    elif a.ndim == 1 and len(shape) == 2 and shape[1] == a.shape[0]:
        mode = "vector"
    elif a.ndim == len(shape) and all(s == t or s == 1 for s, t in zip(a.shape, shape)):
        mode = "keepdims"
    else:
        raise ShapeError(OpKind.BROADCAST.value, a.shape, shape)

    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        if mode == "scalar":
            return (sum_(g),)
        if mode == "vector":
            return (sum_(g, axis=0),)
        reduced = g
        for axis, size in enumerate(a.shape):
            if size == 1 and shape[axis] != 1:
                reduced = sum_(reduced, axis=axis, keepdims=True)
        return (reduced,)

    return _make(OpKind.BROADCAST, np.broadcast_to(a.value, shape).copy(), (a,), backward)


def transpose(a: Node) -> Node:
    """Swap the axes of a matrix."""
    if a.ndim != 2:
        raise ShapeError(OpKind.TRANSPOSE.value, a.shape, detail="expected a matrix")

    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (transpose(g),)

    return _make(OpKind.TRANSPOSE, a.value.T.copy(), (a,), backward)


def reshape(a: Node, shape: Shape) -> Node:
    """
    Same elements in a new shape.

    :raises ShapeError: If the element counts differ.
    """
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.value.size:
        raise ShapeError(OpKind.RESHAPE.value, a.shape, shape)

    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return (reshape(g, a.shape),)

    return _make(OpKind.RESHAPE, a.value.reshape(shape), (a,), backward)


def slice_(a: Node, start: int, stop: int, *, axis: int = -1) -> Node:
    """
    Elements ``start:stop`` along ``axis``.

    :raises ShapeError: If the range is empty or out of bounds.
    """
    norm_axis = _normalize_axis(OpKind.SLICE, a, axis)
    assert norm_axis is not None
    size = a.shape[norm_axis]
    if not 0 <= start < stop <= size:
        raise ShapeError(OpKind.SLICE.value, a.shape,
                         detail=f"range [{start}, {stop}) on axis {norm_axis}")

    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        parts = []
        if start > 0:
            before = list(a.shape)
            before[norm_axis] = start
            parts.append(constant(np.zeros(before)))
        parts.append(g)
        if stop < size:
            after = list(a.shape)
            after[norm_axis] = size - stop
            parts.append(constant(np.zeros(after)))
        return (concat(parts, axis=norm_axis) if len(parts) > 1 else g,)

    index = [slice(None)] * a.ndim
    index[norm_axis] = slice(start, stop)
    return _make(OpKind.SLICE, a.value[tuple(index)].copy(), (a,), backward)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    """
    Join nodes along ``axis``.

    :raises ShapeError: If the list is empty or the other axes disagree.
    """
    if not nodes:
        raise ShapeError(OpKind.CONCAT.value, detail="nothing to concatenate")
    first = nodes[0]
    norm_axis = _normalize_axis(OpKind.CONCAT, first, axis)
    assert norm_axis is not None
    for node in nodes[1:]:
        same_rank = node.ndim == first.ndim
        if not same_rank or any(s != t for i, (s, t) in enumerate(zip(node.shape, first.shape))
                                if i != norm_axis):
            raise ShapeError(OpKind.CONCAT.value, first.shape, node.shape)

    bounds = np.cumsum([0] + [n.shape[norm_axis] for n in nodes])

    def backward(g: Node, out: Node) -> Sequence[Optional[Node]]:
        return tuple(slice_(g, int(lo), int(hi), axis=norm_axis) if n.requires_grad else None
                     for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]))

    value = np.concatenate([n.value for n in nodes], axis=norm_axis)
    return _make(OpKind.CONCAT, value, tuple(nodes), backward)


_OPS: Dict[OpKind, Callable[..., Node]] = {
    OpKind.MATMUL: matmul,
    OpKind.ADD: add,
    OpKind.SUB: sub,
    OpKind.MUL: mul,
    OpKind.SCALE: scale,
    OpKind.RELU: relu,
    OpKind.TANH: tanh,
    OpKind.SIGMOID: sigmoid,
    OpKind.SIN: sin,
    OpKind.COS: cos,
    OpKind.EXP: exp,
    OpKind.ABS: abs_,
    OpKind.SQUARE: square,
    OpKind.MEAN: mean,
    OpKind.SUM: sum_,
    OpKind.SOFTMAX: softmax,
    OpKind.BROADCAST: broadcast,
    OpKind.TRANSPOSE: transpose,
    OpKind.RESHAPE: reshape,
    OpKind.SLICE: slice_,
}


def tensor_op(kind: Union[OpKind, str], operands: Sequence[Node], **attrs: Any) -> Node:
    """
    Apply a primitive op by its kind tag.

    :param kind: The op kind, either an :class:`OpKind` or its string value.
    :param operands: Input nodes. ``concat`` takes all of them as one list; the
                     other ops take them positionally.
    :param attrs: Op attributes such as ``axis``, ``shape`` or ``factor``.
    :return: The new node with its forward value already computed.
    :raises ShapeError: If the operand shapes do not conform for the op.
    """
    op = OpKind(kind)
    if op is OpKind.CONCAT:
        return concat(operands, **attrs)
    if op is OpKind.LEAF:
        raise GradientError("leaf nodes are created with leaf() or constant()")
    return _OPS[op](*operands, **attrs)


# Reverse pass

def _topological_order(output: Node) -> List[Node]:
    order: List[Node] = []
    visited = set()
    stack: List[Tuple[Node, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def grad(output: Node, wrt: Sequence[Node], *,
         create_graph: bool = False) -> List[Any]:
    """
    Compute the gradient of a scalar node with respect to other nodes.

    Gradients are accumulated by walking the recorded graph in reverse
    topological order. Each backward rule is itself written with graph ops,
    so with ``create_graph=True`` the returned gradients are nodes that can
    be differentiated again.

    :param output: A scalar-shaped node.
    :param wrt: Nodes to differentiate against. A node the output does not
                depend on gets a zero gradient.
    :param create_graph: Return differentiable nodes instead of plain arrays.
    :return: One gradient per ``wrt`` entry, in order: ``Node`` objects when
             ``create_graph`` is set, read-only ``numpy`` arrays otherwise.
    :raises GradientError: If ``output`` is not scalar-shaped.
    """
    if output.shape != ():
        raise GradientError(f"grad: output must be scalar-shaped, got shape {output.shape}")

    grads: Dict[int, Node] = {}
    with _grad_mode(create_graph):
        if output.requires_grad:
            grads[id(output)] = constant(np.ones(()))
            for node in reversed(_topological_order(output)):
                g = grads.get(id(node))
                if g is None or node._backward is None:
                    continue
                parent_grads = node._backward(g, node)
                for parent, parent_grad in zip(node.inputs, parent_grads):
                    if parent_grad is None or not parent.requires_grad:
                        continue
                    previous = grads.get(id(parent))
                    grads[id(parent)] = parent_grad if previous is None \
                        else add(previous, parent_grad)

        results: List[Node] = []
        for node in wrt:
            g = grads.get(id(node))
            results.append(g if g is not None else constant(np.zeros(node.shape)))

    if create_graph:
        return results
    return [r.value for r in results]


# Finite differences

class GradientCheckResult(NamedTuple):
    analytic: List[np.ndarray]
    numeric: List[np.ndarray]
    max_abs_error: float
    max_rel_error: float

    def passed(self, rtol: float = 1e-4, atol: float = 1e-7) -> bool:
        return self.max_rel_error <= rtol or self.max_abs_error <= atol


def check_gradients(fn: Callable[..., Node], inputs: Sequence[ArrayLike], *,
                    eps: float = 1e-5, atol: float = 1e-7) -> GradientCheckResult:
    """
    Compare analytic gradients of a scalar function with central finite differences.

    Entries whose absolute discrepancy is below ``atol`` do not count towards
    the relative error, so gradients that are zero up to rounding pass.
    """
    arrays = [_as_array(x) for x in inputs]
    nodes = [leaf(a) for a in arrays]
    analytic = [np.array(g) for g in grad(fn(*nodes), nodes)]

    numeric = []
    with no_grad():
        for index, array in enumerate(arrays):
            estimate = np.zeros_like(array)
            for position in np.ndindex(array.shape):
                shifted = [a.copy() for a in arrays]
                shifted[index][position] = array[position] + eps
                upper = fn(*[constant(a) for a in shifted]).item()
                shifted[index][position] = array[position] - eps
                lower = fn(*[constant(a) for a in shifted]).item()
                estimate[position] = (upper - lower) / (2 * eps)
            numeric.append(estimate)

    max_abs, max_rel = 0.0, 0.0
    for a, n in zip(analytic, numeric):
        error = np.abs(a - n)
        if error.size == 0:
            continue
        max_abs = max(max_abs, float(error.max()))
        scale_ = np.maximum(np.abs(a), np.abs(n))
        counted = error > atol
        if counted.any():
            max_rel = max(max_rel, float((error[counted] / scale_[counted]).max()))
    return GradientCheckResult(analytic, numeric, max_abs, max_rel)
