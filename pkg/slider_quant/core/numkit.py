"""
Minimal dense tensor kernel with tape-based reverse-mode automatic differentiation.

Every value is a float32 numpy array. Ops record a backward closure on their result;
``backward`` walks the recorded graph in reverse topological order, fills ``grad`` on
every leaf that requires it and then clears the graph.
"""
import contextlib
import typing as t

import numpy as np

import slider_quant.core.logging as logging
from slider_quant.core.errors import ContractError, DimensionError, DomainError

logger = logging.get_logger(__name__)

DTYPE = np.float32

ArrayLike = t.Union[np.ndarray, float, int, t.Sequence]
BackwardFn = t.Callable[[np.ndarray], t.Sequence[t.Optional[np.ndarray]]]

_GRAD_ENABLED = True
_DEBUG = False


def set_debug(enabled: bool) -> None:
    """In debug mode every op result is checked for NaN/Inf."""
    global _DEBUG
    _DEBUG = enabled
    logger.debug(f"numkit debug mode: {enabled}")


@contextlib.contextmanager
def no_grad() -> t.Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise DomainError(f"Non-finite value in {what}")


class Tensor:
    """Dense float32 array with optional gradient tracking."""
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        array = np.array(data, dtype=DTYPE)
        _check_finite(array, "tensor construction")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: t.Optional[np.ndarray] = None
        self._parents: t.Tuple["Tensor", ...] = ()
        self._backward: t.Optional[BackwardFn] = None
        self._op = "leaf"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: t.Sequence["Tensor"], backward: BackwardFn,
                op: str = "op") -> "Tensor":
        """
        Wrap an op result. ``backward`` maps the output gradient to one gradient
        (or None) per parent, each shaped like that parent.
        """
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=DTYPE)
        if _DEBUG:
            _check_finite(out.data, f"result of {op}")
        out.grad = None
        out._op = op
        needs_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs_grad
        out._parents = tuple(parents) if needs_grad else ()
        out._backward = backward if needs_grad else None
        return out

    @property
    def shape(self) -> t.Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor.from_op(self.data, (), lambda g: (), op="detach")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Operators
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(as_tensor(other), self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(as_tensor(other), self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(as_tensor(other), self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(as_tensor(other), self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)


def as_tensor(value: t.Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: t.Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> t.Tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from e
    if shape != a.shape and shape != b.shape:
        raise DimensionError(f"{op}: one operand must have the full shape, got {a.shape} and {b.shape}")
    return shape


# Element-wise ops
def add(a: Tensor, b: t.Union[Tensor, ArrayLike]) -> Tensor:
    b = as_tensor(b)
    _broadcast_shape(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), op="add")


def sub(a: Tensor, b: t.Union[Tensor, ArrayLike]) -> Tensor:
    b = as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), op="sub")


def mul(a: Tensor, b: t.Union[Tensor, ArrayLike]) -> Tensor:
    b = as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return Tensor.from_op(a.data * b.data, (a, b),
                          lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                          op="mul")


def div(a: Tensor, b: t.Union[Tensor, ArrayLike]) -> Tensor:
    b = as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: divisor contains zero elements")
    out = a.data / b.data

    def backward(g: np.ndarray):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor.from_op(out, (a, b), backward, op="div")


ELEMENTWISE_OPS: t.Dict[str, t.Callable[[Tensor, t.Any], Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
}


def elementwise(op_code: str, a: Tensor, b: t.Union[Tensor, ArrayLike]) -> Tensor:
    """
    Dispatch an element-wise binary op by name.

    :param op_code: One of add, sub, mul, div
    :param a: Full-shape operand
    :param b: Same-shape operand, scalar, or a vector broadcast along the channel axis
    """
    if op_code not in ELEMENTWISE_OPS:
        raise ContractError(f"Unknown element-wise op: {op_code}")
    return ELEMENTWISE_OPS[op_code](a, b)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), op="exp")


def square(x: Tensor) -> Tensor:
    return Tensor.from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), op="square")


# Linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product. Supports ``[k×n]·[n×m]``, equal leading batch dimensions, and an
    N-d left operand against a 2-d right operand (a weight shared over the batch).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} · {b.shape}")
    shared_weight = b.ndim == 2 and a.ndim > 2
    if not shared_weight and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} · {b.shape}")

    out = np.matmul(a.data, b.data)

    def backward(g: np.ndarray):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if shared_weight:
            flat_a = a.data.reshape(-1, a.shape[-1])
            grad_b = flat_a.T @ g.reshape(-1, g.shape[-1])
        else:
            grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return grad_a, grad_b

    return Tensor.from_op(out, (a, b), backward, op="matmul")


# Reductions and shape ops
def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(out, (x,), backward, op="sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(reduce_sum(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape: t.Tuple[int, ...]) -> Tensor:
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), op="reshape")


def transpose(x: Tensor, axes: t.Optional[t.Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),),
                          op="transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    """Basic slicing; the gradient is scattered back into a zero buffer."""
    out = x.data[index]

    def backward(g: np.ndarray):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return Tensor.from_op(np.array(out), (x,), backward, op="getitem")


def concat(tensors: t.Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([x.data for x in tensors], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in tensors])[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(out, tensors, backward, op="concat")


# Neural-network ops
def softmax(x: Tensor, axis: int = -1, causal: bool = False) -> Tensor:
    """
    Max-subtracted softmax. With ``causal`` the last two axes are a [T×T] score matrix
    and entries above the diagonal get probability zero.
    """
    logits = x.data
    if causal:
        length = logits.shape[-1]
        mask = np.triu(np.ones((length, length), dtype=bool), k=1)
        logits = np.where(mask, -np.inf, logits)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward, op="softmax")


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    return Tensor.from_op(out, (x,), lambda g: (g * sig * (1.0 + x.data * (1.0 - sig)),), op="silu")


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Root-mean-square normalization over the last axis with a learnable gain vector."""
    if gain.shape != (x.shape[-1],):
        raise DimensionError(f"rmsnorm gain shape {gain.shape} does not match features {x.shape[-1]}")
    inv_rms = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    normed = x.data * inv_rms
    out = normed * gain.data

    def backward(g: np.ndarray):
        grad_gain = (g * normed).reshape(-1, x.shape[-1]).sum(axis=0)
        gg = g * gain.data
        grad_x = inv_rms * (gg - normed * np.mean(gg * normed, axis=-1, keepdims=True))
        return grad_x, grad_gain

    return Tensor.from_op(out, (x, gain), backward, op="rmsnorm")


def rotate_half(a: np.ndarray) -> np.ndarray:
    half = a.shape[-1] // 2
    return np.concatenate([-a[..., half:], a[..., :half]], axis=-1)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position embedding over the last axis (half-split convention)."""
    out = x.data * cos + rotate_half(x.data) * sin

    def backward(g: np.ndarray):
        gs = g * sin
        half = g.shape[-1] // 2
        # transpose of rotate_half
        rotated = np.concatenate([gs[..., half:], -gs[..., :half]], axis=-1)
        return (g * cos + rotated,)

    return Tensor.from_op(out, (x,), backward, op="rope")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)

    def backward(g: np.ndarray):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (grad,)

    return Tensor.from_op(weight.data[ids], (weight,), backward, op="embedding")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` [..., V]."""
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    targets = np.asarray(targets).reshape(-1)
    if flat.shape[0] != targets.shape[0]:
        raise DimensionError(f"cross_entropy: {flat.shape[0]} positions but {targets.shape[0]} targets")
    shifted = flat - flat.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    count = targets.shape[0]
    loss = -log_probs[np.arange(count), targets].mean()

    def backward(g: np.ndarray):
        grad = np.exp(log_probs)
        grad[np.arange(count), targets] -= 1.0
        return ((grad * (g / count)).reshape(logits.shape),)

    return Tensor.from_op(np.array(loss), (logits,), backward, op="cross_entropy")


def mse(a: Tensor, b: t.Union[Tensor, np.ndarray]) -> Tensor:
    """Mean squared difference over all elements."""
    return reduce_mean(square(sub(a, as_tensor(b))))


# Backward pass
def _topological_order(root: Tensor) -> t.List[Tensor]:
    order: t.List[Tensor] = []
    visited: t.Set[int] = set()
    stack: t.List[t.Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, wrt: t.Sequence[Tensor] = ()) -> None:
    """
    Populate ``grad`` on every leaf reachable from ``loss`` that requires it, then
    clear the recorded graph. Leaves named in ``wrt`` that the loss does not depend on
    get a zero gradient instead of keeping ``None``.

    :param loss: Scalar tensor on a recorded graph
    :param wrt: Leaves that must carry a gradient afterwards
    :raises ContractError: If ``loss`` is not a scalar
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        _accumulate(loss)
    for leaf in wrt:
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data, dtype=DTYPE)


def _accumulate(loss: Tensor) -> None:
    order = _topological_order(loss)
    grads: t.Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad:
                g = np.zeros_like(node.data) if g is None else g
                node.grad = g.astype(DTYPE) if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    # Consume the graph; intermediate results become plain constants.
    for node in order:
        if node._backward is not None:
            node.requires_grad = False
        node._parents = ()
        node._backward = None
