"""Tensor Core - dense float tensors with reverse-mode automatic differentiation

Every hidden sequence in the model is a 2-D ``Tensor`` of shape (T, D). Operations
record their parents and a backward rule; ``backward`` walks the recorded graph in
reverse topological order and accumulates gradients into every tensor that
requires them.

Model state is float32. Operations follow numpy dtype promotion, so substituting a
float64 array into a tensor (as ``finite_difference_gradient`` does) runs the whole
forward computation in float64.
"""

import contextlib
import logging
import math
from dataclasses import fields
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

# Flipped by no_grad(); single-threaded by contract
_GRAD_ENABLED = True

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Scalar = Union[int, float]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block"""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense row-major array with an optional gradient slot.

    Attributes:
        data: numpy array holding the values (float32 unless promoted)
        requires_grad: whether backward should populate ``grad``
        grad: accumulated gradient, same shape as ``data``, or None
        op: name of the operation that produced this tensor ("leaf" for inputs)
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
    ):
        array = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        if any(size <= 0 for size in array.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {array.shape}")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: BackwardFn,
        op: str,
    ) -> "Tensor":
        """Wrap the result of an operation, recording it when any parent needs grad.

        ``backward`` receives the upstream gradient and returns one gradient (or None)
        per parent, in order.
        """
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        tracked = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = tuple(parents) if tracked else ()
        out._backward = backward if tracked else None
        return out

    # --- introspection ---

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    # --- operators ---

    def __add__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Scalar) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Scalar) -> "Tensor":
        return sub(_lift(other, self), self)

    def __mul__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Scalar) -> "Tensor":
        return mul(self, other)

    def __truediv__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key: Any) -> "Tensor":
        return index(self, key)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self) -> None:
        backward(self)


def _lift(value: Union[Tensor, Scalar, np.ndarray], like: Tensor) -> Tensor:
    """Constants join the graph as non-differentiable tensors of ``like``'s dtype"""
    if isinstance(value, Tensor):
        return value
    constant = Tensor.__new__(Tensor)
    constant.data = np.asarray(value, dtype=like.dtype)
    constant.requires_grad = False
    constant.grad = None
    constant.op = "const"
    constant._parents = ()
    constant._backward = None
    return constant


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# === Elementwise arithmetic ===


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    b = _lift(b, a)
    _broadcast_shape(a, b, "add")

    def _backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), _backward, "add")


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    b = _lift(b, a)
    _broadcast_shape(a, b, "sub")

    def _backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), _backward, "sub")


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    b = _lift(b, a)
    _broadcast_shape(a, b, "mul")

    def _backward(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), _backward, "mul")


def div(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    b = _lift(b, a)
    _broadcast_shape(a, b, "div")

    def _backward(g: np.ndarray):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor.from_op(a.data / b.data, (a, b), _backward, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# === Shape and reduction ===


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a (M×K) and b (K×N).

    Raises:
        DimensionError: operands are not 2-D or the inner dimensions differ
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _backward(g: np.ndarray):
        return g @ b.data.T, a.data.T @ g

    return Tensor.from_op(a.data @ b.data, (a, b), _backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.shape}")
    return Tensor.from_op(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}")
    return Tensor.from_op(out.copy(), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def index(a: Tensor, key: Any) -> Tensor:
    """Basic (slice/integer) indexing; gradients scatter back into the source slots"""
    out = np.array(a.data[key])

    def _backward(g: np.ndarray):
        full = np.zeros_like(a.data, dtype=g.dtype)
        full[key] = g
        return (full,)

    return Tensor.from_op(out, (a,), _backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    shapes = [t.shape for t in tensors]
    reference = list(shapes[0])
    for shape in shapes[1:]:
        other = list(shape)
        if len(other) != len(reference) or any(
            other[i] != reference[i] for i in range(len(reference)) if i != axis
        ):
            raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}")
    sizes = [s[axis] for s in shapes]
    boundaries = np.cumsum(sizes)[:-1]

    def _backward(g: np.ndarray):
        return tuple(np.split(g, boundaries, axis=axis))

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor.from_op(out, tuple(tensors), _backward, "concat")


def tensor_sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def _backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(out, (a,), _backward, "sum")


def tensor_mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))

    def _backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor.from_op(out, (a,), _backward, "mean")


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)"""
    ids = np.asarray(ids, dtype=np.int64)

    def _backward(g: np.ndarray):
        full = np.zeros_like(table.data, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor.from_op(table.data[ids], (table,), _backward, "take_rows")


# === Fused neural-network ops ===


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilised by subtracting each row's maximum.

    Every output row is nonnegative and sums to 1.
    """
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows needs a 2-D tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def _backward(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor.from_op(out, (x,), _backward, "softmax_rows")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def _gelu_value(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_K * x * x * x)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_K * x * x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation"""
    # looked up at call time so the rule can be swapped in tests
    return Tensor.from_op(
        _gelu_value(x.data), (x,), lambda g: (g * _gelu_grad(x.data),), "gelu"
    )


def layer_norm_rows(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """(x − mean) / sqrt(var + eps) ∘ gamma + beta per row, population variance"""
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"layer_norm: input {x.shape} does not match gamma {gamma.shape} / beta {beta.shape}"
        )
    width = x.shape[1]
    centered = x.data - x.data.mean(axis=1, keepdims=True)
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def _backward(g: np.ndarray):
        dxhat = g * gamma.data
        dx = (inv_std / width) * (
            width * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    out = xhat * gamma.data + beta.data
    return Tensor.from_op(out, (x, gamma, beta), _backward, "layer_norm")


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Batch-mean softmax cross-entropy of (B×C) logits against integer labels"""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} do not match labels {labels.shape}"
        )
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ContractError(f"cross_entropy: labels outside [0, {logits.shape[1]})")
    batch = logits.shape[0]
    rows = np.arange(batch)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = np.asarray(-log_probs[rows, labels].mean(), dtype=logits.dtype)

    def _backward(g: np.ndarray):
        probs = np.exp(log_probs)
        probs[rows, labels] -= 1.0
        return (g * probs / batch,)

    return Tensor.from_op(loss, (logits,), _backward, "cross_entropy")


# === Graph traversal ===


class ComputationRecord:
    """Topologically ordered log of the operations that produced a tensor.

    Parents always precede the tensors computed from them, so walking ``nodes`` in
    reverse visits each operation exactly once after all of its consumers.
    """

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationRecord":
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    @property
    def operations(self) -> List[str]:
        return [node.op for node in self.nodes]

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad ancestor of a scalar loss.

    Gradients accumulate additively across calls until zeroed.

    Raises:
        ContractError: ``loss`` is not a single-element tensor
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor that does not require grad")

    record = ComputationRecord.trace(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            g = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


# === Parameter containers ===


def _walk(value: Any, name: str) -> Iterator[Tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, ParameterGroup):
        yield from value.named_parameters(prefix=f"{name}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{name}.{key}")


class ParameterGroup:
    """Mixin for parameter dataclasses: traverses nested tensors by dotted name"""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for f in fields(self):
            yield from _walk(getattr(self, f.name), f"{prefix}{f.name}")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


# === Finite-difference oracle ===


def _scalar_value(value: Union[Tensor, float, np.ndarray]) -> float:
    array = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
    if array.size != 1:
        raise ContractError(f"finite differences need a scalar function, got shape {array.shape}")
    return float(array.reshape(-1)[0])


def finite_difference_gradient(
    f: Callable[[Tensor], Union[Tensor, float]],
    x: Tensor,
    epsilon: float = 1e-4,
) -> Tensor:
    """Central-difference gradient of scalar ``f`` with respect to ``x``, in float64.

    Each element of ``x`` is perturbed by ±epsilon in a float64 copy that is placed
    into ``x.data`` while ``f`` runs, so ``x`` may be an input or a parameter that
    ``f`` closes over. The original data is restored afterwards.

    Args:
        f: deterministic function returning a single-element tensor or float
        x: tensor to differentiate with respect to
        epsilon: perturbation step, > 0

    Returns:
        float64 tensor shaped like ``x``
    """
    if epsilon <= 0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    original = x.data
    base = original.astype(np.float64)
    grad = np.zeros_like(base)
    try:
        with no_grad():
            for idx in np.ndindex(base.shape):
                saved = base[idx]
                base[idx] = saved + epsilon
                x.data = base
                plus = _scalar_value(f(x))
                base[idx] = saved - epsilon
                minus = _scalar_value(f(x))
                base[idx] = saved
                grad[idx] = (plus - minus) / (2.0 * epsilon)
    finally:
        x.data = original
    return Tensor(grad, dtype=np.float64)


def relative_error(a: Union[Tensor, np.ndarray], b: Union[Tensor, np.ndarray]) -> float:
    """||a − b|| / max(||a||, ||b||), both in float64"""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"relative_error: shapes {a.shape} and {b.shape} differ")
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)
