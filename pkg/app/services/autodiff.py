"""
Reverse-Mode Differentiation Core

Dense float64 tensors backed by NumPy and an append-only tape of executed
primitives. Every primitive is a ``Function`` subclass with a ``forward`` and
an exact ``backward``; ``Tape.backward`` walks the record in reverse order,
which is a valid topological order because nodes are appended as they run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.exceptions import NumericError, ShapeError

LAYER_NORM_EPS = 1e-5

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class Tensor:
    """
    A dense float64 value, optionally tracked on a tape.

    Attributes:
        value: Row-major float64 array
        tape: Owning tape, ``None`` for constants
        index: Position of the producing node on the tape
        name: Leaf name (parameters only)
    """

    __slots__ = ("value", "tape", "index", "name")

    def __init__(
        self,
        value: ArrayLike,
        tape: Optional["Tape"] = None,
        index: Optional[int] = None,
        name: Optional[str] = None,
    ) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None and self.index is not None

    @property
    def grad(self) -> Optional[np.ndarray]:
        if not self.tracked:
            return None
        return self.tape.grads.get(self.index)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: float) -> "Tensor":
        if not np.isscalar(other):
            raise NumericError("division is only defined by a scalar constant")
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: Any) -> "Tensor":
        return matmul(self, other)


@dataclass
class Node:
    """One executed primitive (or a leaf when ``function`` is None)."""

    function: Optional["Function"]
    inputs: Tuple[Optional[int], ...]
    shape: Tuple[int, ...]
    name: Optional[str] = None


@dataclass
class Tape:
    """
    Append-only record of differentiable operations.

    Attributes:
        nodes: Executed nodes in execution order
        grads: Per-node gradient accumulators filled by ``backward``
    """

    nodes: List[Node] = field(default_factory=list)
    grads: Dict[int, np.ndarray] = field(default_factory=dict)

    def leaf(self, value: ArrayLike, name: Optional[str] = None) -> Tensor:
        """Register a differentiable input (typically a parameter)."""
        array = np.array(value, dtype=np.float64)
        self.nodes.append(Node(None, (), array.shape, name))
        return Tensor(array, self, len(self.nodes) - 1, name)

    def leaves(self, params: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
        return {name: self.leaf(value, name) for name, value in params.items()}

    def record(self, function: "Function", inputs: Sequence[Tensor], value: np.ndarray) -> Tensor:
        refs = tuple(t.index if t.tape is self else None for t in inputs)
        self.nodes.append(Node(function, refs, value.shape))
        return Tensor(value, self, len(self.nodes) - 1)

    def backward(self, root: Tensor) -> Dict[str, np.ndarray]:
        """
        Accumulate d(root)/d(node) for every node and return leaf gradients.

        Args:
            root: Scalar-valued tensor recorded on this tape

        Returns:
            Mapping leaf name -> gradient (zeros for leaves the root ignores)
        """
        if root.tape is not self or root.index is None:
            raise NumericError("backward root is not recorded on this tape")
        if root.value.size != 1:
            raise NumericError(f"backward requires a scalar root, got shape {root.shape}")

        self.grads = {root.index: np.ones_like(root.value)}
        for index in range(root.index, -1, -1):
            node = self.nodes[index]
            grad = self.grads.get(index)
            if grad is None or node.function is None:
                continue
            input_grads = node.function.backward(grad)
            for ref, input_grad in zip(node.inputs, input_grads):
                if ref is None or input_grad is None:
                    continue
                if ref in self.grads:
                    self.grads[ref] = self.grads[ref] + input_grad
                else:
                    self.grads[ref] = np.array(input_grad, dtype=np.float64)

        gradients: Dict[str, np.ndarray] = {}
        for index, node in enumerate(self.nodes):
            if node.function is None and node.name is not None:
                gradients[node.name] = self.grads.get(index, np.zeros(node.shape))
        return gradients


def _as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(inputs: Sequence[Tensor]) -> Optional[Tape]:
    for t in inputs:
        if t.tracked:
            return t.tape
    return None


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after NumPy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """Base class for primitives; subclasses store backward context on ``self``."""

    name = "function"

    @classmethod
    def apply(cls, *args: Any, **kwargs: Any) -> Tensor:
        fn = cls()
        inputs = [_as_tensor(a) for a in args]
        value = fn.forward(*[t.value for t in inputs], **kwargs)
        tape = _tape_of(inputs)
        if tape is None:
            return Tensor(value)
        return tape.record(fn, inputs, value)

    def forward(self, *values: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


def _broadcast_check(primitive: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(primitive, a.shape, b.shape) from None


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_check(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _broadcast_check(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _broadcast_check(self.name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Scale(Function):
    name = "scale"

    def forward(self, a, factor: float):
        self.factor = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.factor,)


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(self.name, a.shape, b.shape)
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(self.name, a.shape, b.shape, detail="batch dimensions") from None
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return unbroadcast(grad_a, self.a.shape), unbroadcast(grad_b, self.b.shape)


class Dot(Function):
    """Inner product along the last axis."""

    name = "dot"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(self.name, a.shape, b.shape)
        self.a, self.b = a, b
        return np.sum(a * b, axis=-1)

    def backward(self, grad):
        g = np.expand_dims(grad, -1)
        return g * self.b, g * self.a


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis: int = -1):
        reference = list(arrays[0].shape)
        for other in arrays[1:]:
            shape = list(other.shape)
            if len(shape) != len(reference):
                raise ShapeError(self.name, arrays[0].shape, other.shape)
            ax = axis % len(shape)
            if shape[:ax] + shape[ax + 1 :] != reference[:ax] + reference[ax + 1 :]:
                raise ShapeError(self.name, arrays[0].shape, other.shape)
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape: Tuple[int, ...]):
        if int(np.prod(shape)) != a.size and -1 not in shape:
            raise ShapeError(self.name, a.shape, shape)
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class SwapAxes(Function):
    name = "swapaxes"

    def forward(self, a, axis1: int = -1, axis2: int = -2):
        self.axes = (axis1, axis2)
        return np.swapaxes(a, axis1, axis2)

    def backward(self, grad):
        return (np.swapaxes(grad, *self.axes),)


class Slice(Function):
    name = "slice"

    def forward(self, a, key: Any = None):
        if isinstance(key, (list, np.ndarray)):
            raise ShapeError(self.name, a.shape, np.shape(key), detail="use gather for index arrays")
        self.key = key
        self.shape = a.shape
        return a[key]

    def backward(self, grad):
        # basic indexing only: selected positions are distinct
        full = np.zeros(self.shape)
        full[self.key] += grad
        return (full,)


class Sum(Function):
    name = "sum"

    def forward(self, a, axis: Optional[int] = None, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, a, axis: Optional[int] = None, keepdims: bool = False):
        if a.size == 0 or (axis is not None and a.shape[axis] == 0):
            raise NumericError("mean over an empty axis")
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        self.count = a.size if axis is None else a.shape[axis]
        return np.mean(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape) / self.count,)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, a):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * a))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Gelu(Function):
    """Tanh approximation of the Gaussian error linear unit."""

    name = "gelu"
    _c = math.sqrt(2.0 / math.pi)

    def forward(self, a):
        self.a = a
        self.inner = np.tanh(self._c * (a + 0.044715 * a**3))
        return 0.5 * a * (1.0 + self.inner)

    def backward(self, grad):
        a, t = self.a, self.inner
        d_inner = self._c * (1.0 + 3 * 0.044715 * a**2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t**2) * d_inner),)


class Absolute(Function):
    name = "abs"

    def forward(self, a):
        # subgradient +1 at the kink
        self.sign = np.where(a >= 0, 1.0, -1.0)
        return np.abs(a)

    def backward(self, grad):
        return (grad * self.sign,)


class Log(Function):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise NumericError("log of a non-positive value")
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


def _check_axis(primitive: str, a: np.ndarray, axis: int) -> None:
    if a.ndim == 0 or not -a.ndim <= axis < a.ndim:
        raise NumericError(f"{primitive}: axis {axis} invalid for shape {a.shape}")
    if a.shape[axis] == 0:
        raise NumericError(f"{primitive}: empty axis {axis} in shape {a.shape}")


class Softmax(Function):
    name = "softmax"

    def forward(self, a, axis: int = -1):
        _check_axis(self.name, a, axis)
        self.axis = axis
        shifted = np.exp(a - np.max(a, axis=axis, keepdims=True))
        self.out = shifted / np.sum(shifted, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - np.sum(grad * y, axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, a, axis: int = -1):
        _check_axis(self.name, a, axis)
        self.axis = axis
        shifted = a - np.max(a, axis=axis, keepdims=True)
        out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
        self.probs = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.probs * np.sum(grad, axis=self.axis, keepdims=True),)


class LayerNorm(Function):
    """Normalization over the last axis, without the affine rescale."""

    name = "layer_norm"

    def forward(self, a, eps: float = LAYER_NORM_EPS):
        if eps <= 0:
            raise NumericError("layer_norm epsilon must be positive")
        mu = np.mean(a, axis=-1, keepdims=True)
        var = np.var(a, axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (a - mu) * self.inv_std
        return self.xhat

    def backward(self, grad):
        n = self.xhat.shape[-1]
        g_sum = np.sum(grad, axis=-1, keepdims=True)
        gx_sum = np.sum(grad * self.xhat, axis=-1, keepdims=True)
        return (self.inv_std / n * (n * grad - g_sum - self.xhat * gx_sum),)


class Gather(Function):
    """Row lookup ``table[indices]`` (embedding gather)."""

    name = "gather"

    def forward(self, table, indices: np.ndarray = None):
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
            raise ShapeError(self.name, table.shape, indices.shape, detail="row index out of range")
        self.shape, self.indices = table.shape, indices
        return table[indices]

    def backward(self, grad):
        full = np.zeros(self.shape)
        np.add.at(full, self.indices, grad)
        return (full,)


class Pick(Function):
    """Select one entry per row along the last axis."""

    name = "pick"

    def forward(self, a, indices: np.ndarray = None):
        indices = np.asarray(indices, dtype=np.int64)
        if indices.shape != a.shape[:-1]:
            raise ShapeError(self.name, a.shape, indices.shape)
        self.shape, self.indices = a.shape, indices
        return np.take_along_axis(a, indices[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        full = np.zeros(self.shape)
        np.put_along_axis(full, self.indices[..., None], grad[..., None], axis=-1)
        return (full,)


class DropoutMask(Function):
    name = "dropout"

    def forward(self, a, mask: np.ndarray = None):
        self.mask = mask
        return a * mask

    def backward(self, grad):
        return (grad * self.mask,)


def add(a: Any, b: Any) -> Tensor:
    return Add.apply(a, b)


def sub(a: Any, b: Any) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Any, b: Any) -> Tensor:
    return Mul.apply(a, b)


def scale(a: Any, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def matmul(a: Any, b: Any) -> Tensor:
    return MatMul.apply(a, b)


def dot(a: Any, b: Any) -> Tensor:
    return Dot.apply(a, b)


def concat(tensors: Sequence[Any], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def reshape(a: Any, shape: Tuple[int, ...]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def swapaxes(a: Any, axis1: int = -1, axis2: int = -2) -> Tensor:
    return SwapAxes.apply(a, axis1=axis1, axis2=axis2)


def transpose(a: Any) -> Tensor:
    """Swap the last two axes."""
    return swapaxes(a, -1, -2)


def take(a: Any, key: Any) -> Tensor:
    return Slice.apply(a, key=key)


def sum_(a: Any, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Any, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def sigmoid(a: Any) -> Tensor:
    return Sigmoid.apply(a)


def gelu(a: Any) -> Tensor:
    return Gelu.apply(a)


def absolute(a: Any) -> Tensor:
    return Absolute.apply(a)


def log(a: Any) -> Tensor:
    return Log.apply(a)


def softmax(a: Any, axis: int = -1) -> Tensor:
    return Softmax.apply(a, axis=axis)


def log_softmax(a: Any, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(a, axis=axis)


def layer_norm(a: Any, eps: float = LAYER_NORM_EPS) -> Tensor:
    return LayerNorm.apply(a, eps=eps)


def gather(table: Any, indices: np.ndarray) -> Tensor:
    return Gather.apply(table, indices=indices)


def pick(a: Any, indices: np.ndarray) -> Tensor:
    return Pick.apply(a, indices=indices)


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """
    Inverted dropout. Identity (no tape node) when not training or rate is 0,
    so inference and rate-0 training produce identical values.
    """
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise NumericError("dropout in training mode needs a random generator")
    keep = rng.random(a.shape) >= rate
    return DropoutMask.apply(a, mask=keep / (1.0 - rate))
