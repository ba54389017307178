"""
Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation is a `Function` subclass. Applying a function to
tensors that require gradients records a node on the global `tape`; `backward`
then walks the recorded nodes in exact reverse order.
"""
from abc         import ABC, abstractmethod
from contextlib  import contextmanager
from dataclasses import dataclass
from typing      import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from cellini.csunet.utils import (
    NonFiniteError, ShapeError, TapeConsumedError, TapeError, get_precision,
)


@dataclass
class Node:
    function: "Function"
    inputs: Tuple[Optional["Tensor"], ...]
    output: "Tensor"


class Tape(object):
    """Tape

    Ordered record of the operations executed since the last backward pass.

    A node handle is a `(generation, index)` pair; once `backward` consumed the
    tape its generation is closed and any handle pointing into it is stale.
    """

    def __init__(self):
        self._nodes: List[Node] = []
        self._generation = 0
        self._consumed = False
        self._enabled = True

    @property
    def nodes(self) -> List[Node]:
        return self._nodes

    @property
    def generation(self) -> int:
        return self._generation

    @property
    def enabled(self) -> bool:
        return self._enabled

    def clear(self):
        self._nodes = []
        self._generation += 1
        self._consumed = False

    def record(self, function: "Function", inputs, output: "Tensor"):
        if self._consumed:
            self.clear()
        output.tape_id = (self._generation, len(self._nodes))
        self._nodes.append(Node(function, tuple(inputs), output))

    def _is_live(self, tensor: "Tensor") -> bool:
        return tensor.tape_id is not None and tensor.tape_id[0] == self._generation and not self._consumed

    def backward(self, loss: "Tensor"):
        if loss.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss.tape_id is None:
            if loss.requires_grad:
                loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
                return
            raise TapeError("loss is not attached to the tape (no input requires grad)")
        if not self._is_live(loss):
            raise TapeConsumedError("backward called on a tape that was already consumed")

        grads = {id(loss): np.ones_like(loss.data)}
        last = loss.tape_id[1]

        for node in reversed(self._nodes[: last + 1]):
            grad = grads.pop(id(node.output), None)
            if grad is None:
                continue
            input_grads = node.function.backward(grad)
            for tensor, input_grad in zip(node.inputs, input_grads):
                if tensor is None or input_grad is None or not tensor.requires_grad:
                    continue
                if self._is_live(tensor):
                    key = id(tensor)
                    grads[key] = grads[key] + input_grad if key in grads else input_grad
                elif tensor.grad is None:
                    tensor.grad = np.array(input_grad, dtype=tensor.dtype)
                else:
                    tensor.grad += input_grad

        self._nodes = []
        self._consumed = True

    @contextmanager
    def disabled(self) -> Iterator[None]:
        previous = self._enabled
        self._enabled = False
        try:
            yield
        finally:
            self._enabled = previous


tape = Tape()


def no_grad():
    """ context manager: operations inside are not recorded """
    return tape.disabled()


def backward(loss: "Tensor"):
    """backward

    populate `.grad` of every leaf reachable from `loss`. Gradients accumulate
    over uses and across calls until zeroed; the tape is cleared afterwards.
    """
    tape.backward(loss)


class Function(ABC):
    """
    Base class of differentiable operations.

    `forward` receives numpy arrays and may save whatever it needs on `self`;
    `backward` receives dLoss/dOutput and returns one gradient (or None) per input.
    """

    def __init__(self, **options: Any):
        self.options = options

    @abstractmethod
    def forward(self, *arrays: Optional[np.ndarray]) -> np.ndarray:
        pass

    @abstractmethod
    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        pass

    @classmethod
    def apply(cls, *tensors: Optional["Tensor"], **options: Any) -> "Tensor":
        function = cls(**options)
        data = function.forward(*(t.data if t is not None else None for t in tensors))
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{cls.__name__} produced non-finite values")
        requires_grad = tape.enabled and any(t is not None and t.requires_grad for t in tensors)
        out = Tensor(data, requires_grad=requires_grad, dtype=data.dtype)
        if requires_grad:
            tape.record(function, tensors, out)
        return out

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """ sum out broadcasted axes so that grad matches shape """
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor(object):
    """Tensor

    Dense row-major array of reals plus the autodiff bookkeeping: `requires_grad`,
    the accumulated `grad` (a numpy array of identical shape) and the `tape_id`
    handle of the node that produced it.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Optional[type] = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype or get_precision()))
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_id: Optional[Tuple[int, int]] = None

    @classmethod
    def zeros(cls, shape, **kwargs) -> "Tensor":
        return cls(np.zeros(shape), **kwargs)

    @classmethod
    def ones(cls, shape, **kwargs) -> "Tensor":
        return cls(np.ones(shape), **kwargs)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic

    def __add__(self, other):
        return Add.apply(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(as_tensor(other)))

    def __rsub__(self, other):
        return Add.apply(as_tensor(other), Neg.apply(self))

    def __neg__(self):
        return Neg.apply(self)

    def __mul__(self, other):
        return Mul.apply(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, as_tensor(other))

    def __rtruediv__(self, other):
        return Div.apply(as_tensor(other), self)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None) -> "Tensor":
        return Sum.apply(self, axis=axis)

    def mean(self, axis=None) -> "Tensor":
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return Sum.apply(self, axis=axis) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def clip(self, low: float, high: float) -> "Tensor":
        return Clip.apply(self, low=low, high=high)


class Parameter(Tensor):
    """Parameter

    Named trainable leaf tensor. Its `grad` is allocated eagerly with the value's
    shape and is reset in place by `zero_grad`. Non-trainable parameters (e.g.
    normalisation running statistics) carry `requires_grad=False` and no grad.
    """

    def __init__(self, data: ArrayLike, name: str = "", requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)
        self.name = name
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def value(self) -> Tensor:
        return self

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Add(Function):

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Neg(Function):

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Mul(Function):

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (self.unbroadcast(grad * self.b, self.a.shape),
                self.unbroadcast(grad * self.a, self.b.shape))


class Div(Function):

    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return (self.unbroadcast(grad / self.b, self.a.shape),
                self.unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape))


class Sum(Function):

    def forward(self, a):
        self.shape = a.shape
        self.axis = self.options.get("axis")
        return np.asarray(a.sum(axis=self.axis))

    def backward(self, grad):
        if self.axis is not None:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):

    def forward(self, a):
        self.shape = a.shape
        return a.reshape(self.options["shape"])

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class GetItem(Function):

    def forward(self, a):
        self.shape, self.dtype = a.shape, a.dtype
        return np.ascontiguousarray(a[self.options["index"]])

    def backward(self, grad):
        index = self.options["index"]
        out = np.zeros(self.shape, dtype=self.dtype)
        parts = index if isinstance(index, tuple) else (index,)
        if all(isinstance(p, (slice, int, type(Ellipsis))) for p in parts):
            out[index] = grad
        else:
            np.add.at(out, index, grad)
        return (out,)


class Log(Function):

    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Clip(Function):

    def forward(self, a):
        low, high = self.options["low"], self.options["high"]
        self.mask = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad):
        return (grad * self.mask,)
