"""Dense float64 tensors and the reverse-mode gradient tape.

Tensors are immutable once produced. Primitive operations (see ``app.core.ops``)
record themselves on the innermost active :class:`GradientTape` whenever one of
their inputs is tracked by it; ``tape.backward(loss)`` then walks the recorded
nodes in reverse order and accumulates gradients into the leaves that were
created with ``requires_grad=True``.
"""
import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import NonFiniteError, TapeError

logger = logging.getLogger(__name__)

_local = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _tape_stack() -> List["GradientTape"]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional["GradientTape"]:
    """Innermost tape entered on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64, copy=True)
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"Tensor values must be finite, got shape {array.shape}")
        array.flags.writeable = False
        self._data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional["GradientTape"] = None
        self._node: Optional[int] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        """Adopt a freshly computed array without copying."""
        out = cls.__new__(cls)
        array = np.ascontiguousarray(array, dtype=np.float64)
        array.flags.writeable = False
        out._data = array
        out.requires_grad = False
        out.grad = None
        out._tape = None
        out._node = None
        return out

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def tape_id(self) -> Optional[int]:
        return self._node

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def assign(self, array: np.ndarray) -> None:
        """Replace the values of a leaf tensor (optimizer and checkpoint use)."""
        if self._tape is not None:
            raise TapeError("Cannot assign to a tensor produced on a gradient tape")
        array = np.array(array, dtype=np.float64, copy=True)
        if array.shape != self.shape:
            raise ValueError(f"assign shape {array.shape} does not match {self.shape}")
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"assign received non-finite values for shape {self.shape}")
        array.flags.writeable = False
        self._data = array

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("Loss is detached: it was not produced on an active gradient tape")
        self._tape.backward(self)

    # operator sugar; the primitives live in app.core.ops
    def __add__(self, other):
        from app.core import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from app.core import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from app.core import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from app.core import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from app.core import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from app.core import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from app.core import ops
        return ops.div(self, other)

    def __neg__(self):
        from app.core import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from app.core import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        from app.core import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        from app.core import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        from app.core import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        from app.core import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn


class GradientTape:
    """Ordered record of primitive ops; supports exactly one backward pass.

    Usage::

        with GradientTape() as tape:
            loss = model(x)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._consumed = False

    def __enter__(self) -> "GradientTape":
        if self._consumed:
            raise TapeError("Tape already ran backward; record a new forward pass")
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def tracks(self, tensor: Tensor) -> bool:
        if tensor._tape is not None:
            return tensor._tape is self
        return tensor.requires_grad

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> None:
        if self._consumed:
            raise TapeError("Cannot record on a tape that already ran backward")
        output._tape = self
        output._node = len(self.nodes)
        output.requires_grad = True
        self.nodes.append(TapeNode(op, inputs, output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("Loss is detached from this tape")
        if self._consumed:
            raise TapeError("backward already ran for this recording")
        self._consumed = True

        grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        for node in reversed(self.nodes):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            input_grads = node.backward_fn(upstream)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not self.tracks(tensor):
                    continue
                if tensor._tape is self:
                    key = id(tensor)
                    grads[key] = grads[key] + grad if key in grads else grad
                else:
                    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
        logger.debug(f"Backward pass finished over {len(self.nodes)} nodes")
