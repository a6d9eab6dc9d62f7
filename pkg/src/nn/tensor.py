"""Dense tensors with a recorded forward graph and exact reverse-mode gradients."""

import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import GradientError, ShapeError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node of the recorded computation.

    `parents` are the input nodes and `backward_fn` maps the gradient of this node
    to one gradient per parent (None where a parent needs none).
    """

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward_fn: Optional[BackwardFn] = None,
                 dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype.kind != 'f':
            self.data = self.data.astype(np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = any(p.requires_grad for p in self.parents)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Return a constant copy cut off from the recorded graph."""
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic. Only what the models need: elementwise ops with bias broadcasting.

    def __add__(self, other):
        other = as_tensor(other, self.data.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor(self.data + other.data, (self, other),
                      lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other, self.data.dtype))

    def __rsub__(self, other):
        return as_tensor(other, self.data.dtype) + (-self)

    def __mul__(self, other):
        other = as_tensor(other, self.data.dtype)
        a, b = self.data, other.data
        return Tensor(a * b, (self, other),
                      lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = as_tensor(other, self.data.dtype)
        a, b = self.data, other.data
        if a.shape[-1] != b.shape[0] or b.ndim != 2:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def backward(g):
            grad_a = g @ b.T
            grad_b = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return grad_a, grad_b

        return Tensor(a @ b, (self, other), backward)

    def sum(self, axis=None) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(self.data.sum(axis=axis), (self,), backward)


class Parameter(Tensor):
    """A trainable leaf. `grad` always has the shape of `data`."""

    def __init__(self, data, name: str, frozen: bool = False, dtype=None):
        super().__init__(np.array(data, dtype=dtype if dtype is not None else np.float64))
        self.name = name
        self.frozen = frozen
        self.requires_grad = not frozen
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _topological_order(root: Tensor) -> List[Tensor]:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def compute_gradients(loss: Tensor, params: Optional[Iterable[Parameter]] = None) -> Dict[str, np.ndarray]:
    """Back-propagate a scalar loss, accumulating into each reachable `Parameter.grad`.

    Returns the gradients of `params` keyed by parameter name (all reachable
    parameters when `params` is None).

    A loss that is constant but was recorded through a forward pass yields
    zero gradients; a bare tensor with no recorded forward is an error.
    """
    if loss.size != 1:
        raise GradientError(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.parents and not isinstance(loss, Parameter):
        raise GradientError("no recorded forward computation behind this loss")

    grads = {id(loss): np.ones_like(loss.data)}
    reached: Dict[str, Parameter] = {}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if isinstance(node, Parameter):
            node.grad += grad
            reached[node.name] = node
        if node.backward_fn is None:
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = parent_grad

    if params is None:
        return {name: p.grad for name, p in reached.items()}
    return {p.name: p.grad for p in params}
