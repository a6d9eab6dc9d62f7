"""Layers of the CNN text processor, dropout and the training losses.

Every function records its node on the graph so `compute_gradients` can run the
exact backward pass. Leading batch dimensions are allowed everywhere.
"""

from dataclasses import dataclass
from typing import Callable, Dict, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Parameter, Tensor, as_tensor

# name -> (forward, derivative expressed through the forward output)
ACTIVATIONS: Dict[str, Tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray], np.ndarray]]] = {
    'tanh': (np.tanh, lambda y: 1.0 - y * y),
    'relu': (lambda x: np.maximum(x, 0.0), lambda y: (y > 0.0).astype(y.dtype)),
    'identity': (lambda x: x, np.ones_like),
}


def _activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"Unknown activation: {name}") from None


def activate(x: Tensor, name: str = 'tanh') -> Tensor:
    forward, derivative = _activation(name)
    out = forward(x.data)
    return Tensor(out, (x,), lambda g: (g * derivative(out),))


def conv_text_forward(V: Tensor, filters: Parameter, biases: Parameter, activation: str = 'tanh') -> Tensor:
    """Convolve `m` filters of shape t x d along the token axis of V (..., T, d).

    Returns the feature map (..., m, T - t + 1) after the non-linearity.
    """
    V = as_tensor(V)
    m, t, d = filters.shape
    if V.ndim < 2 or V.shape[-1] != d:
        raise ShapeError(f"embedded text {V.shape} does not match filter width {d}")
    T = V.shape[-2]
    if T < t:
        raise ShapeError(f"text length {T} is shorter than the window size {t}")

    lead = V.shape[:-2]
    x = V.data.reshape((-1, T, d))
    batch, windows_count = x.shape[0], T - t + 1
    # (B, S, d, t) -> (B, S, t, d) -> (B, S, t*d)
    windows = sliding_window_view(x, t, axis=1).transpose(0, 1, 3, 2).reshape(batch, windows_count, t * d)
    kernel = filters.data.reshape(m, t * d)
    forward, derivative = _activation(activation)
    out = forward(windows @ kernel.T + biases.data)  # (B, S, m)

    def backward(g):
        g_pre = np.swapaxes(g.reshape(batch, m, windows_count), 1, 2) * derivative(out)
        grad_filters = np.einsum('bsk,bsm->mk', windows, g_pre).reshape(m, t, d)
        grad_biases = g_pre.sum(axis=(0, 1))
        g_windows = (g_pre @ kernel).reshape(batch, windows_count, t, d)
        grad_V = np.zeros_like(x)
        for offset in range(t):
            grad_V[:, offset:offset + windows_count, :] += g_windows[:, :, offset, :]
        return grad_V.reshape(V.shape), grad_filters, grad_biases

    feature_map = np.swapaxes(out, 1, 2).reshape(lead + (m, windows_count))
    return Tensor(feature_map, (V, filters, biases), backward)


def max_pool(features: Tensor) -> Tuple[Tensor, np.ndarray]:
    """Max over the window axis. Ties resolve to the first maximal index."""
    if features.shape[-1] < 1:
        raise ShapeError("max_pool needs at least one window")
    argmax = np.argmax(features.data, axis=-1)
    pooled = np.take_along_axis(features.data, argmax[..., None], axis=-1)[..., 0]
    shape = features.shape

    def backward(g):
        grad = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(grad, argmax[..., None], g[..., None], axis=-1)
        return (grad,)

    return Tensor(pooled, (features,), backward), argmax


def fc_forward(O: Tensor, W: Parameter, g: Parameter, activation: str = 'tanh') -> Tensor:
    """x = activation(O W + g) for O (..., m), W (m, n), g (n,)."""
    O = as_tensor(O)
    if W.ndim != 2 or O.shape[-1] != W.shape[0] or g.shape != (W.shape[1],):
        raise ShapeError(f"fully-connected shapes disagree: O {O.shape}, W {W.shape}, g {g.shape}")
    return activate(O @ W + g, activation)


@dataclass
class DropoutMask:
    mask: np.ndarray
    keep_prob: float


def dropout(x: Tensor, keep_prob: float, training: bool, rng: np.random.Generator) -> Tuple[Tensor, DropoutMask]:
    """Inverted dropout. In eval mode the input is returned untouched with an all-ones mask."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x, DropoutMask(np.ones(x.shape, dtype=bool), keep_prob)
    mask = rng.random(x.shape) < keep_prob
    return apply_dropout_mask(x, DropoutMask(mask, keep_prob)), DropoutMask(mask, keep_prob)


def apply_dropout_mask(x: Tensor, mask: DropoutMask) -> Tensor:
    scale = mask.mask.astype(x.data.dtype) / mask.keep_prob
    return Tensor(x.data * scale, (x,), lambda g: (g * scale,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                  lambda g: tuple(np.split(g, bounds, axis=axis)))


def gather_rows(table: Parameter, indices: np.ndarray) -> Tensor:
    """Row lookup into a trainable table; backward scatters into the selected rows."""
    indices = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def backward(g):
        grad = np.zeros(shape, dtype=g.dtype)
        np.add.at(grad, indices, g)
        return (grad,)

    return Tensor(table.data[indices], (table,), backward)


def l1_loss(prediction: Tensor, target) -> Tensor:
    """Mean absolute error over the batch. The subgradient at zero residual is zero."""
    target = np.asarray(target, dtype=prediction.data.dtype)
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {prediction.shape} and target {target.shape} disagree")
    residual = prediction.data - target
    count = max(residual.size, 1)
    return Tensor(np.abs(residual).sum() / count, (prediction,),
                  lambda g: (g * np.sign(residual) / count,))


def l2_loss(a: Tensor, b, squared: bool = True) -> Tensor:
    """Euclidean distance between the last-axis vectors of a and b, averaged over leading axes.

    `squared=False` uses the norm itself; its gradient at zero distance is zero.
    """
    a = as_tensor(a)
    b = as_tensor(b, a.data.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"l2_loss operands disagree: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    sq = (diff * diff).sum(axis=-1)
    count = max(sq.size, 1)
    if squared:
        value = sq.sum() / count
        scale = np.full(sq.shape, 2.0 / count)
    else:
        norm = np.sqrt(sq)
        value = norm.sum() / count
        scale = np.divide(1.0, norm * count, out=np.zeros_like(norm), where=norm > 0)
    factor = scale[..., None] * diff
    return Tensor(value, (a, b), lambda g: (g * factor, -g * factor))


def mse_loss(prediction: Tensor, target) -> Tensor:
    """Mean squared error; the training loss of the matrix-factorisation baseline."""
    target = np.asarray(target, dtype=prediction.data.dtype)
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {prediction.shape} and target {target.shape} disagree")
    residual = prediction.data - target
    count = max(residual.size, 1)
    return Tensor((residual * residual).sum() / count, (prediction,),
                  lambda g: (g * 2.0 * residual / count,))
