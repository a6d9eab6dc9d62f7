"""Factorization Machine regression head."""

import logging
from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import ShapeError
from .nn.init import truncated_normal
from .nn.tensor import Parameter, Tensor, as_tensor

logger = logging.getLogger(__name__)


@dataclass
class FMParams:
    """Global bias w0, linear weights w (p,) and interaction factors V (p, k)."""

    w0: Parameter
    w: Parameter
    V: Parameter

    @property
    def p(self) -> int:
        return self.w.shape[0]

    @property
    def k(self) -> int:
        return self.V.shape[1]

    def parameters(self) -> List[Parameter]:
        return [self.w0, self.w, self.V]

    @classmethod
    def initialize(cls, name: str, p: int, k: int, rng: np.random.Generator, dtype=np.float64) -> "FMParams":
        if k < 1:
            raise ValueError(f"FM rank k must be >= 1, got {k}")
        return cls(
            w0=Parameter(0.0, name=f"{name}.w0", dtype=dtype),
            w=Parameter(np.full(p, 0.001), name=f"{name}.w", dtype=dtype),
            V=Parameter(truncated_normal((p, k), 0.0, 0.001, rng), name=f"{name}.V", dtype=dtype),
        )


def fm_forward(z: Tensor, params: FMParams) -> Tensor:
    """w0 + <w, z> + sum_{i<j} <v_i, v_j> z_i z_j over the last axis of z, in O(pk).

    Uses sum_{i<j} <v_i,v_j> z_i z_j = 1/2 sum_f [(sum_i V_if z_i)^2 - sum_i V_if^2 z_i^2].
    """
    z = as_tensor(z)
    if z.shape[-1] != params.p:
        raise ShapeError(f"FM expects input width {params.p}, got {z.shape[-1]}")
    x = z.data
    w0, w, V = params.w0.data, params.w.data, params.V.data
    xv = x @ V                       # (..., k)
    v_sq_rows = (V * V).sum(axis=1)  # (p,)
    interaction = 0.5 * ((xv * xv).sum(axis=-1) - (x * x) @ v_sq_rows)
    out = w0 + x @ w + interaction

    def backward(g):
        g_col = g[..., None]
        grad_z = g_col * (w + xv @ V.T - x * v_sq_rows)
        flat_x = x.reshape(-1, params.p)
        flat_g = np.reshape(g, -1)
        flat_xv = xv.reshape(-1, params.k)
        grad_w0 = np.asarray(flat_g.sum(), dtype=x.dtype)
        grad_w = flat_x.T @ flat_g
        grad_V = (flat_x * flat_g[:, None]).T @ flat_xv - V * ((flat_x * flat_x).T @ flat_g)[:, None]
        return grad_z, grad_w0, grad_w, grad_V

    return Tensor(out, (z, params.w0, params.w, params.V), backward)


def fm_forward_bruteforce(z, params: FMParams) -> float:
    """Literal pairwise evaluation, kept as the reference for the factorized form."""
    z = np.asarray(z, dtype=np.float64)
    w0, w, V = float(params.w0.data), params.w.data, params.V.data
    total = w0
    for i in range(len(z)):
        total += w[i] * z[i]
    for i in range(len(z)):
        for j in range(i + 1, len(z)):
            total += float(np.dot(V[i], V[j])) * z[i] * z[j]
    return total
