"""Adam optimizer with bias correction."""

from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from .tensor import Parameter


@dataclass
class AdamState:
    """First/second moments per parameter name plus the shared timestep."""

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    timestep: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def moments_for(self, param: Parameter):
        if param.name not in self.m:
            self.m[param.name] = np.zeros_like(param.data)
            self.v[param.name] = np.zeros_like(param.data)
        return self.m[param.name], self.v[param.name]


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float) -> None:
    """Apply one Adam update in place and zero the gradients."""
    state.timestep += 1
    bc1 = 1.0 - state.beta1 ** state.timestep
    bc2 = 1.0 - state.beta2 ** state.timestep
    step_size = lr / bc1

    for param in params:
        if param.frozen:
            continue
        g = param.grad
        m, v = state.moments_for(param)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2) + state.epsilon
        param.data -= step_size * m / denom
        param.zero_grad()
