"""Adam optimiser over named parameters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import GradientError, Tensor


@dataclass
class OptimizerState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = OptimizerState(lr, betas[0], betas[1], eps)
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def step(self, allow_missing: bool = False) -> None:
        """Apply one update.  Parameters without a gradient raise unless
        ``allow_missing`` is set, in which case they are skipped."""
        st = self.state
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing and not allow_missing:
            raise GradientError(f"no gradient for parameters: {missing[:5]}")
        st.step_count += 1
        t = st.step_count
        c1 = 1.0 - st.beta1**t
        c2 = 1.0 - st.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = st.m[name], st.v[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * (g * g)
            p.data = p.data - st.learning_rate * (m / c1) / (np.sqrt(v / c2) + st.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
