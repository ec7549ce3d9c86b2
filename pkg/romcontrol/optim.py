"""First-order optimizers over flat parameter vectors."""

import dataclasses
from typing import Optional

import numpy as np


@dataclasses.dataclass
class Adam:
    """Adam with bias correction.

    Attributes:
        learning_rate: Step size.
        beta1: Decay of the first-moment estimate.
        beta2: Decay of the second-moment estimate.
        eps: Denominator offset.
    """

    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 0
    _m: Optional[np.ndarray] = None
    _v: Optional[np.ndarray] = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return the parameters after one update; ``params`` is not modified."""
        if self._m is None or self._v is None:
            self._m = np.zeros_like(params)
            self._v = np.zeros_like(params)
        self.steps += 1
        self._m = self.beta1 * self._m + (1.0 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1.0 - self.beta2) * grad * grad
        m_hat = self._m / (1.0 - self.beta1**self.steps)
        v_hat = self._v / (1.0 - self.beta2**self.steps)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
