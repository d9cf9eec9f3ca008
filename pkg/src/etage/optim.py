"""Plain SGD with heavy-ball momentum."""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ParameterError


class SGD:
    """``v <- momentum * v + g``; ``p <- p - lr * v``.

    Momentum buffers persist across :meth:`step` calls, which is what the online
    adaptation loop relies on.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        if not 0 <= momentum < 1:
            raise ParameterError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> float:
        """Apply one update and return the L2 norm of the parameter change."""
        if len(grads) != len(self.params):
            raise ParameterError(f"expected {len(self.params)} gradients, got {len(grads)}")
        sq = 0.0
        for i, (p, g) in enumerate(zip(self.params, grads)):
            v = self.momentum * self._velocity[i] + g
            self._velocity[i] = v
            new = p.data - self.lr * v
            delta = new - p.data
            sq += float(np.vdot(delta, delta))
            p.assign(new)
        return math.sqrt(sq)
