"""Plain SGD with momentum, the only optimizer the training loops use."""

import numpy as np


class SGD:
    """v <- mu*v + g; w <- w - lr*v. Frozen parameters are skipped entirely.

    Velocity buffers are keyed by parameter name, so a parameter not included
    in a given ``step`` call keeps its velocity untouched (this is what keeps
    inactive attribute heads bit-identical during interleaved pretraining).
    """

    def __init__(self, lr, momentum=0.0):
        if lr < 0:
            raise ValueError(f"negative learning rate: {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.lr = lr
        self.momentum = momentum
        self._velocity = {}

    def step(self, params):
        """Apply one update to the given parameters using their .grad buffers."""
        for p in params:
            if not p.trainable:
                continue
            g = p.grad_array()
            v = self._velocity.get(p.name)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.momentum * v + g
            self._velocity[p.name] = v
            p.data = p.data - self.lr * v

    def zero_grad(self, params):
        for p in params:
            p.zero_grad()


def sgd_step(params, learning_rate, momentum=0.0, velocities=None):
    """One-shot functional SGD update; returns the velocity map for chaining."""
    if velocities is None:
        velocities = {}
    opt = SGD(learning_rate, momentum)
    opt._velocity = velocities
    opt.step(params)
    return velocities
