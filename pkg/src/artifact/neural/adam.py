from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


class AdamState:
    """First/second moment accumulators for a dict of parameters."""

    def __init__(self, params, config=AdamConfig()):
        self.config = config
        self.step = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, params, grads):
        """Apply one bias-corrected Adam step to ``params`` in place."""
        cfg = self.config
        self.step += 1
        b1, b2 = cfg.beta1, cfg.beta2
        # fold both bias corrections into the step size
        lr_t = cfg.learning_rate * np.sqrt(1.0 - b2 ** self.step) / (1.0 - b1 ** self.step)
        eps_t = cfg.epsilon * np.sqrt(1.0 - b2 ** self.step)
        for name, p in params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (lr_t * m / (np.sqrt(v) + eps_t)).astype(p.dtype, copy=False)
