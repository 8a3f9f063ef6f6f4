# services/optimizer.py
"""Stochastic gradient descent with heavy-ball momentum over a ParamStore."""
import logging
from typing import Dict

import numpy as np

from .errors import InputError

logger = logging.getLogger(__name__)


class SGD:
    """
    SGD with momentum and L2 weight decay.

    Update per trainable entry:
        g   = grad + weight_decay * w
        buf = g                      on the first step
        buf = momentum * buf + g     afterwards
        w   = w - lr * buf

    Frozen entries are never read or written.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr < 0:
            raise InputError(f"learning rate must be >= 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise InputError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: Dict[str, np.ndarray] = {}

    def zero_grad(self):
        self.params.zero_grad()

    def step(self):
        for name in self.params.trainable_names():
            node = self.params.node(name)
            g = node.grad
            if self.weight_decay:
                g = g + self.weight_decay * node.value
            buf = self.buffers.get(name)
            if buf is None or not self.momentum:
                buf = np.array(g, dtype=np.float64)
            else:
                buf = self.momentum * buf + g
            self.buffers[name] = buf
            node.value -= self.lr * buf

    def set_lr(self, lr: float):
        self.lr = lr
