import math

import numpy as np


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads, max_norm):
    """Scales every block by the same factor so the joint norm is <= max_norm"""
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        return {name: g * scale for name, g in grads.items()}, norm
    return grads, norm


class Adam:
    """Adam over a dict of named numpy blocks, updating them in place"""

    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, weights, grads):
        self.step_count += 1
        if self.learning_rate == 0:
            return
        t = self.step_count
        correction1 = 1.0 - self.beta1**t
        correction2 = 1.0 - self.beta2**t
        for name, grad in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(grad)
                self.v[name] = np.zeros_like(grad)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            update = self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            weights[name] -= update
