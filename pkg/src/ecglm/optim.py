"""Adam optimizer and the finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import Parameter, Tensor


class Adam:
    """Standard Adam with bias correction. Only trainable parameters move;
    a parameter's ``grad_mask`` (if set) zeroes selected gradient entries
    before the moment update, so masked rows never accumulate momentum."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {id(p): np.zeros_like(p.data) for p in self.params}
        self._v = {id(p): np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p in self.params:
            if not p.trainable or p.grad is None:
                continue
            g = p.grad
            if p.grad_mask is not None:
                g = g * p.grad_mask
            m = self._m[id(p)]
            v = self._v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def finite_diff_check(f: Callable[[], Tensor], wrt: Sequence[Tensor],
                      eps: float = 1e-5, max_elements: int | None = None,
                      seed: int = 0) -> float:
    """Compare reverse-mode gradients of the scalar ``f()`` against central
    differences and return the worst relative error,
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.

    ``f`` must rebuild its graph from the current ``.data`` of each tensor in
    ``wrt`` on every call. For large tensors, ``max_elements`` caps how many
    coordinates are probed (chosen by a seeded RNG).
    """
    for t in wrt:
        t.grad = None
        if not t.requires_grad:
            raise ValueError("finite_diff_check needs requires_grad tensors")
    loss = f()
    loss.backward()
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g_ad in zip(wrt, grads):
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n)
        if max_elements is not None and n > max_elements:
            idx = rng.choice(n, size=max_elements, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            g_fd = (hi - lo) / (2.0 * eps)
            g = g_ad.reshape(-1)[i]
            err = abs(g - g_fd) / max(1e-8, abs(g) + abs(g_fd))
            worst = max(worst, err)
    for t in wrt:
        t.grad = None
    return worst
