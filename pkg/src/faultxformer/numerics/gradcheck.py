from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


def fd_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients of ``f`` at ``x``.

    The relative error per coordinate uses ``max(|fd|, |ad|, 1e-8)`` as denominator.
    ``x`` is perturbed in place and restored afterwards.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if y.size != 1:
        raise ValueError(f"fd_check needs a scalar function, got shape {y.shape}")
    y.backward()
    ad = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    fd = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            fd_flat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(ad)), 1e-8)
    return float(np.max(np.abs(fd - ad) / denom))
