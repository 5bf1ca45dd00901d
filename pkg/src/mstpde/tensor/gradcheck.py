"""Central finite-difference checks for autodiff gradients."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .core import Tensor, backward, no_grad


def numerical_grad(f: Callable[[Tensor], Tensor], w: Tensor, index: tuple,
                   eps: float = 1e-5) -> float:
    """Central difference of scalar ``f(w)`` along one coordinate of ``w``."""
    orig = w.data[index]
    with no_grad():
        w.data[index] = orig + eps
        fp = f(w).item()
        w.data[index] = orig - eps
        fm = f(w).item()
    w.data[index] = orig
    return (fp - fm) / (2.0 * eps)


def fd_check(f: Callable[[Tensor], Tensor], w: Tensor, eps: float = 1e-5,
             max_coords: Optional[int] = 64, seed: int = 0, floor: float = 1e-12) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps the leaf ``w`` to a scalar tensor (it may also read other
    tensors through a closure). At most ``max_coords`` coordinates are
    sampled, chosen by ``seed``; every coordinate is used when ``w`` is
    small enough or ``max_coords`` is None. The error per coordinate is
    ``|autodiff - fd| / (|fd| + floor)``. Coordinates whose gradient vanishes
    identically (a key bias under softmax, say) leave only round-off in the
    difference quotient; check those with an absolute tolerance instead.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not w.requires_grad:
        raise ValueError("fd_check needs a leaf tensor with requires_grad=True")
    w.zero_grad()
    loss = f(w)
    if loss.size != 1:
        raise ValueError(f"fd_check needs a scalar function, got shape {loss.shape}")
    if loss.requires_grad:
        backward(loss)
    analytic = w.grad if w.grad is not None else np.zeros_like(w.data)
    w.zero_grad()

    flat = np.arange(w.size)
    if max_coords is not None and w.size > max_coords:
        flat = np.random.default_rng(seed).choice(w.size, size=max_coords, replace=False)
    worst = 0.0
    for k in flat:
        idx = np.unravel_index(int(k), w.shape)
        fd = numerical_grad(f, w, idx, eps)
        err = abs(analytic[idx] - fd) / (abs(fd) + floor)
        worst = max(worst, err)
    return worst
