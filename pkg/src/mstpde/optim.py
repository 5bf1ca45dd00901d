"""nRMSE objective, Adam and the reduce-on-plateau learning-rate rule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, ops


def nrmse(x_hat, x):
    """``||x_hat - x||_2 / ||x||_2`` over all elements.

    Works on arrays (returns a float) and on tensors (returns a scalar
    tensor that carries gradients). Raises ``ZeroDivisionError`` when the
    reference is identically zero.
    """
    if not isinstance(x_hat, Tensor) and not isinstance(x, Tensor):
        x_hat, x = np.asarray(x_hat, dtype=np.float64), np.asarray(x, dtype=np.float64)
        if x_hat.shape != x.shape:
            raise ValueError(f"nrmse: shapes differ {x_hat.shape} vs {x.shape}")
        den = np.linalg.norm(x)
        if den == 0:
            raise ZeroDivisionError("nrmse undefined: reference has zero norm")
        return float(np.linalg.norm(x_hat - x) / den)
    return nrmse_per_sample(ops.reshape(as_tensor(x_hat), (1, -1)),
                            ops.reshape(as_tensor(x), (1, -1))).reshape(())


def nrmse_per_sample(x_hat, x) -> Tensor:
    """nRMSE of each leading-axis sample; returns shape (B,)."""
    x_hat, x = as_tensor(x_hat), as_tensor(x)
    if x_hat.shape != x.shape:
        raise ValueError(f"nrmse: shapes differ {x_hat.shape} vs {x.shape}")
    axes = tuple(range(1, x.ndim))
    den = np.sqrt((x.data ** 2).sum(axis=axes))
    if np.any(den == 0):
        raise ZeroDivisionError("nrmse undefined: reference has zero norm")
    diff = ops.sub(x_hat, x)
    num = ops.sqrt(ops.sum(ops.mul(diff, diff), axis=axes))
    if x.requires_grad:
        return ops.div(num, ops.sqrt(ops.sum(ops.mul(x, x), axis=axes)))
    return ops.div(num, Tensor(den))


@dataclass
class OptimizerState:
    """Adam moments (one per parameter), step counter and learning rate."""

    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 1e-3


@dataclass
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: OptimizerState, hyper: AdamHyper = AdamHyper()) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, hyper: AdamHyper = AdamHyper()):
        self.params = list(params)
        self.hyper = hyper
        self.state = OptimizerState([np.zeros_like(p.data) for p in self.params],
                                    [np.zeros_like(p.data) for p in self.params], 0, lr)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        if not value > 0:
            raise ValueError("learning rate must be positive")
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params],
                  self.state, self.hyper)


@dataclass
class PlateauState:
    lr: float
    best: float = math.inf
    bad_epochs: int = 0
    reductions: int = 0


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs
    without an improvement larger than ``threshold`` (absolute)."""

    lr0: float = 1e-3
    factor: float = 0.2
    patience: int = 5
    threshold: float = 1e-8
    state: PlateauState = field(init=False)

    def __post_init__(self):
        self.state = PlateauState(self.lr0)

    @property
    def lr(self) -> float:
        return self.state.lr

    def update(self, metric: float) -> float:
        self.state = plateau_scheduler_update(self.state, metric, self.factor,
                                              self.patience, self.threshold)
        return self.state.lr


def plateau_scheduler_update(state: PlateauState, metric: float, factor: float = 0.2,
                             patience: int = 5, threshold: float = 1e-8) -> PlateauState:
    if not math.isfinite(metric):
        raise ValueError(f"plateau scheduler needs a finite metric, got {metric}")
    new = PlateauState(state.lr, state.best, state.bad_epochs, state.reductions)
    if metric < new.best - threshold:
        new.best = metric
        new.bad_epochs = 0
    else:
        new.bad_epochs += 1
    if new.bad_epochs >= patience:
        new.lr = new.lr * factor
        new.reductions += 1
        new.bad_epochs = 0
    return new
