"""Finite-rollout loss for the dynamical models and the two-stage training loop.

Stage 1 fits the autoencoder (see :mod:`mstpde.autoencoder`). Stage 2 trains
one dynamical model per time scale in ascending order; with transfer enabled
each model starts from a copy of the previously trained scale.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .autoencoder import TrainHistory, TrainingError, encode, split_train_val, train_autoencoder
from .optim import (Adam, AdamHyper, OptimizerState, PlateauScheduler, PlateauState, adam_step,
                    nrmse, nrmse_per_sample, plateau_scheduler_update)
from .tensor import Tensor, as_tensor, backward, no_grad, ops
from .transformer import DynConfig, DynModel

log = logging.getLogger(__name__)

__all__ = [
    "Adam", "AdamHyper", "OptimizerState", "PlateauScheduler", "PlateauState", "TrainConfig",
    "TrainingError", "adam_step", "encode_trajectories", "latent_rollout_loss", "nrmse",
    "plateau_scheduler_update", "rollout_loss", "rollout_starts", "train_autoencoder",
    "train_dyn_model", "train_dyn_models", "transfer_init",
]


@dataclass
class TrainConfig:
    rollout: int = 1
    epochs: int = 100
    batch_size: int = 64
    lr0: float = 1e-3
    plateau_factor: float = 0.2
    patience: int = 5
    threshold: float = 1e-8
    seed: int = 0
    delta_ts: Tuple[int, ...] = (1, 2, 4, 8)
    variant: str = "M4"
    val_fraction: float = 0.1
    transfer: bool = True
    d_f: int = 32
    n_layers: int = 4
    n_heads: int = 8
    augment: bool = False  # autoencoder stage only: random shift/flip/transpose/sign

    def __post_init__(self):
        self.delta_ts = tuple(int(d) for d in self.delta_ts)
        self.validate()

    def validate(self) -> None:
        if self.rollout < 1:
            raise ValueError(f"rollout must be a positive integer, got {self.rollout}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not self.delta_ts or any(d < 1 for d in self.delta_ts):
            raise ValueError(f"time scales must be positive integers, got {self.delta_ts}")
        if len(set(self.delta_ts)) != len(self.delta_ts):
            raise ValueError(f"duplicate time scales in {self.delta_ts}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        self.dyn_config()

    def check_horizon(self, T: int) -> None:
        for dt in self.delta_ts:
            if self.rollout * dt > T - 1:
                raise ValueError(f"rollout {self.rollout} x dt {dt} exceeds trajectory length {T}")

    def dyn_config(self) -> DynConfig:
        return DynConfig(d_f=self.d_f, n_layers=self.n_layers, n_heads=self.n_heads,
                         variant=self.variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["delta_ts"] = list(self.delta_ts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown training keys: {unknown}")
        return cls(**d)


# loss ------------------------------------------------------------------------------

def rollout_starts(T: int, R: int, delta_t: int) -> np.ndarray:
    """Start indices t with t + R*delta_t <= T - 1."""
    if R < 1 or delta_t < 1:
        raise ValueError("R and delta_t must be positive")
    if R * delta_t > T - 1:
        raise ValueError(f"R*dt = {R * delta_t} exceeds the last snapshot index {T - 1}")
    return np.arange(T - R * delta_t)


def _batch_loss(D: DynModel, z0, targets: Sequence) -> Tensor:
    """Mean over the batch of ``sum_r nrmse(z~_r, z_r) / R``."""
    z = z0
    total = None
    for target in targets:
        z = D(z)
        err = nrmse_per_sample(z, target)
        total = err if total is None else ops.add(total, err)
    return ops.mean(ops.mul(total, 1.0 / len(targets)))


def latent_rollout_loss(D: DynModel, z, R: int, delta_t: int, starts=None) -> Tensor:
    """Rollout loss on a latent trajectory ``z`` of shape (T, n_x, n_y, d_f)."""
    z = as_tensor(z)
    valid = rollout_starts(z.shape[0], R, delta_t)
    starts = valid if starts is None else np.asarray(starts, dtype=int)
    if starts.size == 0 or starts.min() < 0 or starts.max() > valid[-1]:
        raise ValueError(f"start indices must lie in [0, {valid[-1]}]")
    targets = [ops.getitem(z, starts + r * delta_t) for r in range(1, R + 1)]
    return _batch_loss(D, ops.getitem(z, starts), targets)


def rollout_loss(D: DynModel, P, traj, R: int, delta_t: int) -> Tensor:
    """Loss of ``D`` on one trajectory: the encoder ``P`` is frozen."""
    fields_ = traj.fields if hasattr(traj, "fields") else np.asarray(traj)
    if R * delta_t > fields_.shape[0] - 1:
        raise ValueError(f"R*dt = {R * delta_t} exceeds the last snapshot index "
                         f"{fields_.shape[0] - 1}")
    return latent_rollout_loss(D, encode(fields_, P), R, delta_t)


# transfer ----------------------------------------------------------------------------

def transfer_init(trained: DynModel, target_delta_t: int, scales: Optional[Sequence[int]] = None,
                  into: Optional[DynModel] = None) -> DynModel:
    """New model for ``target_delta_t`` whose weights copy ``trained`` bitwise.

    ``scales`` (the configured set) must contain the target and the source
    scale, and the target must be larger. ``into`` reuses an existing model,
    which must share the source's architecture.
    """
    if scales is not None:
        scales = sorted(int(s) for s in scales)
        if target_delta_t not in scales or trained.delta_t not in scales:
            raise ValueError(f"transfer {trained.delta_t} -> {target_delta_t} is outside the "
                             f"configured scales {scales}")
    if target_delta_t <= trained.delta_t:
        raise ValueError(f"transfer must go to a larger scale, got "
                         f"{trained.delta_t} -> {target_delta_t}")
    if into is None:
        model = copy.deepcopy(trained)
        model.delta_t = int(target_delta_t)
        return model
    if into.cfg.to_dict() != trained.cfg.to_dict():
        raise ValueError(f"architecture mismatch: {into.cfg.to_dict()} vs {trained.cfg.to_dict()}")
    into.load_state_dict(trained.state_dict())
    into.delta_t = int(target_delta_t)
    return into


# training loop -------------------------------------------------------------------------

def encode_trajectories(ds_trajs, P) -> np.ndarray:
    """Latents of every snapshot, shape (N, T, n_x, n_y, d_f)."""
    return np.stack([encode(tr.fields, P) for tr in ds_trajs])


def _pairs(n_traj: int, starts: np.ndarray) -> np.ndarray:
    return np.array([(i, t) for i in range(n_traj) for t in starts], dtype=int).reshape(-1, 2)


def _eval_loss(D: DynModel, lat: np.ndarray, R: int, delta_t: int, batch_size: int) -> float:
    pairs = _pairs(lat.shape[0], rollout_starts(lat.shape[1], R, delta_t))
    total = 0.0
    with no_grad():
        for i in range(0, len(pairs), batch_size):
            b = pairs[i:i + batch_size]
            targets = [lat[b[:, 0], b[:, 1] + r * delta_t] for r in range(1, R + 1)]
            total += _batch_loss(D, lat[b[:, 0], b[:, 1]], targets).item() * len(b)
    return total / len(pairs)


def train_dyn_model(bundle, ds, cfg: TrainConfig, delta_t: int,
                    on_epoch: Optional[Callable[[dict], None]] = None,
                    latents: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> TrainHistory:
    """Train ``D^delta_t`` and store it in ``bundle.dyn``; returns its history."""
    if bundle.cae is None:
        raise ValueError("a trained autoencoder is required before the dynamical models")
    if delta_t not in cfg.delta_ts:
        raise ValueError(f"dt={delta_t} is not among the configured scales {cfg.delta_ts}")
    cfg.check_horizon(ds.train[0].T)
    order = sorted(cfg.delta_ts)
    pos = order.index(delta_t)
    if cfg.transfer and pos > 0:
        prev = order[pos - 1]
        if prev not in bundle.dyn:
            raise ValueError(f"D^{delta_t} starts from D^{prev}, which has not been trained")
        D = transfer_init(bundle.dyn[prev], delta_t, order)
    else:
        D = DynModel(delta_t, cfg.dyn_config(), seed=cfg.seed)

    if latents is None:
        tr_idx, val_idx = split_train_val(len(ds.train), cfg.val_fraction, cfg.seed)
        lat_all = encode_trajectories(ds.train, bundle.cae)
        latents = lat_all[tr_idx], lat_all[val_idx]
    lat_train, lat_val = latents
    R = cfg.rollout
    pairs = _pairs(lat_train.shape[0], rollout_starts(lat_train.shape[1], R, delta_t))

    opt = Adam(D.parameters(), lr=cfg.lr0)
    sched = PlateauScheduler(cfg.lr0, cfg.plateau_factor, cfg.patience, cfg.threshold)
    rng = np.random.default_rng([cfg.seed, delta_t])
    hist = TrainHistory()
    stage = f"dyn{delta_t}"
    for epoch in range(cfg.epochs):
        perm = pairs[rng.permutation(len(pairs))]
        losses = []
        for b_idx, start in enumerate(range(0, len(perm), cfg.batch_size)):
            b = perm[start:start + cfg.batch_size]
            targets = [lat_train[b[:, 0], b[:, 1] + r * delta_t] for r in range(1, R + 1)]
            opt.zero_grad()
            loss = _batch_loss(D, lat_train[b[:, 0], b[:, 1]], targets)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"{stage} loss {value} at epoch {epoch}, batch {b_idx}")
            backward(loss)
            opt.step()
            losses.append(value)
            hist.step_losses.append(value)
        val = _eval_loss(D, lat_val, R, delta_t, cfg.batch_size)
        rec = {"stage": stage, "epoch": epoch, "lr": opt.lr,
               "train_loss": float(np.mean(losses)), "val_loss": val}
        hist.epochs.append(rec)
        log.info("%s epoch %d lr %.3g train %.5f val %.5f", stage, epoch, opt.lr,
                 rec["train_loss"], val)
        if on_epoch is not None:
            on_epoch(rec)
        opt.lr = sched.update(val)
    bundle.dyn[delta_t] = D
    return hist


def train_dyn_models(bundle, ds, cfg: TrainConfig,
                     on_epoch: Optional[Callable[[dict], None]] = None) -> Dict[int, TrainHistory]:
    """Train every configured scale in ascending order (transfer chain)."""
    cfg.check_horizon(ds.train[0].T)
    tr_idx, val_idx = split_train_val(len(ds.train), cfg.val_fraction, cfg.seed)
    lat_all = encode_trajectories(ds.train, bundle.cae)
    latents = lat_all[tr_idx], lat_all[val_idx]
    return {dt: train_dyn_model(bundle, ds, cfg, dt, on_epoch, latents)
            for dt in sorted(cfg.delta_ts)}
