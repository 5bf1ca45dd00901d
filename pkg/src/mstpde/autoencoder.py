"""Convolutional encoder P and decoder Q.

Encoder block: conv(3x3) -> 2x2 average pool -> Leaky ReLU.
Decoder block: 2x bilinear upsample -> conv(3x3) -> Leaky ReLU.
Four blocks each; the last block of each half has no activation, so a
field of N_x x N_y maps to a latent grid of (N_x/16) x (N_y/16) x d_f.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .optim import Adam, PlateauScheduler, nrmse_per_sample
from .tensor import Module, ShapeError, Tensor, as_tensor, backward, no_grad, ops, uniform_fan_in

log = logging.getLogger(__name__)

N_BLOCKS = 4
STRIDE = 2 ** N_BLOCKS


class TrainingError(RuntimeError):
    """Non-finite loss during training."""


class ConvLayer(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, activate: bool):
        fan_in = c_in * 9
        self.weight = uniform_fan_in(rng, (c_out, c_in, 3, 3), fan_in)
        self.bias = uniform_fan_in(rng, (c_out,), fan_in)
        self.activate = activate


class ConvAutoencoder(Module):
    """Encoder/decoder pair with channel widths ``widths + (d_f,)``.

    ``scale`` divides inputs before encoding and multiplies decoder
    outputs; it is set from the training data and is not trained.
    """

    def __init__(self, d_f: int = 32, widths=(16, 32, 64), slope: float = 0.01,
                 padding: str = "periodic", seed: int = 0):
        if len(widths) != N_BLOCKS - 1:
            raise ValueError(f"need {N_BLOCKS - 1} hidden widths, got {widths}")
        rng = np.random.default_rng(seed)
        chans = [1, *widths, d_f]
        self.d_f = d_f
        self.widths = tuple(widths)
        self.slope = slope
        self.padding = padding
        self.scale = 1.0
        self.upsample_boundary = "periodic" if padding == "periodic" else "clamp"
        self.enc = [ConvLayer(rng, chans[i], chans[i + 1], activate=i < N_BLOCKS - 1)
                    for i in range(N_BLOCKS)]
        rev = chans[::-1]
        self.dec = [ConvLayer(rng, rev[i], rev[i + 1], activate=i < N_BLOCKS - 1)
                    for i in range(N_BLOCKS)]

    def config(self) -> dict:
        return {"d_f": self.d_f, "widths": list(self.widths), "slope": self.slope,
                "padding": self.padding}

    def latent_shape(self, nx: int, ny: int) -> tuple:
        if nx % STRIDE or ny % STRIDE:
            raise ShapeError(f"field {nx}x{ny} is not divisible by {STRIDE}")
        return nx // STRIDE, ny // STRIDE, self.d_f

    def encode(self, s) -> Tensor:
        """Fields (B, N_x, N_y) -> latents (B, N_x/16, N_y/16, d_f)."""
        s = as_tensor(s)
        if s.ndim != 3:
            raise ShapeError(f"encode expects (B, N_x, N_y), got {s.shape}")
        self.latent_shape(*s.shape[1:])
        h = ops.reshape(ops.mul(s, 1.0 / self.scale), (s.shape[0], 1) + s.shape[1:])
        for layer in self.enc:
            h = ops.avg_pool2(ops.conv2d(h, layer.weight, layer.bias, self.padding))
            if layer.activate:
                h = ops.leaky_relu(h, self.slope)
        return ops.transpose(h, (0, 2, 3, 1))

    def decode(self, z) -> Tensor:
        """Latents (B, n_x, n_y, d_f) -> fields (B, 16 n_x, 16 n_y)."""
        z = as_tensor(z)
        if z.ndim != 4 or z.shape[-1] != self.d_f:
            raise ShapeError(f"decode expects (B, n_x, n_y, {self.d_f}), got {z.shape}")
        h = ops.transpose(z, (0, 3, 1, 2))
        for layer in self.dec:
            h = ops.conv2d(ops.upsample2_linear(h, self.upsample_boundary), layer.weight, layer.bias, self.padding)
            if layer.activate:
                h = ops.leaky_relu(h, self.slope)
        return ops.mul(ops.reshape(h, (h.shape[0],) + h.shape[2:]), self.scale)

    def reconstruct(self, s) -> Tensor:
        return self.decode(self.encode(s))


def encode(s, model: ConvAutoencoder) -> np.ndarray:
    """Encode one field (N_x, N_y) or a batch, without recording a graph."""
    arr = np.asarray(s, dtype=np.float64)
    single = arr.ndim == 2
    with no_grad():
        z = model.encode(arr[None] if single else arr).data
    return z[0] if single else z


def decode(z, model: ConvAutoencoder) -> np.ndarray:
    arr = np.asarray(z, dtype=np.float64)
    single = arr.ndim == 3
    with no_grad():
        s = model.decode(arr[None] if single else arr).data
    return s[0] if single else s


def split_train_val(n_traj: int, val_fraction: float, seed: int):
    """Hold out whole trajectories; with a single trajectory it validates on itself."""
    order = np.random.default_rng(seed).permutation(n_traj)
    n_val = int(round(val_fraction * n_traj)) if n_traj > 1 else 0
    n_val = min(max(n_val, 1 if n_traj > 1 and val_fraction > 0 else 0), n_traj - 1)
    val, train = sorted(order[:n_val].tolist()), sorted(order[n_val:].tolist())
    return train, (val or train)


@dataclass
class TrainHistory:
    epochs: List[dict] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)


def batched_nrmse(model: ConvAutoencoder, snaps: np.ndarray, batch_size: int) -> float:
    errs = []
    with no_grad():
        for i in range(0, len(snaps), batch_size):
            chunk = snaps[i:i + batch_size]
            errs.append(nrmse_per_sample(model.reconstruct(chunk), chunk).data)
    return float(np.concatenate(errs).mean())


def augment_batch(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random circular shift, axis flips, transpose (square grids) and sign.

    Reconstruction only needs these to preserve the snapshot distribution,
    which holds for isotropic periodic initial conditions such as the heat
    data.
    """
    out = np.empty_like(batch)
    nx, ny = batch.shape[1:]
    shifts = rng.integers(0, [nx, ny], size=(len(batch), 2))
    flips = rng.integers(0, 2, size=(len(batch), 3))
    signs = rng.choice([-1.0, 1.0], size=len(batch))
    for i, (sx, sy) in enumerate(shifts):
        s = np.roll(batch[i], (sx, sy), axis=(0, 1))
        if flips[i, 0]:
            s = s[::-1]
        if flips[i, 1]:
            s = s[:, ::-1]
        if flips[i, 2] and nx == ny:
            s = s.T
        out[i] = signs[i] * s
    return out


def train_autoencoder(ds, cfg, model: Optional[ConvAutoencoder] = None,
                      on_epoch: Optional[Callable[[dict], None]] = None):
    """Fit P and Q on every snapshot of ``ds.train`` with the nRMSE loss.

    Returns ``(model, history)``; ``history.epochs`` holds one record per
    epoch with the learning rate and train/validation nRMSE.
    """
    if model is None:
        model = ConvAutoencoder(d_f=cfg.d_f, seed=cfg.seed)
    train_idx, val_idx = split_train_val(len(ds.train), cfg.val_fraction, cfg.seed)
    snaps = np.concatenate([ds.train[i].fields for i in train_idx])
    val = np.concatenate([ds.train[i].fields for i in val_idx])
    model.latent_shape(*snaps.shape[1:])
    model.scale = float(snaps.std()) or 1.0

    opt = Adam(model.parameters(), lr=cfg.lr0)
    sched = PlateauScheduler(cfg.lr0, cfg.plateau_factor, cfg.patience, cfg.threshold)
    rng = np.random.default_rng(cfg.seed + 1)
    augment = getattr(cfg, "augment", False)  # duck-typed configs may omit it
    hist = TrainHistory()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(snaps))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = snaps[order[start:start + cfg.batch_size]]
            if augment:
                batch = augment_batch(batch, rng)
            opt.zero_grad()
            loss = nrmse_per_sample(model.reconstruct(batch), batch).mean()
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"autoencoder loss {value} at epoch {epoch}, batch {b}")
            backward(loss)
            opt.step()
            losses.append(value)
            hist.step_losses.append(value)
        val_err = batched_nrmse(model, val, cfg.batch_size)
        rec = {"stage": "ae", "epoch": epoch, "lr": opt.lr,
               "train_loss": float(np.mean(losses)), "val_loss": val_err}
        hist.epochs.append(rec)
        log.info("ae epoch %d lr %.3g train %.5f val %.5f", epoch, opt.lr, rec["train_loss"], val_err)
        if on_epoch is not None:
            on_epoch(rec)
        opt.lr = sched.update(val_err)
    return model, hist
