"""Ground-truth trajectories on the periodic square [0, L)^2.

Two solvers share the spectral grid helpers:

* :func:`solve_ns_vorticity` integrates 2D incompressible Navier-Stokes in
  vorticity form, ``w_t + u . grad(w) = nu lap(w) + f``, with a
  Crank-Nicolson step for diffusion and a Heun predictor-corrector for the
  advection term (2/3-rule dealiased).
* :func:`solve_heat` advances ``u_t = nu lap(u)`` with the exact spectral
  propagator ``exp(-nu |k|^2 dt)``.

Initial conditions are Gaussian random fields with spectrum
``(|k|^2 + tau^2)^(-alpha/2)`` (integer wavenumbers scaled by 2*pi).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Tuple, Union

import numpy as np

from .container import (ContainerError, CorruptHeaderError, ShapeMismatchError,
                        read_container, write_container)

Resolution = Union[int, Tuple[int, int]]

DATASET_MAGIC = b"MSTD"
DATASET_VERSION = 1


class BlowUpError(RuntimeError):
    """Raised when a solver state stops being finite."""


class CFLError(ValueError):
    """Raised when the solver step violates the advective stability bound."""


class ConfigHashMismatchError(ContainerError):
    """Stored config hash does not match the hash recomputed from the stored config."""


def stable_hash(obj) -> str:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()[:16]


def _res(resolution: Resolution) -> Tuple[int, int]:
    nx, ny = (resolution, resolution) if np.isscalar(resolution) else tuple(resolution)
    for n in (nx, ny):
        if n < 2 or n & (n - 1):
            raise ValueError(f"resolution must be a power of two, got {resolution}")
    return int(nx), int(ny)


def wavenumbers(nx: int, ny: int, length: float = 1.0):
    """Angular wavenumber grids ``(kx, ky)`` of shape (nx, ny) for ``rfft``-free use."""
    kx = 2 * np.pi / length * np.fft.fftfreq(nx, d=1.0 / nx)
    ky = 2 * np.pi / length * np.fft.fftfreq(ny, d=1.0 / ny)
    return np.meshgrid(kx, ky, indexing="ij")


def grid(nx: int, ny: int, length: float = 1.0):
    x = np.arange(nx) * length / nx
    y = np.arange(ny) * length / ny
    return np.meshgrid(x, y, indexing="ij")


@dataclass
class Trajectory:
    """Snapshots ``fields[t]`` recorded ``dt_record`` apart."""

    fields: np.ndarray
    dt_record: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.float64)
        if self.fields.ndim != 3 or self.fields.shape[0] < 2:
            raise ValueError(f"trajectory needs shape (T>=2, Nx, Ny), got {self.fields.shape}")

    @property
    def T(self) -> int:
        return self.fields.shape[0]

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.fields.shape[1:]

    def __len__(self) -> int:
        return self.T


@dataclass
class Dataset:
    train: List[Trajectory]
    test: List[Trajectory]
    metadata: dict = field(default_factory=dict)

    @property
    def resolution(self) -> Tuple[int, int]:
        return (self.train or self.test)[0].resolution


# initial conditions and forcing ---------------------------------------------

def sample_grf_initial(seed: int, resolution: Resolution = 32, alpha: float = 2.5,
                       tau: float = 7.0, amplitude: Optional[float] = None,
                       length: float = 1.0) -> np.ndarray:
    """Periodic zero-mean Gaussian random field, deterministic in ``seed``.

    White noise is coloured by ``sigma * (|k|^2 + tau^2)^(-alpha/2)`` with
    ``k`` in units of 2*pi/L. ``amplitude`` defaults to
    ``tau^(alpha - 1)``, which keeps the standard deviation of order one.
    """
    nx, ny = _res(resolution)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((nx, ny))
    kx, ky = wavenumbers(nx, ny, length=2 * np.pi)  # integer wavenumbers
    sigma = tau ** (alpha - 1.0) if amplitude is None else amplitude
    spec = sigma * ((2 * np.pi) ** 2 * (kx ** 2 + ky ** 2) + tau ** 2) ** (-alpha / 2.0)
    spec[0, 0] = 0.0
    # unit-variance noise has |FFT| ~ sqrt(nx*ny); rescale so each mode carries sigma*spec
    out = np.fft.ifft2(np.fft.fft2(noise) * spec * np.sqrt(nx * ny)).real
    return out - out.mean()


def make_forcing(name: str, resolution: Resolution, length: float = 1.0,
                 amplitude: float = 0.1) -> np.ndarray:
    """Named vorticity forcing: ``"li"``, ``"kolmogorov"`` or ``"none"``."""
    nx, ny = _res(resolution)
    x, y = grid(nx, ny, length)
    if name == "none":
        return np.zeros((nx, ny))
    if name == "li":
        phase = 2 * np.pi * (x + y) / length
        return amplitude * (np.sin(phase) + np.cos(phase))
    if name == "kolmogorov":
        n = 4
        kk = 2 * np.pi * n / length
        # curl of the body force (amplitude * sin(kk y), 0)
        return -amplitude * kk * np.cos(kk * y)
    raise ValueError(f"unknown forcing {name!r}; choose li, kolmogorov or none")


# solvers ------------------------------------------------------------------

def velocity_from_vorticity(w_hat: np.ndarray, kx: np.ndarray, ky: np.ndarray):
    k2 = kx ** 2 + ky ** 2
    psi_hat = np.divide(w_hat, k2, out=np.zeros_like(w_hat), where=k2 > 0)
    u = np.fft.ifft2(1j * ky * psi_hat).real
    v = np.fft.ifft2(-1j * kx * psi_hat).real
    return u, v


def cfl_dt(init: np.ndarray, length: float = 1.0, courant: float = 0.5) -> float:
    """Largest stable step ``courant * dx / max|u|`` for the initial velocity."""
    nx, ny = init.shape
    kx, ky = wavenumbers(nx, ny, length)
    u, v = velocity_from_vorticity(np.fft.fft2(init), kx, ky)
    speed = float(np.max(np.abs(u)) + np.max(np.abs(v)))
    dx = length / max(nx, ny)
    return np.inf if speed == 0 else courant * dx / speed


def _record_count(n_steps: int, record_every: int) -> int:
    if n_steps < 1 or record_every < 1 or n_steps < record_every:
        raise ValueError("need n_steps >= record_every >= 1")
    return n_steps // record_every + 1


def solve_ns_vorticity(init: np.ndarray, nu: float, forcing: Optional[np.ndarray],
                       dt_solver: float, n_steps: int, record_every: int,
                       length: float = 1.0, params: Optional[dict] = None) -> Trajectory:
    """Integrate vorticity NS and record every ``record_every`` steps.

    The step must satisfy ``dt_solver <= cfl_dt(init, length)``
    (Courant number 0.5 on the initial velocity); diffusion is implicit
    and adds no constraint. Raises :class:`BlowUpError` naming the step
    at which the state becomes non-finite.
    """
    init = np.asarray(init, dtype=np.float64)
    nx, ny = init.shape
    n_rec = _record_count(n_steps, record_every)
    bound = cfl_dt(init, length)
    if dt_solver > bound:
        raise CFLError(f"dt_solver={dt_solver} exceeds CFL bound {bound:.3g}")
    kx, ky = wavenumbers(nx, ny, length)
    k2 = kx ** 2 + ky ** 2
    kmax_x = 2 * np.pi / length * (nx // 2)
    kmax_y = 2 * np.pi / length * (ny // 2)
    dealias = (np.abs(kx) <= 2.0 / 3.0 * kmax_x) & (np.abs(ky) <= 2.0 / 3.0 * kmax_y)
    f_hat = np.zeros((nx, ny), complex) if forcing is None else np.fft.fft2(forcing)
    f_hat[0, 0] = 0.0

    def advection(w_hat):
        u, v = velocity_from_vorticity(w_hat, kx, ky)
        wx = np.fft.ifft2(1j * kx * w_hat).real
        wy = np.fft.ifft2(1j * ky * w_hat).real
        n_hat = -np.fft.fft2(u * wx + v * wy) * dealias
        n_hat[0, 0] = 0.0  # u . grad(w) = div(u w) has zero mean
        return n_hat

    half = 0.5 * dt_solver * nu * k2
    w_hat = np.fft.fft2(init)
    out = np.empty((n_rec, nx, ny))
    out[0] = init
    for step in range(1, n_steps + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            n0 = advection(w_hat)
            w_pred = ((1.0 - half) * w_hat + dt_solver * (f_hat + n0)) / (1.0 + half)
            n1 = advection(w_pred)
            w_hat = ((1.0 - half) * w_hat + dt_solver * f_hat + 0.5 * dt_solver * (n0 + n1)) \
                / (1.0 + half)
        if not np.all(np.isfinite(w_hat)):
            raise BlowUpError(f"vorticity became non-finite at solver step {step}")
        if step % record_every == 0 and step // record_every < n_rec:
            out[step // record_every] = np.fft.ifft2(w_hat).real
    p = {"pde": "ns", "nu": nu, "dt_solver": dt_solver, "record_every": record_every}
    p.update(params or {})
    return Trajectory(out, dt_record=dt_solver * record_every, params=p)


def solve_heat(init: np.ndarray, nu: float, dt_solver: float, n_steps: int,
               record_every: int, length: float = 1.0,
               params: Optional[dict] = None) -> Trajectory:
    """Advance the heat equation with the exact spectral propagator."""
    init = np.asarray(init, dtype=np.float64)
    nx, ny = init.shape
    n_rec = _record_count(n_steps, record_every)
    kx, ky = wavenumbers(nx, ny, length)
    decay = np.exp(-nu * (kx ** 2 + ky ** 2) * dt_solver)
    u_hat = np.fft.fft2(init)
    out = np.empty((n_rec, nx, ny))
    out[0] = init
    for step in range(1, n_steps + 1):
        u_hat = u_hat * decay
        if not np.all(np.isfinite(u_hat)):
            raise BlowUpError(f"heat state became non-finite at solver step {step}")
        if step % record_every == 0 and step // record_every < n_rec:
            out[step // record_every] = np.fft.ifft2(u_hat).real
    p = {"pde": "heat", "nu": nu, "dt_solver": dt_solver, "record_every": record_every}
    p.update(params or {})
    return Trajectory(out, dt_record=dt_solver * record_every, params=p)


def kinetic_energy(w: np.ndarray, length: float = 1.0) -> float:
    """Kinetic energy ``0.5 * mean(|u|^2)`` of the flow with vorticity ``w``."""
    nx, ny = w.shape
    kx, ky = wavenumbers(nx, ny, length)
    u, v = velocity_from_vorticity(np.fft.fft2(w), kx, ky)
    return 0.5 * float(np.mean(u ** 2 + v ** 2))


# datasets -----------------------------------------------------------------

@dataclass
class GeneratorConfig:
    """Everything that determines a generated dataset."""

    pde: str = "ns"
    resolution: int = 32
    n_train: int = 50
    n_test: int = 10
    T: int = 30
    nu: float = 1e-3
    dt_solver: float = 1e-2
    record_every: int = 100
    forcing: str = "li"
    grf_alpha: float = 2.5
    grf_tau: float = 7.0
    length: float = 1.0
    seed: int = 0
    spin_up: int = 0  # recorded steps simulated but dropped before the first kept snapshot

    @classmethod
    def heat_default(cls, **kw) -> "GeneratorConfig":
        base = dict(pde="heat", n_train=20, n_test=5, T=20, nu=2e-3, dt_solver=0.25,
                    record_every=4, forcing="none", grf_alpha=8.0, grf_tau=3.0)
        base.update(kw)
        return cls(**base)

    @classmethod
    def ns_default(cls, **kw) -> "GeneratorConfig":
        """Vorticity defaults; the first 10 recorded steps (the transient off the
        rough initial field) are simulated and discarded."""
        base = dict(spin_up=10)
        base.update(kw)
        return cls(**base)

    def validate(self) -> None:
        if self.pde not in ("ns", "heat"):
            raise ValueError(f"pde must be 'ns' or 'heat', got {self.pde!r}")
        _res(self.resolution)
        if self.resolution % 16:
            raise ValueError(f"resolution {self.resolution} is not divisible by 16")
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError("need n_train >= 1 and n_test >= 0")
        if self.T < 2:
            raise ValueError("need T >= 2 recorded snapshots")
        if self.nu < 0 or self.dt_solver <= 0 or self.record_every < 1:
            raise ValueError("need nu >= 0, dt_solver > 0, record_every >= 1")
        if self.spin_up < 0:
            raise ValueError(f"spin_up must be >= 0, got {self.spin_up}")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return stable_hash(self.to_dict())


def initial_condition_seeds(cfg: GeneratorConfig) -> Tuple[List[int], List[int]]:
    """Distinct per-trajectory seeds; train and test sets never share one."""
    n = cfg.n_train + cfg.n_test
    state = np.random.SeedSequence(cfg.seed).generate_state(2 * n + 8, dtype=np.uint32)
    seeds = list(dict.fromkeys(int(s) for s in state))[:n]
    return seeds[:cfg.n_train], seeds[cfg.n_train:]


def generate_trajectory(cfg: GeneratorConfig, ic_seed: int) -> Trajectory:
    init = sample_grf_initial(ic_seed, cfg.resolution, cfg.grf_alpha, cfg.grf_tau,
                              length=cfg.length)
    n_steps = (cfg.T - 1 + cfg.spin_up) * cfg.record_every
    params = {"seed": ic_seed, "spin_up": cfg.spin_up}
    if cfg.pde == "heat":
        traj = solve_heat(init, cfg.nu, cfg.dt_solver, n_steps, cfg.record_every,
                          cfg.length, params=params)
    else:
        forcing = make_forcing(cfg.forcing, cfg.resolution, cfg.length)
        params["forcing"] = cfg.forcing
        traj = solve_ns_vorticity(init, cfg.nu, forcing, cfg.dt_solver, n_steps,
                                  cfg.record_every, cfg.length, params=params)
    traj.fields = traj.fields[cfg.spin_up:]
    return traj


def generate_dataset(cfg: GeneratorConfig) -> Dataset:
    cfg.validate()
    train_seeds, test_seeds = initial_condition_seeds(cfg)
    train = [generate_trajectory(cfg, s) for s in train_seeds]
    test = [generate_trajectory(cfg, s) for s in test_seeds]
    meta = {"config": cfg.to_dict(), "config_hash": cfg.hash(),
            "train_seeds": train_seeds, "test_seeds": test_seeds}
    return Dataset(train, test, meta)


def write_dataset(ds: Dataset, path) -> None:
    trajs, blocks = [], []
    for split, items in (("train", ds.train), ("test", ds.test)):
        for i, tr in enumerate(items):
            name = f"{split}/{i}"
            trajs.append({"block": name, "split": split, "dt_record": tr.dt_record,
                          "params": tr.params})
            blocks.append((name, tr.fields))
    header = {"format": "mstpde-dataset", "metadata": ds.metadata, "trajectories": trajs}
    write_container(path, DATASET_MAGIC, DATASET_VERSION, header, blocks)


def read_dataset(path) -> Dataset:
    header, arrays = read_container(path, DATASET_MAGIC, DATASET_VERSION)
    try:
        entries = header["trajectories"]
        meta = header["metadata"]
    except KeyError as exc:
        raise CorruptHeaderError(f"{path}: dataset header lacks {exc}") from None
    splits = {"train": [], "test": []}
    resolution = None
    for e in entries:
        arr = arrays[e["block"]]
        if arr.ndim != 3 or arr.shape[0] < 2:
            raise ShapeMismatchError(f"{path}: trajectory {e['block']} has shape {arr.shape}")
        if resolution is None:
            resolution = arr.shape[1:]
        elif arr.shape[1:] != resolution:
            raise ShapeMismatchError(
                f"{path}: trajectory {e['block']} resolution {arr.shape[1:]} != {resolution}")
        splits[e["split"]].append(Trajectory(arr, e["dt_record"], e["params"]))
    if "config" in meta and "config_hash" in meta:
        recomputed = stable_hash(meta["config"])
        if recomputed != meta["config_hash"]:
            raise ConfigHashMismatchError(
                f"{path}: config hash {meta['config_hash']} != recomputed {recomputed}")
    return Dataset(splits["train"], splits["test"], meta)
