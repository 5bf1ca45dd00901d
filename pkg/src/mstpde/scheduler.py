"""Multi-scale inference: plan a horizon over the available time scales and run it.

A prediction encodes the initial field once, applies the planned dynamical
models in latent space and decodes once at the end (plus once per requested
intermediate).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .autoencoder import ConvAutoencoder, decode, encode
from .optim import nrmse
from .tensor import ShapeError, load_weights, save_weights
from .transformer import DynConfig, DynModel, dyn_step


class PlanError(ValueError):
    """No combination of the available scales reaches the target."""


@dataclass
class ModelBundle:
    cae: Optional[ConvAutoencoder] = None
    dyn: Dict[int, DynModel] = field(default_factory=dict)

    @property
    def scales(self) -> List[int]:
        return sorted(self.dyn)

    def validate(self) -> None:
        for dt, m in self.dyn.items():
            if m.delta_t != dt:
                raise ValueError(f"model stored under dt={dt} reports delta_t={m.delta_t}")
            if self.cae is not None and m.cfg.d_f != self.cae.d_f:
                raise ValueError(f"D^{dt} width {m.cfg.d_f} != autoencoder width {self.cae.d_f}")

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        if self.cae is not None:
            out.update({f"cae/{k}": v for k, v in self.cae.state_dict().items()})
            out["cae/scale"] = np.array(self.cae.scale)
        for dt, m in self.dyn.items():
            out.update({f"dyn{dt}/{k}": v for k, v in m.state_dict().items()})
        return out

    def meta(self) -> dict:
        return {"cae": None if self.cae is None else self.cae.config(),
                "dyn": {str(dt): m.cfg.to_dict() for dt, m in self.dyn.items()}}

    def save(self, path, extra_meta: Optional[dict] = None) -> None:
        self.validate()
        save_weights(path, self.arrays(), {**self.meta(), **(extra_meta or {})})

    def save_components(self, directory, extra_meta: Optional[dict] = None) -> List[Path]:
        """One checkpoint per component: ``cae.mstw`` and ``dyn{dt}.mstw``."""
        self.validate()
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arrays, meta = self.arrays(), self.meta()
        written = []
        groups = [("cae", "cae/")] if self.cae is not None else []
        groups += [(f"dyn{dt}", f"dyn{dt}/") for dt in self.scales]
        for name, prefix in groups:
            part = {k: v for k, v in arrays.items() if k.startswith(prefix)}
            part_meta = {"cae": meta["cae"] if name == "cae" else None,
                         "dyn": {k: v for k, v in meta["dyn"].items() if f"dyn{k}" == name}}
            path = directory / f"{name}.mstw"
            save_weights(path, part, {**part_meta, **(extra_meta or {})})
            written.append(path)
        return written

    @classmethod
    def load_components(cls, directory, scales: Optional[Sequence[int]] = None) -> "ModelBundle":
        directory = Path(directory)
        cae_path = directory / "cae.mstw"
        if not cae_path.exists():
            raise FileNotFoundError(f"no autoencoder checkpoint at {cae_path}")
        bundle = cls.load(cae_path)
        paths = sorted(directory.glob("dyn*.mstw")) if scales is None else \
            [directory / f"dyn{dt}.mstw" for dt in scales]
        for path in paths:
            if not path.exists():
                raise FileNotFoundError(f"no checkpoint for {path.stem} in {directory}")
            bundle.dyn.update(cls.load(path).dyn)
        return bundle

    @classmethod
    def load(cls, path) -> "ModelBundle":
        arrays, meta = load_weights(path)
        bundle = cls()
        if meta.get("cae") is not None:
            c = meta["cae"]
            bundle.cae = ConvAutoencoder(c["d_f"], tuple(c["widths"]), c["slope"], c["padding"])
            bundle.cae.load_state_dict({k[4:]: v for k, v in arrays.items()
                                        if k.startswith("cae/") and k != "cae/scale"})
            bundle.cae.scale = float(np.ravel(arrays["cae/scale"])[0])
        for key, c in meta.get("dyn", {}).items():
            dt = int(key)
            m = DynModel(dt, DynConfig(**c))
            prefix = f"dyn{dt}/"
            m.load_state_dict({k[len(prefix):]: v for k, v in arrays.items()
                               if k.startswith(prefix)})
            bundle.dyn[dt] = m
        return bundle


# planning -------------------------------------------------------------------------------

@lru_cache(maxsize=256)
def _min_coin_table(scales: tuple, target: int) -> tuple:
    inf = target + 1
    best = [0] + [inf] * target
    choice = [0] * (target + 1)
    for t in range(1, target + 1):
        for s in scales:  # descending, so ties keep the larger step
            if s <= t and best[t - s] + 1 < best[t]:
                best[t] = best[t - s] + 1
                choice[t] = s
    return tuple(best), tuple(choice)


def decompose_steps(target: int, scales: Iterable[int]) -> List[int]:
    """Fewest passes summing to ``target``, largest steps first.

    With ``{1, 2, 4, 8}`` this is the greedy binary split (40 -> five 8s).
    Sets without 1 are solved exactly too; an unreachable target raises
    :class:`PlanError`.
    """
    if int(target) != target or target < 0:
        raise ValueError(f"target must be a non-negative integer, got {target}")
    scales = tuple(sorted({int(s) for s in scales}, reverse=True))
    if not scales or scales[-1] < 1:
        raise ValueError(f"scales must be positive integers, got {scales}")
    target = int(target)
    if target == 0:
        return []
    if 1 in scales and all(a % b == 0 for a, b in zip(scales, scales[1:])):
        plan = []  # each scale divides the next: greedy is optimal and O(len(scales))
        for s in scales:
            plan += [s] * (target // s)
            target %= s
        return plan
    best, choice = _min_coin_table(scales, target)
    if best[target] > target:
        raise PlanError(f"target {target} cannot be reached with scales {sorted(scales)}")
    plan = []
    while target:
        plan.append(choice[target])
        target -= choice[target]
    return sorted(plan, reverse=True)


def advance_latent(z: np.ndarray, plan: Sequence[int], bundle: ModelBundle,
                   keep: bool = False):
    """Apply the plan's models in order; with ``keep`` also return each latent."""
    missing = sorted(set(plan) - set(bundle.dyn))
    if missing:
        raise PlanError(f"plan uses scales {missing} that the bundle does not have")
    trace = []
    for dt in plan:
        z = dyn_step(z, bundle.dyn[dt])
        if keep:
            trace.append(z)
    return (z, trace) if keep else z


def _check_resolution(s0: np.ndarray, bundle: ModelBundle) -> None:
    if bundle.cae is None:
        raise ValueError("bundle has no autoencoder")
    try:
        bundle.cae.latent_shape(*s0.shape[-2:])
    except ShapeError as exc:
        raise ShapeError(f"field resolution {s0.shape[-2:]} does not fit the bundle: {exc}")


def rollout_predict(s0, target: int, bundle: ModelBundle, intermediates: bool = False,
                    plan: Optional[Sequence[int]] = None):
    """Field at ``target`` recorded steps ahead of ``s0`` (one field or a batch).

    With ``intermediates`` also returns ``{elapsed_steps: field}`` decoded from
    the latents visited by the same plan.
    """
    s0 = np.asarray(s0, dtype=np.float64)
    _check_resolution(s0, bundle)
    plan = list(plan) if plan is not None else decompose_steps(target, bundle.scales)
    if sum(plan) != target:
        raise PlanError(f"plan {plan} sums to {sum(plan)}, not {target}")
    z = encode(s0, bundle.cae)
    z, trace = advance_latent(z, plan, bundle, keep=True)
    out = decode(z, bundle.cae)
    if not intermediates:
        return out
    elapsed = np.cumsum(plan)
    return out, {int(t): decode(zk, bundle.cae) for t, zk in zip(elapsed, trace)}


# evaluation -------------------------------------------------------------------------------

class BundlePredictor:
    """Predicts steps 1..horizon of a trajectory from its first snapshot.

    Step ``k`` uses the minimal plan for ``k``; latents shared between plans
    (common prefixes) are computed once.
    """

    def __init__(self, bundle: ModelBundle):
        self.bundle = bundle

    def passes(self, horizon: int) -> Dict[int, int]:
        counts: Dict[int, int] = {}
        for k in range(1, horizon + 1):
            for dt in decompose_steps(k, self.bundle.scales):
                counts[dt] = counts.get(dt, 0) + 1
        return counts

    def predict(self, traj: np.ndarray, horizon: int) -> np.ndarray:
        _check_resolution(traj, self.bundle)
        z0 = encode(traj[0], self.bundle.cae)
        cache = {(): z0}
        latents = []
        for k in range(1, horizon + 1):
            plan = tuple(decompose_steps(k, self.bundle.scales))
            n = len(plan)
            while plan[:n] not in cache:
                n -= 1
            z = cache[plan[:n]]
            for i in range(n, len(plan)):
                z = dyn_step(z, self.bundle.dyn[plan[i]])
                cache[plan[:i + 1]] = z
            latents.append(z)
        return decode(np.stack(latents), self.bundle.cae)


class GroundTruthPredictor:
    """Returns the reference snapshots: an error-free stub."""

    def predict(self, traj: np.ndarray, horizon: int) -> np.ndarray:
        return np.array(traj[1:horizon + 1])


class ZeroPredictor:
    def predict(self, traj: np.ndarray, horizon: int) -> np.ndarray:
        return np.zeros_like(traj[1:horizon + 1])


@dataclass
class EvalResult:
    errors: np.ndarray  # (n_samples, horizon)
    passes: Dict[int, int] = field(default_factory=dict)

    @property
    def curve(self) -> np.ndarray:
        return self.errors.mean(axis=0)

    @property
    def mean(self) -> float:
        """Mean over samples of each sample's mean over steps."""
        return float(self.errors.mean(axis=1).mean())

    def rows(self):
        for i, row in enumerate(self.errors):
            for k, e in enumerate(row, start=1):
                yield i, k, float(e)

    def summary(self) -> dict:
        return {"mean": self.mean, "curve": self.curve.tolist(),
                "n_samples": int(self.errors.shape[0]), "horizon": int(self.errors.shape[1]),
                "passes": {str(k): v for k, v in sorted(self.passes.items())}}


def evaluate_rollout(predictor, trajectories, horizon: int) -> EvalResult:
    """nRMSE of each predicted step against the reference, for every trajectory.

    ``predictor`` is a :class:`ModelBundle` or anything with
    ``predict(fields, horizon)``.
    """
    if isinstance(predictor, ModelBundle):
        predictor = BundlePredictor(predictor)
    fields_ = [t.fields if hasattr(t, "fields") else np.asarray(t) for t in trajectories]
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    for f in fields_:
        if horizon > f.shape[0] - 1:
            raise ValueError(f"horizon {horizon} exceeds trajectory length {f.shape[0]}")
    errors = np.zeros((len(fields_), horizon))
    for i, f in enumerate(fields_):
        pred = predictor.predict(f, horizon)
        for k in range(horizon):
            errors[i, k] = nrmse(pred[k], f[k + 1])
    passes = predictor.passes(horizon) if hasattr(predictor, "passes") else {}
    return EvalResult(errors, passes)
