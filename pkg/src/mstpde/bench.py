"""Micro-benchmarks: attention cost against token count, training throughput and
passes saved by planning.

Timings are informational. Pass counts are exact and come from
:func:`mstpde.scheduler.decompose_steps`.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .attention import AttentionConfig, attention_head, make_heads
from .pde import stable_hash
from .scheduler import decompose_steps
from .tensor import no_grad


@dataclass
class BenchRecord:
    scenario: str
    wall_time: float
    tokens: int = 0
    passes: int = 0
    baseline_passes: int = 0
    config_hash: str = ""


def bench_attention_scaling(ns: Sequence[int], d_f: int = 32, variant: str = "M0",
                            repeats: int = 3, seed: int = 0) -> List[BenchRecord]:
    """Best-of-``repeats`` time of one head on ``n`` tokens, for each ``n``."""
    ns = list(ns)
    if ns != sorted(ns) or not ns or ns[0] < 1:
        raise ValueError("token counts must be positive and ascending")
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(variant, d_f=d_f, n_heads=1)
    head = make_heads(rng, cfg)[0]
    h = stable_hash({"bench": "attention", "d_f": d_f, "variant": variant, "seed": seed})
    out = []
    for n in ns:
        f = rng.normal(size=(1, n, d_f))
        best = np.inf
        with no_grad():
            for _ in range(repeats):
                t0 = time.perf_counter()
                attention_head(f, None, head)
                best = min(best, time.perf_counter() - t0)
        out.append(BenchRecord(f"attention_n{n}", best, tokens=n, config_hash=h))
    return out


def growth_exponent(records: Sequence[BenchRecord]) -> float:
    """Least-squares slope of log(time) against log(n)."""
    n = np.log([r.tokens for r in records])
    t = np.log([r.wall_time for r in records])
    return float(np.polyfit(n, t, 1)[0])


def bench_pass_savings(horizons: Iterable[int], scales: Sequence[int] = (1, 2, 4, 8)
                       ) -> List[BenchRecord]:
    h = stable_hash({"bench": "passes", "scales": sorted(scales)})
    out = []
    for horizon in horizons:
        t0 = time.perf_counter()
        plan = decompose_steps(horizon, scales)
        elapsed = time.perf_counter() - t0
        base = decompose_steps(horizon, [min(scales)])
        out.append(BenchRecord(f"passes_h{horizon}", elapsed, passes=len(plan),
                               baseline_passes=len(base), config_hash=h))
    return out


def bench_training_throughput(steps: int = 3, batch_size: int = 16, resolution: int = 32,
                              seed: int = 0) -> List[BenchRecord]:
    """Seconds per optimizer step for the autoencoder and for one D^1 at R=1."""
    from .autoencoder import ConvAutoencoder
    from .optim import Adam, nrmse_per_sample
    from .tensor import ops
    from .training import latent_rollout_loss
    from .transformer import DynConfig, DynModel

    rng = np.random.default_rng(seed)
    snaps = rng.normal(size=(batch_size, resolution, resolution))
    cae = ConvAutoencoder(seed=seed)
    n = resolution // 16
    latents = rng.normal(size=(batch_size + 1, n, n, cae.d_f))  # batch_size R=1 starts
    dyn = DynModel(1, DynConfig(d_f=cae.d_f), seed=seed)
    h = stable_hash({"bench": "throughput", "batch": batch_size, "res": resolution,
                     "seed": seed})

    def cae_loss():
        return ops.mean(nrmse_per_sample(cae.reconstruct(snaps), snaps))

    def dyn_loss():
        return latent_rollout_loss(dyn, latents, 1, 1)

    out = []
    for name, model, loss_fn in (("cae", cae, cae_loss), ("dyn", dyn, dyn_loss)):
        opt = Adam([p for _, p in model.named_parameters()], lr=1e-3)
        t0 = time.perf_counter()
        for _ in range(steps):
            loss = loss_fn()
            opt.zero_grad()
            loss.backward()
            opt.step()
        out.append(BenchRecord(f"train_step_{name}", (time.perf_counter() - t0) / steps,
                               tokens=n * n, config_hash=h))
    return out


def write_csv(records: Sequence[BenchRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(asdict(records[0])))
        w.writeheader()
        w.writerows(asdict(r) for r in records)


def main(argv: Optional[List[str]] = None) -> None:
    import argparse

    p = argparse.ArgumentParser(prog="python -m mstpde.bench")
    p.add_argument("--out", default="bench.csv")
    args = p.parse_args(argv)
    att = bench_attention_scaling([16, 64, 256, 1024])
    passes = bench_pass_savings(range(1, 65))
    steps = bench_training_throughput()
    write_csv(att + steps + passes, args.out)
    for a, b in zip(att, att[1:]):
        print(f"n {a.tokens} -> {b.tokens}: time x{b.wall_time / a.wall_time:.2f}")
    print(f"fitted exponent {growth_exponent(att):.2f}")
    for r in steps:
        print(f"{r.scenario}: {r.wall_time * 1e3:.1f} ms per step")
    total = sum(r.passes for r in passes)
    base = sum(r.baseline_passes for r in passes)
    print(f"horizons 1..64: {total} passes with scales 1,2,4,8 vs {base} with 1 only")


if __name__ == "__main__":
    main()
