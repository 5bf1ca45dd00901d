"""Command-line entry point: ``mstpde generate | train | eval | report``.

Settings come from an optional YAML file (``--config``) with sections
``data``, ``train`` and ``eval``; command-line flags override it. Outputs go
under ``$MSTPDE_OUT`` (default ``./runs``) unless a path is absolute.

Exit codes: 0 success, 1 invalid input or configuration, 2 failure while
computing.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import re
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import yaml

from .autoencoder import ConvAutoencoder, train_autoencoder
from .container import ContainerError
from .pde import GeneratorConfig, generate_dataset, read_dataset, stable_hash, write_dataset
from .scheduler import (GroundTruthPredictor, ModelBundle, ZeroPredictor, evaluate_rollout,
                        rollout_predict)
from .training import TrainConfig, train_dyn_models

log = logging.getLogger("mstpde")

OUT_ENV = "MSTPDE_OUT"
EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class ValidationError(ValueError):
    """Bad flags or configuration, detected before any computation."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def resolve(path) -> Path:
    path = Path(path)
    return path if path.is_absolute() else out_root() / path


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# "ae" keys override "train" for the autoencoder stage only
CONFIG_SECTIONS = {"data", "train", "ae", "eval"}


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}")
    if not isinstance(cfg, dict) or set(cfg) - CONFIG_SECTIONS:
        raise ValidationError(f"config {path} must be a mapping with sections "
                              f"{'/'.join(sorted(CONFIG_SECTIONS))}")
    if not all(isinstance(v, dict) for v in cfg.values()):
        raise ValidationError(f"config {path}: every section must be a mapping")
    return cfg


def _override(base: dict, **flags) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def parse_int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise ValidationError("empty list")
    return values


def expand_values(text: str) -> List[str]:
    """``M0..M4`` -> M0,M1,...,M4; ``1..3`` -> 1,2,3; otherwise split on commas."""
    m = re.fullmatch(r"([A-Za-z]*)(\d+)\.\.\1(\d+)", text)
    if m:
        prefix, lo, hi = m.group(1), int(m.group(2)), int(m.group(3))
        if hi < lo:
            raise ValidationError(f"empty range {text!r}")
        return [f"{prefix}{i}" for i in range(lo, hi + 1)]
    return [v for v in text.split(",") if v]


SWEEP_KEYS = {"variant": str, "rollout": int}


def parse_sweep(items: List[str]) -> Dict[str, list]:
    grid = {}
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or key not in SWEEP_KEYS:
            raise ValidationError(f"sweep terms look like variant=M0..M4 or rollout=1,2,4; "
                                  f"got {item!r}")
        try:
            grid[key] = [SWEEP_KEYS[key](v) for v in expand_values(values)]
        except ValueError:
            raise ValidationError(f"bad values in sweep term {item!r}")
    return grid


# generate ------------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg_file = load_config(args.config).get("data", {})
    kw = _override(cfg_file, pde=args.pde, resolution=args.res, n_train=args.train,
                   n_test=args.test, T=args.T, nu=args.nu, seed=args.seed)
    pde = kw.get("pde", "ns")
    try:
        cfg = (GeneratorConfig.heat_default if pde == "heat" else GeneratorConfig.ns_default)(**kw)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid dataset configuration: {exc}")
    out = resolve(args.out or f"data/{cfg.pde}-{cfg.hash()}.mstd")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(generate_dataset(cfg), out)
    print(json.dumps({"dataset": str(out), "config_hash": cfg.hash(), "seed": cfg.seed,
                      "sha256": file_sha256(out)}))
    return EXIT_OK


# train -----------------------------------------------------------------------------------

def train_config_from(args, cfg_file: dict) -> TrainConfig:
    kw = _override(cfg_file, epochs=args.epochs, batch_size=args.batch_size, lr0=args.lr,
                   rollout=args.rollout, variant=args.variant, seed=args.seed, d_f=args.d_f,
                   n_layers=args.layers, n_heads=args.heads,
                   delta_ts=parse_int_list(args.scales) if args.scales else None)
    if args.no_transfer:
        kw["transfer"] = False
    if args.augment:
        kw["augment"] = True
    kw.pop("ae_epochs", None)
    try:
        return TrainConfig.from_dict(kw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid training configuration: {exc}")


class MetricsLog:
    """Line-delimited JSON records, one per epoch."""

    def __init__(self, path: Path, config_hash: str, seed: int, append: bool):
        self.path, self.config_hash, self.seed = path, config_hash, seed
        if not append:
            path.write_text("")

    def __call__(self, rec: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps({**rec, "config_hash": self.config_hash, "seed": self.seed},
                                sort_keys=True) + "\n")


def read_metrics(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def run_hash(ds_meta: dict, tcfg: TrainConfig, ae_cfg: Optional[TrainConfig] = None) -> str:
    return stable_hash({"data": ds_meta.get("config_hash"), "train": tcfg.to_dict(),
                        "ae": None if ae_cfg is None else ae_cfg.to_dict()})


def ae_config_from(args, tcfg: TrainConfig, file_cfg: dict) -> TrainConfig:
    over = dict(file_cfg.get("ae", {}))
    legacy = file_cfg.get("train", {}).get("ae_epochs")
    if args.ae_epochs is not None:
        over["epochs"] = args.ae_epochs
    elif "epochs" not in over and legacy is not None:
        over["epochs"] = legacy
    try:
        return TrainConfig.from_dict({**tcfg.to_dict(), **over})
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid autoencoder configuration: {exc}")


def cmd_train(args) -> int:
    file_cfg = load_config(args.config)
    tcfg = train_config_from(args, file_cfg.get("train", {}))
    ae_cfg = ae_config_from(args, tcfg, file_cfg)
    run = resolve(args.run)
    data_path = resolve(args.data)
    if not data_path.exists():
        raise ValidationError(f"dataset {data_path} does not exist")
    if args.stage == "dyn" and not (run / "cae.mstw").exists():
        raise ValidationError(f"--stage dyn needs an autoencoder checkpoint at {run / 'cae.mstw'}; "
                              "run --stage ae first")
    ds = read_dataset(data_path)
    if args.stage != "ae":
        try:
            tcfg.check_horizon(ds.train[0].T)
        except ValueError as exc:
            raise ValidationError(str(exc))
    run.mkdir(parents=True, exist_ok=True)
    h = run_hash(ds.metadata, tcfg, ae_cfg)
    meta = {"config_hash": h, "seed": tcfg.seed, "dataset_hash": ds.metadata.get("config_hash")}
    (run / "config.json").write_text(json.dumps({"train": tcfg.to_dict(), "ae": ae_cfg.to_dict(),
                                                 "dataset": str(data_path), **meta},
                                                indent=2, sort_keys=True))
    metrics = MetricsLog(run / "metrics.jsonl", h, tcfg.seed, append=args.stage == "dyn")
    if args.stage in ("ae", "all"):
        cae, _ = train_autoencoder(ds, ae_cfg, ConvAutoencoder(d_f=tcfg.d_f, seed=tcfg.seed),
                                   on_epoch=metrics)
        ModelBundle(cae).save_components(run, meta)
    if args.stage in ("dyn", "all"):
        bundle = ModelBundle.load_components(run, scales=[])
        train_dyn_models(bundle, ds, tcfg, on_epoch=metrics)
        bundle.save_components(run, meta)
    print(json.dumps({"run": str(run), "config_hash": h,
                      "checkpoints": sorted(p.name for p in run.glob("*.mstw"))}))
    return EXIT_OK


# eval ------------------------------------------------------------------------------------

def write_eval(result, out_dir: Path, meta: dict, plots: bool, sample=None) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "eval.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "step", "nrmse"])
        w.writerows((i, k, f"{e:.12g}") for i, k, e in result.rows())
    summary = {**result.summary(), **meta}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    if plots:
        from . import plots as plotting
        plotting.error_curve(result.curve, out_dir / "error_curve.png")
        if sample is not None:
            plotting.field_panels(*sample, out_dir / "fields.png")
    return summary


def cmd_eval(args) -> int:
    ecfg = load_config(args.config).get("eval", {})
    horizon = args.horizon or ecfg.get("horizon", 16)
    run = resolve(args.run)
    data_path = resolve(args.data)
    if not data_path.exists():
        raise ValidationError(f"dataset {data_path} does not exist")
    sweep = parse_sweep(args.sweep) if args.sweep else None
    if sweep and args.stub:
        raise ValidationError("--sweep and --stub cannot be combined")
    ds = read_dataset(data_path)
    tests = ds.test or ds.train
    if horizon > tests[0].T - 1:
        raise ValidationError(f"horizon {horizon} exceeds trajectory length {tests[0].T}")
    if sweep:
        return _eval_sweep(args, run, ds, horizon, sweep)
    out_dir = resolve(args.out) if args.out else run / "eval"
    if args.stub:
        predictor = {"truth": GroundTruthPredictor(), "zero": ZeroPredictor()}[args.stub]
        meta = {"predictor": f"stub:{args.stub}", "config_hash": ds.metadata.get("config_hash")}
        sample = None
    else:
        predictor = ModelBundle.load_components(run)
        cfg_meta = json.loads((run / "config.json").read_text()) if (run / "config.json").exists() \
            else {}
        meta = {"predictor": "bundle", "scales": predictor.scales,
                "config_hash": cfg_meta.get("config_hash"), "seed": cfg_meta.get("seed")}
        f0 = tests[0].fields
        sample = (f0[horizon], rollout_predict(f0[0], horizon, predictor))
    result = evaluate_rollout(predictor, tests, horizon)
    summary = write_eval(result, out_dir, meta, args.plots, sample)
    print(json.dumps({"eval": str(out_dir), "mean": summary["mean"]}))
    return EXIT_OK


def _eval_sweep(args, run: Path, ds, horizon: int, grid: Dict[str, list]) -> int:
    base = json.loads((run / "config.json").read_text())["train"] \
        if (run / "config.json").exists() else {}
    if not (run / "cae.mstw").exists():
        raise ValidationError(f"sweep needs a trained autoencoder in {run}")
    keys = sorted(grid)
    configs = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        try:
            tcfg = TrainConfig.from_dict({**base, **dict(zip(keys, combo))})
            tcfg.check_horizon(ds.train[0].T)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"sweep point {dict(zip(keys, combo))}: {exc}")
        configs.append((dict(zip(keys, combo)), tcfg))
    out_dir = resolve(args.out) if args.out else run / "sweep"
    rows = []
    for point, tcfg in configs:
        name = "-".join(f"{k}{v}" for k, v in point.items())
        bundle = ModelBundle.load_components(run, scales=[])
        metrics = MetricsLog(out_dir / name / "metrics.jsonl", stable_hash(tcfg.to_dict()),
                             tcfg.seed, append=False) if _mk(out_dir / name) else None
        train_dyn_models(bundle, ds, tcfg, on_epoch=metrics)
        result = evaluate_rollout(bundle, ds.test or ds.train, horizon)
        write_eval(result, out_dir / name, {"point": point, "config_hash":
                                            stable_hash(tcfg.to_dict()), "seed": tcfg.seed},
                   plots=False)
        rows.append({**point, "mean": result.mean})
        log.info("sweep %s mean nRMSE %.5f", point, result.mean)
    with (out_dir / "grid.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys + ["mean"])
        w.writeheader()
        w.writerows(rows)
    (out_dir / "grid.json").write_text(json.dumps(rows, indent=2))
    if args.plots:
        from . import plots as plotting
        plotting.sweep_grid(rows, keys, out_dir / "grid.png")
    print(json.dumps({"sweep": str(out_dir), "points": len(rows)}))
    return EXIT_OK


def _mk(path: Path) -> bool:
    path.mkdir(parents=True, exist_ok=True)
    return True


# report ----------------------------------------------------------------------------------

def cmd_report(args) -> int:
    run = resolve(args.run)
    metrics_path = run / "metrics.jsonl"
    if not metrics_path.exists():
        raise ValidationError(f"no metrics log at {metrics_path}")
    from . import plots as plotting
    records = read_metrics(metrics_path)
    out = resolve(args.out) if args.out else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    plotting.learning_curves(records, out / "learning_curves.png")
    lines = ["| stage | epochs | final lr | final train | final val |", "|---|---|---|---|---|"]
    for stage in dict.fromkeys(r["stage"] for r in records):
        last = [r for r in records if r["stage"] == stage][-1]
        lines.append(f"| {stage} | {last['epoch'] + 1} | {last['lr']:.3g} | "
                     f"{last['train_loss']:.5f} | {last['val_loss']:.5f} |")
    summary = run / "eval" / "summary.json"
    if summary.exists():
        s = json.loads(summary.read_text())
        lines += ["", f"Mean rollout nRMSE over {s['horizon']} steps: {s['mean']:.5f}"]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    print(json.dumps({"report": str(out)}))
    return EXIT_OK


# parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mstpde", description="Latent multi-scale transformer surrogates for PDEs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="simulate a dataset")
    g.add_argument("--config")
    g.add_argument("--pde", choices=["ns", "heat"])
    g.add_argument("--res", type=int)
    g.add_argument("--train", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--T", type=int)
    g.add_argument("--nu", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the autoencoder and/or dynamical models")
    t.add_argument("--config")
    t.add_argument("--stage", choices=["ae", "dyn", "all"], default="all")
    t.add_argument("--data", required=True)
    t.add_argument("--run", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--ae-epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--rollout", type=int)
    t.add_argument("--scales")
    t.add_argument("--variant", choices=["M0", "M1", "M2", "M3", "M4"])
    t.add_argument("--d-f", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-transfer", action="store_true")
    t.add_argument("--augment", action="store_true",
                   help="random shift/flip/transpose/sign of autoencoder training snapshots")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate rollouts on the test split")
    e.add_argument("--config")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--horizon", type=int)
    e.add_argument("--stub", choices=["truth", "zero"])
    e.add_argument("--sweep", nargs="+", metavar="KEY=VALUES")
    e.add_argument("--plots", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="plots and a markdown table from a run's logs")
    r.add_argument("--run", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ContainerError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
