"""Command-line entry point.

Commands: ``gen-data`` (synthetic dataset), ``train``, ``eval``, ``export``
(attention / tangent / adjacency CSVs), ``check-grad``. Flags mirror the run
config in kebab-case. Exit codes: 0 success, 2 config error, 3 data error,
4 numerical failure.

``GEO_SPD_THREADS`` caps the internal worker count; all reductions are
sequential in this version, so results never depend on it.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as dataio
from .config import RunConfig
from .errors import (CorruptData, IncompatibleFormat, InvalidInput, IoError,
                     NotPositiveDefinite, NumericalFailure)
from .gradcheck import CHECKS, run_checks
from .model import Trainer, evaluate, forward, prepare_graphs

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _worker_cap() -> int:
    raw = os.environ.get("GEO_SPD_THREADS")
    if raw is None:
        return 1
    try:
        cap = int(raw)
    except ValueError:
        raise InvalidInput(f"GEO_SPD_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise InvalidInput(f"GEO_SPD_THREADS must be positive, got {cap}")
    return cap


def _metrics_json(metrics_by_split: dict) -> str:
    def clean(m):
        return {k: (None if isinstance(v, float) and math.isnan(v) else v)
                for k, v in m.items()}

    return json.dumps({s: clean(m.as_dict()) for s, m in metrics_by_split.items()},
                      indent=2, sort_keys=True) + "\n"


def _add_run_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with run-config values")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--d", type=int, help="encoder output channels (signal SPD dim)")
    p.add_argument("--l", type=int, help="attention-space SPD dim")
    p.add_argument("--beta", type=float, help="alignment loss weight in [0, 1)")
    p.add_argument("--kappa", type=float, help="alignment temperature")
    p.add_argument("--tau", type=float, help="attention softmax temperature")
    p.add_argument("--tau-top", type=int, dest="tau_top", help="kept similarities per node")
    p.add_argument("--eps", type=float, help="SPD regularization")
    p.add_argument("--reeig-threshold", type=float, dest="reeig_threshold")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--meta-optimizer", dest="meta_optimizer",
                   action=argparse.BooleanOptionalAction,
                   help="retract BiMap weights to the Stiefel manifold")
    p.add_argument("--query-source", dest="query_source", choices=["node-spd"])


def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {
        name: getattr(args, name)
        for name in ("dataset", "d", "l", "beta", "kappa", "tau", "tau_top", "eps",
                     "reeig_threshold", "lr", "batch_size", "epochs", "seed",
                     "meta_optimizer", "query_source")
        if getattr(args, name, None) is not None
    }
    return cfg.override(**overrides)


def cmd_gen_data(args) -> int:
    balance = tuple(1.0 / args.classes for _ in range(args.classes))
    manifest = dataio.DatasetManifest(
        num_trials=args.trials, channels=args.channels, epochs=args.epochs,
        samples_per_epoch=args.samples, sample_rate=args.sample_rate,
        num_classes=args.classes, seed=args.seed, class_balance=balance,
        profile=args.profile,
    )
    spec = dataio.default_synth_spec(manifest, args.profile, noise_level=args.noise)
    out = dataio.generate(spec, manifest, args.out)
    print(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    print(f"dataset written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if not cfg.dataset:
        raise InvalidInput("train needs --dataset (or a config file providing it)")
    print(cfg.to_json())
    ds = dataio.load(cfg.dataset)
    mc = cfg.model_config(ds.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")

    splits = ds.split()
    trials = ds.trials64()
    structures = prepare_graphs(trials, mc)
    train_idx = splits["train"]
    trainer = Trainer(mc, seed=cfg.seed, lr=cfg.lr, meta_optimizer=cfg.meta_optimizer)

    rows = ["epoch,loss,ce,geotop"]
    last_good = trainer.params
    failure = None
    for epoch in range(cfg.epochs):
        try:
            history = trainer.train(trials[train_idx], ds.labels[train_idx],
                                    [structures[i] for i in train_idx],
                                    epochs=1, batch_size=cfg.batch_size)
        except (NumericalFailure, NotPositiveDefinite) as exc:
            failure = exc
            break
        rows.append("%d,%.17g,%.17g,%.17g" % (
            epoch,
            float(np.mean([s.loss for s in history])),
            float(np.mean([s.ce for s in history])),
            float(np.mean([s.geotop for s in history])),
        ))
        last_good = trainer.params
    (out / "loss.csv").write_text("\n".join(rows) + "\n")
    ckpt.save(out / "checkpoint.bin", last_good, mc)
    if failure is not None:
        print(f"training aborted: {failure}", file=sys.stderr)
        print(f"last good checkpoint retained at {out / 'checkpoint.bin'}", file=sys.stderr)
        return EXIT_NUMERIC

    metrics = {
        split: evaluate(last_good, trials[idx], ds.labels[idx], mc,
                        structures=[structures[i] for i in idx])
        for split, idx in splits.items() if len(idx)
    }
    (out / "metrics.json").write_text(_metrics_json(metrics))
    print(_metrics_json(metrics), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, mc = ckpt.load(args.checkpoint)
    ds = dataio.load(args.dataset)
    if (ds.manifest.channels, ds.manifest.epochs, ds.manifest.samples_per_epoch) != (
        mc.n_channels, mc.n_epochs, mc.n_samples
    ):
        raise IncompatibleFormat("dataset shapes do not match the checkpoint's model")
    splits = ds.split()
    idx = splits[args.split]
    trials = ds.trials64(idx)
    metrics = {args.split: evaluate(params, trials, ds.labels[idx], mc)}
    text = _metrics_json(metrics)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_export(args) -> int:
    params, mc = ckpt.load(args.checkpoint)
    ds = dataio.load(args.dataset)
    splits = ds.split()
    idx = splits[args.split]
    if args.limit:
        idx = idx[: args.limit]
    trials = ds.trials64(idx)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    structures = prepare_graphs(trials, mc)

    if args.what == "adjacency":
        adir = out / "adjacency"
        adir.mkdir(exist_ok=True)
        for row, trial_id in enumerate(idx):
            for t in range(mc.n_epochs):
                np.savetxt(adir / f"trial_{trial_id:04d}_epoch_{t:02d}.csv",
                           structures[row].adjacency[t], delimiter=",", fmt="%.17g")
        print(f"wrote {len(idx) * mc.n_epochs} adjacency files to {adir}")
        return EXIT_OK

    res = forward(params, trials, mc, structure=structures)
    if args.what == "attention":
        adir = out / "attention"
        adir.mkdir(exist_ok=True)
        for row, trial_id in enumerate(idx):
            np.savetxt(adir / f"trial_{trial_id:04d}.csv", res.attention[row],
                       delimiter=",", fmt="%.17g")
        print(f"wrote {len(idx)} attention maps to {adir}")
    else:  # tangent
        flat = res.tangent.reshape(len(idx), -1)
        np.savetxt(out / "tangent.csv", flat, delimiter=",", fmt="%.17g")
        print(f"wrote tangent embeddings ({flat.shape[0]} x {flat.shape[1]}) "
              f"to {out / 'tangent.csv'}")
    return EXIT_OK


def cmd_check_grad(args) -> int:
    modules = [args.module] if args.module else None
    if modules and modules[0] not in {m for m, _ in CHECKS.values()}:
        raise InvalidInput(f"unknown module {args.module!r}")
    seeds = list(range(args.seed, args.seed + args.seeds))
    results = run_checks(modules=modules, seeds=seeds)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"[{status}] {r.module}/{r.name} rel_err={r.rel_err:.3e} tol={r.tol:.0e}")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geospd",
        description="SPD-manifold representation learning with dynamic-graph "
                    "guided modulation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--trials", type=int, default=400)
    g.add_argument("--channels", type=int, default=8)
    g.add_argument("--epochs", type=int, default=6)
    g.add_argument("--samples", type=int, default=64)
    g.add_argument("--sample-rate", type=float, default=128.0, dest="sample_rate")
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=None)
    g.add_argument("--profile", choices=list(dataio.PROFILES), default="default")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train on a dataset and write a checkpoint")
    _add_run_config_flags(t)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("export", help="export attention/tangent/adjacency CSVs")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--dataset", required=True)
    x.add_argument("--what", choices=["attention", "tangent", "adjacency"], required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--split", choices=["train", "val", "test"], default="test")
    x.add_argument("--limit", type=int, default=0)
    x.set_defaults(fn=cmd_export)

    c = sub.add_parser("check-grad", help="finite-difference checks of all backward rules")
    c.add_argument("--module", help="restrict to one module (e.g. spd-layers)")
    c.add_argument("--seeds", type=int, default=3, help="number of seeds per check")
    c.add_argument("--seed", type=int, default=0, help="first seed")
    c.set_defaults(fn=cmd_check_grad)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _worker_cap()
        return args.fn(args)
    except InvalidInput as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IoError, CorruptData, IncompatibleFormat) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, NotPositiveDefinite) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
