"""Command-line entry point: bench, train, eval, gen and encode.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .bench import SweepSpec, emit_report, run_sweep
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    SpikeDataset,
    TtfsDataset,
    TtfsEncoderCfg,
    gen_synthetic,
    gen_yinyang,
    load_mnist_idx,
    load_spikes,
    save_spikes,
    ttfs_encode,
)
from .errors import (
    ConfigError,
    DimensionError,
    EncodingError,
    FormatError,
    LabelError,
    LengthError,
    NumericError,
    RateError,
)
from .training import NetworkConfig, TrainConfig, evaluate, train

log = logging.getLogger("singlespike")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATA_ERRORS = (FormatError, LengthError, EncodingError, LabelError, DimensionError, OSError)


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# ------------------------------------------------------------------ parsing


def int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def rate_range(text: str) -> tuple[float, float]:
    lo, sep, hi = text.partition("..")
    try:
        return (float(lo), float(hi)) if sep else (float(lo), float(lo))
    except ValueError:
        raise ConfigError(f"rate must look like LO..HI, got {text!r}") from None


def beta_modes(text: str) -> list[str]:
    modes = {"false": ["trainable"], "true": ["fixed"], "both": ["trainable", "fixed"]}
    if text.lower() not in modes:
        raise ConfigError(f"--fixed-beta must be false, true or both, got {text!r}")
    return modes[text.lower()]


def build_parser() -> ArgParser:
    p = ArgParser(prog="singlespike", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=ArgParser)

    b = sub.add_parser("bench", help="time fast vs sequential passes over a grid")
    b.add_argument("--units", type=int_list, default=[100])
    b.add_argument("--steps", type=int_list, default=[128, 512, 2048])
    b.add_argument("--batch", type=int_list, default=[128])
    b.add_argument("--layers", type=int_list, default=[1])
    b.add_argument("--models", default="fast,seq-single")
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--fixed-beta", type=beta_modes, default=["trainable"])
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", type=Path, required=True, help=".csv or .json")

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", type=Path, required=True)

    e = sub.add_parser("eval", help="accuracy and spike counts of a checkpoint")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--batch", type=int, default=256)
    e.add_argument("--best", action="store_true", help="use the lowest-training-loss parameters")

    g = sub.add_parser("gen", help="generate a spike dataset")
    gsub = g.add_subparsers(dest="kind", required=True, parser_class=ArgParser)
    gy = gsub.add_parser("yinyang")
    gy.add_argument("--n", type=int, default=20000)
    gy.add_argument("--seed", type=int, default=0)
    gy.add_argument("--t", type=int, default=100)
    gy.add_argument("--out", type=Path, required=True)
    gs = gsub.add_parser("synth")
    gs.add_argument("--b", type=int, default=128)
    gs.add_argument("--n", type=int, default=100)
    gs.add_argument("--t", type=int, default=128)
    gs.add_argument("--dt", type=float, default=1.0)
    gs.add_argument("--rate", type=rate_range, default=(0.0, 200.0))
    gs.add_argument("--seed", type=int, default=0)
    gs.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("encode", help="encode images as spikes")
    csub = c.add_subparsers(dest="kind", required=True, parser_class=ArgParser)
    ct = csub.add_parser("ttfs")
    ct.add_argument("--idx", type=Path, required=True)
    ct.add_argument("--labels", type=Path, required=True)
    ct.add_argument("--t", type=int, default=100)
    ct.add_argument("--limit", type=int, default=None, help="keep only the first N samples")
    ct.add_argument("--out", type=Path, required=True)
    return p


# ----------------------------------------------------------------- commands


def cmd_bench(args) -> int:
    spec = SweepSpec(
        units=args.units,
        steps=args.steps,
        batches=args.batch,
        layers=args.layers,
        models=[m.strip() for m in args.models.split(",") if m.strip()],
        reps=args.reps,
        warmup=args.warmup,
        beta_modes=args.fixed_beta,
        seed=args.seed,
        threads=args.threads,
    )
    result = run_sweep(spec)
    emit_report(result, args.out)
    for r in result.records:
        speed = "" if r.speedup_vs_seq is None else f"  x{r.speedup_vs_seq:.2f}"
        print(f"{r.model:<24} n={r.n:<5} t={r.t:<5} b={r.b:<4} layers={r.layers} "
              f"fwd={r.fwd_ms:.1f}ms bwd={r.bwd_ms:.1f}ms total={r.total_ms:.1f}ms{speed}")
    for s in result.skipped:
        print(f"skipped {s}")
    return EXIT_OK


TRAIN_KEYS = {
    "dataset", "data", "architecture", "T", "dt", "lr", "epochs", "milestones", "batch", "output",
    "variant", "surrogate_slope", "seed", "checkpoint_dir", "init", "weight_gain", "trainable_beta",
    "threads", "target_accuracy",
}


def load_run_config(path: Path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(cfg) - TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("dataset", "architecture"):
        if key not in cfg:
            raise ConfigError(f"config needs {key!r}")
    return cfg


def load_run_data(cfg: dict):
    """Train and test sets for a run config."""
    kind = cfg["dataset"]
    paths = cfg.get("data", {})
    t = int(cfg.get("T", 100))
    enc = TtfsEncoderCfg(1.0, t)
    if kind == "yinyang":
        n_train, n_test = int(paths.get("n_train", 20000)), int(paths.get("n_test", 10000))
        xtr, ytr = gen_yinyang(n_train, seed=int(paths.get("train_seed", 1)))
        xte, yte = gen_yinyang(n_test, seed=int(paths.get("test_seed", 2)))
        return TtfsDataset(xtr, ytr, enc), TtfsDataset(xte, yte, enc)
    if kind == "mnist":
        try:
            xtr, ytr = load_mnist_idx(paths["train_images"], paths["train_labels"])
            xte, yte = load_mnist_idx(paths["test_images"], paths["test_labels"])
        except KeyError as exc:
            raise ConfigError(f"mnist config needs data.{exc.args[0]}") from None
        limit = paths.get("n_train")
        if limit is not None:
            xtr, ytr = xtr[:limit], ytr[:limit]
        return TtfsDataset(xtr, ytr, enc, n_classes=10), TtfsDataset(xte, yte, enc, n_classes=10)
    if kind == "snnt":
        try:
            train_set = load_spikes(paths["train"])
            test_set = load_spikes(paths["test"]) if "test" in paths else None
        except KeyError as exc:
            raise ConfigError(f"snnt config needs data.{exc.args[0]}") from None
        return train_set, test_set
    raise ConfigError(f"dataset must be yinyang, mnist or snnt, got {kind!r}")


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    train_set, test_set = load_run_data(cfg)
    hidden = cfg["architecture"]
    if not isinstance(hidden, list):
        raise ConfigError("architecture must be a list of hidden layer widths")
    net_cfg = NetworkConfig(
        layer_sizes=[train_set.n_inputs, *hidden, train_set.n_classes],
        variant=cfg.get("variant", "fast-single"),
        T=train_set.T,
        dt=float(cfg.get("dt", 1.0)),
        surrogate_slope=float(cfg.get("surrogate_slope", 10.0)),
        readout=cfg.get("output", "sum"),
        trainable_beta=bool(cfg.get("trainable_beta", True)),
        seed=int(cfg.get("seed", 0)),
        init=cfg.get("init", "uniform"),
        weight_gain=float(cfg.get("weight_gain", 2.0 if cfg["dataset"] == "yinyang" else 1.0)),
    )
    train_cfg = TrainConfig(
        epochs=int(cfg.get("epochs", 200)),
        lr=float(cfg.get("lr", 1e-3)),
        batch_size=int(cfg.get("batch", 128)),
        milestones=tuple(cfg.get("milestones", (50, 100))),
    )
    out_dir = Path(cfg.get("checkpoint_dir", "checkpoints"))
    out_dir.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=int(cfg.get("threads", 1))):
        model, metrics = train(
            net_cfg, train_cfg, train_set, test_set,
            target_accuracy=cfg.get("target_accuracy"), measure_initial=True,
        )
    ckpt = save_checkpoint(out_dir / "model.snnc", model, metrics, train_cfg)
    (out_dir / "metrics.json").write_text(json.dumps({
        "initial_loss": metrics.initial_loss,
        "initial_spikes_per_neuron": metrics.initial_spikes_per_neuron,
        "best_loss": metrics.best_loss,
        "best_epoch": metrics.best_epoch,
        "epochs": metrics.as_dicts(),
        "net_cfg": asdict(net_cfg),
    }, indent=2))
    last = metrics.epochs[-1] if metrics.epochs else None
    summary = {"checkpoint": str(ckpt), "epochs": model.epochs_run}
    if last is not None:
        summary.update(train_loss=last.train_loss, train_accuracy=last.train_accuracy,
                       test_accuracy=last.test_accuracy)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    data = load_spikes(args.data)
    net = ckpt.net
    if args.best:
        net.restore(ckpt.best_params)
    if data.n_inputs != net.cfg.layer_sizes[0] or data.n_classes > net.cfg.n_classes:
        raise EncodingError(
            f"data has {data.n_inputs} inputs / {data.n_classes} classes, "
            f"model expects {net.cfg.layer_sizes[0]} / {net.cfg.n_classes}"
        )
    data.n_classes = net.cfg.n_classes
    res = evaluate(net, data, args.batch)
    print(json.dumps({
        "accuracy": res.accuracy,
        "loss": res.loss,
        "spikes_per_neuron": res.spikes_per_neuron,
        "spikes_per_sample": res.spikes_per_neuron * net.n_hidden,
        "samples": len(data),
    }))
    return EXIT_OK


def cmd_gen(args) -> int:
    if args.kind == "yinyang":
        x, y = gen_yinyang(args.n, seed=args.seed)
        data = SpikeDataset(ttfs_encode(x, TtfsEncoderCfg(1.0, args.t)), y, n_classes=3)
    else:
        spikes = gen_synthetic(args.b, args.n, args.t, dt=args.dt, rate_range=args.rate, seed=args.seed)
        data = SpikeDataset(spikes, np.zeros(args.b, dtype=np.int64), dt=args.dt, n_classes=1)
    save_spikes(args.out, data)
    print(json.dumps({"out": str(args.out), **data.meta}))
    return EXIT_OK


def cmd_encode(args) -> int:
    x, y = load_mnist_idx(args.idx, args.labels)
    if args.limit is not None:
        x, y = x[: args.limit], y[: args.limit]
    data = SpikeDataset(ttfs_encode(x, TtfsEncoderCfg(1.0, args.t)), y, n_classes=10)
    save_spikes(args.out, data)
    print(json.dumps({"out": str(args.out), **data.meta}))
    return EXIT_OK


COMMANDS = {"bench": cmd_bench, "train": cmd_train, "eval": cmd_eval, "gen": cmd_gen, "encode": cmd_encode}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                            format="%(message)s")
        return COMMANDS[args.command](args)
    except (ConfigError, RateError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
