"""Forward/backward timing sweeps of the fast path against the sequential baseline."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import gen_synthetic
from .errors import ConfigError, NumericError
from .training import Network, NetworkConfig

log = logging.getLogger(__name__)

MODEL_ALIASES = {"fast": "fast-single", "seq": "seq-single"}
BASELINE = "seq-single"
CSV_COLUMNS = ["model", "n", "t", "b", "layers", "fwd_ms", "bwd_ms", "total_ms", "mad_ms", "speedup_vs_seq"]
REPORT_SCHEMA = "singlespike.bench"
REPORT_VERSION = 1
READOUT_UNITS = 10


def canonical_model(name: str) -> str:
    name = MODEL_ALIASES.get(name, name)
    if name not in ("fast-single", "seq-single", "seq-multi"):
        raise ConfigError(f"unknown model {name!r}")
    return name


@dataclass
class SweepSpec:
    units: list[int]
    steps: list[int]
    batches: list[int] = field(default_factory=lambda: [128])
    layers: list[int] = field(default_factory=lambda: [1])
    models: list[str] = field(default_factory=lambda: ["fast-single", "seq-single"])
    reps: int = 10
    warmup: int = 3
    beta_modes: list[str] = field(default_factory=lambda: ["trainable"])
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        self.models = [canonical_model(m) for m in self.models]
        if self.reps < 3 or self.warmup < 1:
            raise ConfigError(f"need reps >= 3 and warmup >= 1, got {self.reps}/{self.warmup}")
        for name in ("units", "steps", "batches", "layers"):
            vals = getattr(self, name)
            if not vals or min(vals) < 1:
                raise ConfigError(f"{name} must be a non-empty list of positive counts")
        if not set(self.beta_modes) <= {"trainable", "fixed"} or not self.beta_modes:
            raise ConfigError(f"beta modes must be 'trainable' and/or 'fixed', got {self.beta_modes}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass
class BenchRecord:
    model: str
    n: int
    t: int
    b: int
    layers: int
    fwd_ms: float
    bwd_ms: float
    total_ms: float
    mad_ms: float
    speedup_vs_seq: float | None = None


@dataclass
class PassTiming:
    fwd_ms: float
    bwd_ms: float
    total_ms: float
    mad_ms: float


def _median_mad(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values)
    med = float(np.median(arr))
    return med, float(np.median(np.abs(arr - med)))


def time_pass(net: Network, batch: np.ndarray, reps: int = 10, warmup: int = 3) -> PassTiming:
    """Median forward, backward and whole-step times in milliseconds.

    The scalar loss is the sum of the readout scores, so the score gradient is
    all ones.  ``batch`` must already be generated; nothing but the passes is
    timed.
    """
    if reps < 1 or warmup < 0:
        raise ConfigError("reps must be >= 1 and warmup >= 0")
    fwd, bwd, tot = [], [], []
    for i in range(warmup + reps):
        t0 = time.perf_counter()
        scores, cache = net.forward(batch)
        t1 = time.perf_counter()
        grads = net.backward(cache, np.ones_like(scores))
        t2 = time.perf_counter()
        if i == 0:
            if not np.all(np.isfinite(scores)):
                raise NumericError("non-finite readout scores during benchmark")
            if not all(np.all(np.isfinite(g)) for d in grads for g in d.values()):
                raise NumericError("non-finite gradients during benchmark")
        if i >= warmup:
            fwd.append((t1 - t0) * 1e3)
            bwd.append((t2 - t1) * 1e3)
            tot.append((t2 - t0) * 1e3)
    total, mad = _median_mad(tot)
    return PassTiming(float(np.median(fwd)), float(np.median(bwd)), total, mad)


def model_id(variant: str, beta_mode: str) -> str:
    return variant if beta_mode == "trainable" else f"{variant}+fixed-beta"


@dataclass
class SweepResult:
    spec: SweepSpec
    records: list[BenchRecord]
    skipped: list[dict] = field(default_factory=list)

    def speedups(self) -> dict[tuple, float]:
        """``(model, n, t, b, layers) -> speedup`` for every non-baseline record."""
        return {
            (r.model, r.n, r.t, r.b, r.layers): r.speedup_vs_seq
            for r in self.records
            if r.speedup_vs_seq is not None
        }


def build_network(variant: str, n: int, t: int, layers: int, trainable_beta: bool, seed: int) -> Network:
    cfg = NetworkConfig(
        layer_sizes=[n] * (layers + 1) + [READOUT_UNITS],
        variant=variant,
        T=t,
        trainable_beta=trainable_beta,
        seed=seed,
    )
    return Network(cfg)


def run_sweep(spec: SweepSpec) -> SweepResult:
    """Time every (model, n, t, b, layers, beta mode) grid point.

    Points that run out of memory are logged as skipped and the sweep goes on.
    """
    records: list[BenchRecord] = []
    skipped: list[dict] = []
    grid = itertools.product(spec.beta_modes, spec.units, spec.steps, spec.batches, spec.layers)
    with threadpool_limits(limits=spec.threads):
        for beta_mode, n, t, b, n_layers in grid:
            batch = gen_synthetic(b, n, t, seed=spec.seed)
            point: dict[str, BenchRecord] = {}
            for variant in spec.models:
                mid = model_id(variant, beta_mode)
                try:
                    net = build_network(variant, n, t, n_layers, beta_mode == "trainable", spec.seed)
                    timing = time_pass(net, batch, spec.reps, spec.warmup)
                except MemoryError as exc:
                    log.warning("skipping %s n=%d t=%d b=%d layers=%d: %s", mid, n, t, b, n_layers, exc)
                    skipped.append({"model": mid, "n": n, "t": t, "b": b, "layers": n_layers,
                                    "reason": "out of memory"})
                    continue
                rec = BenchRecord(mid, n, t, b, n_layers, timing.fwd_ms, timing.bwd_ms,
                                  timing.total_ms, timing.mad_ms)
                point[variant] = rec
                log.info("%s n=%d t=%d b=%d layers=%d total=%.2f ms", mid, n, t, b, n_layers, timing.total_ms)
            base = point.get(BASELINE)
            for variant, rec in point.items():
                if base is not None and variant != BASELINE:
                    rec.speedup_vs_seq = base.total_ms / rec.total_ms
                records.append(rec)
    return SweepResult(spec, records, skipped)


def emit_report(result: SweepResult | list[BenchRecord], path, fmt: str | None = None) -> Path:
    """Write records as CSV (fixed columns) or versioned JSON."""
    records = result.records if isinstance(result, SweepResult) else list(result)
    if not records:
        raise ValueError("no records to report")
    path = Path(path)
    fmt = fmt or ("json" if path.suffix.lower() == ".json" else "csv")
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_COLUMNS)
            for r in records:
                row = asdict(r)
                row["speedup_vs_seq"] = "" if r.speedup_vs_seq is None else r.speedup_vs_seq
                w.writerow([row[c] for c in CSV_COLUMNS])
    elif fmt == "json":
        doc = {
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "records": [asdict(r) for r in records],
        }
        if isinstance(result, SweepResult):
            doc["spec"] = asdict(result.spec)
            doc["skipped"] = result.skipped
        path.write_text(json.dumps(doc, indent=2))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def load_report(path) -> list[BenchRecord]:
    """Read records back from a JSON or CSV report."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        doc = json.loads(path.read_text())
        if doc.get("schema") != REPORT_SCHEMA or doc.get("version") != REPORT_VERSION:
            raise ValueError(f"{path}: not a version {REPORT_VERSION} bench report")
        return [BenchRecord(**r) for r in doc["records"]]
    out = []
    types = {f.name: f.type for f in fields(BenchRecord)}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            kw = {}
            for k, v in row.items():
                if k == "model":
                    kw[k] = v
                elif k == "speedup_vs_seq":
                    kw[k] = float(v) if v else None
                else:
                    kw[k] = int(v) if types[k] == "int" else float(v)
            out.append(BenchRecord(**kw))
    return out
