"""Network assembly, readout, loss, Adam, LR schedule and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal, Protocol

import numpy as np

from .errors import ConfigError, LabelError, NumericError
from .fastpath import fast_backward, fast_forward
from .neuron import beta_from_tau, clip_beta
from .seqsim import LayerParams, seq_layer_backward, seq_layer_forward

log = logging.getLogger(__name__)

VARIANTS = ("fast-single", "seq-single", "seq-multi")
READOUTS = ("sum", "max")


@dataclass
class NetworkConfig:
    """Architecture and neuron settings.

    ``layer_sizes`` includes the input width first and the class count last,
    e.g. ``[4, 120, 3]``.
    """

    layer_sizes: list[int]
    variant: str = "fast-single"
    T: int = 100
    dt: float = 1.0
    surrogate_slope: float = 10.0
    readout: str = "sum"
    trainable_beta: bool = True
    seed: int = 0
    init: str = "uniform"
    weight_gain: float = 1.0
    tau_hidden: float = 10.0
    tau_readout: float = 20.0
    dtype: str = "float32"

    def __post_init__(self):
        self.layer_sizes = [int(n) for n in self.layer_sizes]
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ConfigError(f"bad layer sizes {self.layer_sizes}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.readout not in READOUTS:
            raise ConfigError(f"readout must be one of {READOUTS}, got {self.readout!r}")
        if self.T < 1 or not self.dt > 0:
            raise ConfigError(f"need T >= 1 and dt > 0 (T={self.T}, dt={self.dt})")
        if self.init not in ("uniform", "zero"):
            raise ConfigError(f"init must be 'uniform' or 'zero', got {self.init!r}")

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 128
    milestones: tuple[int, ...] = (50, 100)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing: {self.milestones}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"learning rate must be positive and finite, got {self.lr}")


# ---------------------------------------------------------------- readout/loss


def readout_forward(potentials: np.ndarray, mode: str = "sum") -> np.ndarray:
    if mode == "sum":
        return potentials.sum(axis=2)
    if mode == "max":
        return potentials.max(axis=2)
    raise ConfigError(f"unknown readout mode {mode!r}")


def readout_backward(grad_scores: np.ndarray, potentials: np.ndarray, mode: str = "sum") -> np.ndarray:
    if mode == "sum":
        return np.broadcast_to(grad_scores[:, :, None], potentials.shape).astype(potentials.dtype)
    if mode == "max":
        grad = np.zeros_like(potentials)
        idx = potentials.argmax(axis=2)
        np.put_along_axis(grad, idx[:, :, None], grad_scores[:, :, None], axis=2)
        return grad
    raise ConfigError(f"unknown readout mode {mode!r}")


@dataclass
class ReadoutOutput:
    """Per-class scores ``o`` and their softmax probabilities ``p`` (both ``B x C``)."""

    o: np.ndarray
    p: np.ndarray


def readout_output(potentials: np.ndarray, mode: str = "sum") -> ReadoutOutput:
    o = readout_forward(potentials, mode)
    return ReadoutOutput(o, softmax(o.astype(np.float64)))


def softmax(o: np.ndarray) -> np.ndarray:
    z = o - o.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels outside [0, {n_classes})")
    y = np.zeros((labels.shape[0], n_classes), dtype=dtype)
    y[np.arange(labels.shape[0]), labels] = 1
    return y


def softmax_xent(o: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(o) against one-hot ``targets`` and its gradient."""
    if targets.shape != o.shape:
        raise LabelError(f"targets {targets.shape} do not match scores {o.shape}")
    if not (np.all((targets == 0) | (targets == 1)) and np.all(targets.sum(axis=1) == 1)):
        raise LabelError("targets must be one-hot rows")
    b = o.shape[0]
    z = o - o.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float((targets * log_p).sum()) / b
    grad = (np.exp(log_p) - targets) / b
    return loss, grad.astype(o.dtype, copy=False)


# ------------------------------------------------------------------- optimiser


def lr_schedule(epoch: int, milestones, lr0: float) -> float:
    """Step decay: divide by ten for every milestone already reached."""
    crossed = sum(1 for m in milestones if m <= epoch)
    return lr0 / (10.0 ** crossed)


class Adam:
    """Adam with bias correction; re-clips every trainable beta after each step."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, layers: list[LayerParams], grads: list[dict[str, np.ndarray]], lr: float) -> None:
        for g in grads:
            for name, arr in g.items():
                if not np.all(np.isfinite(arr)):
                    raise NumericError(f"non-finite gradient in {name}; step aborted")
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(layers, grads)):
            for name in ("weights", "bias", "beta"):
                if name == "beta" and not p.trainable_beta:
                    continue
                value = getattr(p, name)
                key = f"{i}.{name}"
                if key not in self.m:
                    self.m[key] = np.zeros_like(value)
                    self.v[key] = np.zeros_like(value)
                m, v = self.m[key], self.v[key]
                gr = g[name].astype(value.dtype, copy=False)
                m *= self.b1
                m += (1 - self.b1) * gr
                v *= self.b2
                v += (1 - self.b2) * gr * gr
                value -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(value.dtype)
            if p.trainable_beta:
                p.beta[...] = clip_beta(p.beta)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        self.m = {k[len("adam.m."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v.")}


# --------------------------------------------------------------------- network


def init_params(cfg: NetworkConfig, rng: np.random.Generator | None = None) -> list[LayerParams]:
    """Uniform fan-in weights, zero biases, beta from tau (10 ms hidden, 20 ms readout).

    ``weight_gain=2`` gives the wider ``sqrt(2/N)`` bound.  ``init='zero'``
    zeroes every spiking layer so the network starts silent; the readout keeps
    its uniform draw (an all-zero readout is a stationary point with zero
    gradient everywhere).
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    dtype = cfg.np_dtype
    sizes = cfg.layer_sizes
    layers = []
    for li, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        is_readout = li == len(sizes) - 2
        bound = np.sqrt(cfg.weight_gain / n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        if cfg.init == "zero" and not is_readout:
            w = np.zeros_like(w)
        tau = cfg.tau_readout if is_readout else cfg.tau_hidden
        beta = np.full(n_out, beta_from_tau(tau, cfg.dt))
        layers.append(
            LayerParams(
                w.astype(dtype),
                np.zeros(n_out, dtype=dtype),
                beta.astype(dtype),
                cfg.trainable_beta,
            )
        )
    return layers


@dataclass
class ForwardCache:
    traces: object  # FastStackTrace, or one trace per layer for the sequential variants
    potentials: np.ndarray
    hidden_spikes: float


class Network:
    """Feedforward stack of spiking layers topped by a non-spiking readout."""

    def __init__(self, cfg: NetworkConfig, layers: list[LayerParams] | None = None):
        self.cfg = cfg
        self.layers = layers if layers is not None else init_params(cfg)
        if len(self.layers) != len(cfg.layer_sizes) - 1:
            raise ConfigError("layer count does not match layer_sizes")

    @property
    def n_hidden(self) -> int:
        return sum(self.cfg.layer_sizes[1:-1])

    def forward(self, spikes: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = spikes.astype(self.cfg.np_dtype, copy=False)
        variant = self.cfg.variant
        if variant == "fast-single":
            pots, traces = fast_forward(self.layers, x)
            hidden = float(sum(traces.hidden_counts()))
        else:
            mode = "single" if variant == "seq-single" else "multi"
            traces, hidden = [], 0.0
            for i, p in enumerate(self.layers):
                spiking = i < len(self.layers) - 1
                out, tr = seq_layer_forward(x, p, mode, spiking=spiking)
                traces.append(tr)
                if spiking:
                    hidden += float(out.sum())
                    x = out
            pots = traces[-1].potentials
        scores = readout_forward(pots, self.cfg.readout)
        return scores, ForwardCache(traces, pots, hidden)

    def backward(self, cache: ForwardCache, grad_scores: np.ndarray) -> list[dict[str, np.ndarray]]:
        slope = self.cfg.surrogate_slope
        grad_v = readout_backward(grad_scores, cache.potentials, self.cfg.readout)
        if self.cfg.variant == "fast-single":
            return fast_backward(self.layers, cache.traces, grad_v, slope)
        grads: list[dict[str, np.ndarray]] = [None] * len(self.layers)  # type: ignore[list-item]
        upstream = None
        for i in range(len(self.layers) - 1, -1, -1):
            is_readout = i == len(self.layers) - 1
            upstream, grads[i] = seq_layer_backward(
                cache.traces[i], self.layers[i],
                grad_spikes=None if is_readout else upstream,
                grad_potentials=grad_v if is_readout else None,
                slope=slope, need_input_grad=i > 0,
            )
        return grads

    def snapshot(self) -> list[LayerParams]:
        return [p.copy() for p in self.layers]

    def restore(self, snap: list[LayerParams]) -> None:
        for dst, src in zip(self.layers, snap):
            dst.weights[...] = src.weights
            dst.bias[...] = src.bias
            dst.beta[...] = src.beta


# ----------------------------------------------------------------- data access


class BatchSource(Protocol):
    labels: np.ndarray
    n_classes: int
    n_inputs: int
    T: int

    def __len__(self) -> int: ...

    def batch(self, idx: np.ndarray) -> np.ndarray: ...


def iterate_batches(data: BatchSource, batch_size: int, rng: np.random.Generator | None = None):
    n = len(data)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield idx, data.batch(idx), data.labels[idx]


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    spikes_per_neuron: float


def evaluate(net: Network, data: BatchSource, batch_size: int = 256) -> EvalResult:
    total_loss = correct = spikes = 0.0
    n = len(data)
    for _, x, y in iterate_batches(data, batch_size):
        scores, cache = net.forward(x)
        loss, _ = softmax_xent(scores.astype(np.float64), one_hot(y, net.cfg.n_classes))
        total_loss += loss * len(y)
        correct += float((scores.argmax(axis=1) == y).sum())
        spikes += cache.hidden_spikes
    denom = max(net.n_hidden, 1) * n
    return EvalResult(total_loss / n, correct / n, spikes / denom)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    spikes_per_neuron: float
    wall_s: float
    test_loss: float | None = None
    test_accuracy: float | None = None
    test_spikes_per_neuron: float | None = None


@dataclass
class MetricsLog:
    epochs: list[EpochLog] = field(default_factory=list)
    initial_loss: float | None = None
    initial_spikes_per_neuron: float | None = None
    best_loss: float = float("inf")
    best_epoch: int = -1

    def as_dicts(self) -> list[dict]:
        return [asdict(e) for e in self.epochs]


@dataclass
class TrainedModel:
    net: Network
    optimizer: Adam
    best_params: list[LayerParams]
    epochs_run: int


def train(
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    train_data: BatchSource,
    test_data: BatchSource | None = None,
    *,
    target_accuracy: float | None = None,
    measure_initial: bool = False,
    on_epoch: Callable[[EpochLog, TrainedModel], None] | None = None,
    net: Network | None = None,
) -> tuple[TrainedModel, MetricsLog]:
    """Train with Adam and step decay, restoring the best (lowest training loss)
    parameters whenever a milestone is crossed.

    ``target_accuracy`` stops once the test accuracy reaches it.
    """
    if train_data.n_classes != net_cfg.n_classes:
        raise ConfigError(
            f"last layer has {net_cfg.n_classes} units but data has {train_data.n_classes} classes"
        )
    if train_data.n_inputs != net_cfg.layer_sizes[0]:
        raise ConfigError(
            f"first layer expects {net_cfg.layer_sizes[0]} inputs, data has {train_data.n_inputs}"
        )
    rng = np.random.default_rng(net_cfg.seed + 1)
    net = net if net is not None else Network(net_cfg)
    opt = Adam(train_cfg.adam_betas, train_cfg.adam_eps)
    metrics = MetricsLog()
    best = net.snapshot()
    model = TrainedModel(net, opt, best, 0)

    if measure_initial:
        ev = evaluate(net, train_data, train_cfg.batch_size)
        metrics.initial_loss = ev.loss
        metrics.initial_spikes_per_neuron = ev.spikes_per_neuron

    for epoch in range(train_cfg.epochs):
        if epoch in train_cfg.milestones and metrics.best_epoch >= 0:
            net.restore(model.best_params)
        lr = lr_schedule(epoch, train_cfg.milestones, train_cfg.lr)
        t0 = time.perf_counter()
        total_loss = correct = spikes = 0.0
        for bi, (_, x, y) in enumerate(iterate_batches(train_data, train_cfg.batch_size, rng)):
            scores, cache = net.forward(x)
            loss, grad = softmax_xent(scores.astype(np.float64), one_hot(y, net_cfg.n_classes))
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads = net.backward(cache, grad.astype(net_cfg.np_dtype))
            opt.step(net.layers, grads, lr)
            total_loss += loss * len(y)
            correct += float((scores.argmax(axis=1) == y).sum())
            spikes += cache.hidden_spikes
        n = len(train_data)
        entry = EpochLog(
            epoch=epoch,
            lr=lr,
            train_loss=total_loss / n,
            train_accuracy=correct / n,
            spikes_per_neuron=spikes / (max(net.n_hidden, 1) * n),
            wall_s=time.perf_counter() - t0,
        )
        if entry.train_loss < metrics.best_loss:
            metrics.best_loss = entry.train_loss
            metrics.best_epoch = epoch
            model.best_params = net.snapshot()
        if test_data is not None:
            ev = evaluate(net, test_data)
            entry.test_loss = ev.loss
            entry.test_accuracy = ev.accuracy
            entry.test_spikes_per_neuron = ev.spikes_per_neuron
        metrics.epochs.append(entry)
        model.epochs_run = epoch + 1
        log.info(
            "epoch %d lr=%.2e loss=%.4f acc=%.4f test_acc=%s spikes/neuron=%.3f (%.1fs)",
            epoch, lr, entry.train_loss, entry.train_accuracy,
            f"{entry.test_accuracy:.4f}" if entry.test_accuracy is not None else "-",
            entry.spikes_per_neuron, entry.wall_s,
        )
        if on_epoch is not None:
            on_epoch(entry, model)
        if (
            target_accuracy is not None
            and entry.test_accuracy is not None
            and entry.test_accuracy >= target_accuracy
        ):
            break
    return model, metrics
