"""Versioned binary checkpoints (``.snnc``).

Layout, all little-endian::

    magic "SNNC" | u32 version | u32 header length | header JSON (utf-8)
    u32 tensor count
    per tensor: u16 name length | name | u8 dtype code | u8 ndim | u32 dims... | raw values

The header echoes the network and training configs and records the epoch,
the best training loss and the optimizer step count.  Tensors hold the
current parameters, the best-loss snapshot and the Adam moments.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, LengthError
from .seqsim import LayerParams
from .training import Adam, MetricsLog, Network, NetworkConfig, TrainConfig, TrainedModel

SNNC_MAGIC = b"SNNC"
SNNC_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Checkpoint:
    net: Network
    best_params: list[LayerParams]
    optimizer: Adam
    epoch: int
    best_loss: float
    best_epoch: int
    train_cfg: dict | None

    def as_model(self) -> TrainedModel:
        return TrainedModel(self.net, self.optimizer, self.best_params, self.epoch)


def _layer_arrays(prefix: str, layers: list[LayerParams]) -> dict[str, np.ndarray]:
    out = {}
    for i, p in enumerate(layers):
        for name in ("weights", "bias", "beta"):
            out[f"{prefix}.{i}.{name}"] = getattr(p, name)
    return out


def save_checkpoint(
    path,
    model: TrainedModel,
    metrics: MetricsLog | None = None,
    train_cfg: TrainConfig | None = None,
) -> Path:
    path = Path(path)
    opt = model.optimizer
    header = {
        "net_cfg": asdict(model.net.cfg),
        "train_cfg": asdict(train_cfg) if train_cfg is not None else None,
        "epoch": model.epochs_run,
        "best_loss": metrics.best_loss if metrics is not None else None,
        "best_epoch": metrics.best_epoch if metrics is not None else -1,
        "adam": {"t": opt.t, "betas": [opt.b1, opt.b2], "eps": opt.eps},
    }
    tensors = {
        **_layer_arrays("layer", model.net.layers),
        **_layer_arrays("best", model.best_params),
        **opt.state_arrays(),
    }
    head = json.dumps(header).encode()
    parts = [SNNC_MAGIC, struct.pack("<II", SNNC_VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise FormatError(f"tensor {name} has unsupported dtype {arr.dtype}")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack(f"<BB{arr.ndim}I", _CODES[arr.dtype], arr.ndim, *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    path.write_bytes(b"".join(parts))
    return path


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise LengthError(f"{self.path}: truncated at byte {len(self.raw)}, needed {self.pos + n}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _layers_from(arrays: dict, prefix: str, n_layers: int, trainable_beta: bool) -> list[LayerParams]:
    try:
        return [
            LayerParams(
                arrays[f"{prefix}.{i}.weights"].copy(),
                arrays[f"{prefix}.{i}.bias"].copy(),
                arrays[f"{prefix}.{i}.beta"].copy(),
                trainable_beta,
            )
            for i in range(n_layers)
        ]
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing tensor {exc.args[0]}") from None


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != SNNC_MAGIC:
        raise FormatError(f"{path}: not an SNNC checkpoint")
    version, head_len = r.unpack("<II")
    if version != SNNC_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(head_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{path}: tensor {name} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(r.take(size), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes")

    cfg = NetworkConfig(**header["net_cfg"])
    n_layers = len(cfg.layer_sizes) - 1
    net = Network(cfg, _layers_from(arrays, "layer", n_layers, cfg.trainable_beta))
    best = _layers_from(arrays, "best", n_layers, cfg.trainable_beta)
    adam = header["adam"]
    opt = Adam(tuple(adam["betas"]), adam["eps"])
    opt.load_state_arrays({k: v for k, v in arrays.items() if k.startswith("adam.")}, adam["t"])
    best_loss = header["best_loss"]
    return Checkpoint(
        net=net,
        best_params=best,
        optimizer=opt,
        epoch=header["epoch"],
        best_loss=float("inf") if best_loss is None else best_loss,
        best_epoch=header["best_epoch"],
        train_cfg=header["train_cfg"],
    )
