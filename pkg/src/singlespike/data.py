"""Datasets: synthetic rate spikes, TTFS encoding, Yin-Yang, MNIST IDX and the
SNNT spike container."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EncodingError, FormatError, LengthError, RateError

# ------------------------------------------------------------------ generators


def gen_synthetic(
    batch: int,
    n: int,
    t: int,
    dt: float = 1.0,
    rate_range: tuple[float, float] = (0.0, 200.0),
    seed: int = 0,
    dtype=np.float32,
) -> np.ndarray:
    """Bernoulli spike raster with one firing rate per batch element.

    ``r_b ~ U(u_min, u_max)`` Hz and each bin spikes with ``p = r_b * dt / 1000``
    (``dt`` in ms).
    """
    u_min, u_max = rate_range
    if u_min < 0 or u_max < u_min:
        raise RateError(f"bad rate range {rate_range}")
    if u_max * dt / 1000.0 > 1.0:
        raise RateError(f"rate {u_max} Hz at dt={dt} ms gives spike probability > 1")
    rng = np.random.default_rng(seed)
    rates = rng.uniform(u_min, u_max, size=batch)
    p = rates * dt / 1000.0
    return (rng.random((batch, n, t)) < p[:, None, None]).astype(dtype)


@dataclass(frozen=True)
class TtfsEncoderCfg:
    i_max: float = 1.0
    T: int = 100

    def __post_init__(self):
        if not self.i_max > 0 or self.T < 1:
            raise EncodingError(f"need i_max > 0 and T >= 1, got {self}")


def ttfs_times(values: np.ndarray, cfg: TtfsEncoderCfg) -> np.ndarray:
    """Spike step ``floor((i_max - v) / i_max * T)``; ``T`` means no spike."""
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0) or np.any(values > cfg.i_max) or not np.all(np.isfinite(values)):
        raise EncodingError(f"values must lie in [0, {cfg.i_max}]")
    return np.floor((cfg.i_max - values) / cfg.i_max * cfg.T).astype(np.int64)


def ttfs_encode(values: np.ndarray, cfg: TtfsEncoderCfg, dtype=np.float32) -> np.ndarray:
    """Encode ``B x N`` intensities as a ``B x N x T`` single-spike raster."""
    times = ttfs_times(values, cfg)
    out = np.zeros(times.shape + (cfg.T,), dtype=dtype)
    hit = times < cfg.T
    idx = np.nonzero(hit)
    out[idx + (times[hit],)] = 1
    return out


YIN, YANG, DOT = 0, 1, 2
_R = 0.5
_CENTER = (0.5, 0.5)
_LEFT = (0.25, 0.5)
_RIGHT = (0.75, 0.5)


def yinyang_label(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Class of points inside the disk; boundary ties go to the lower class index."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d_left = np.hypot(x - _LEFT[0], y - _LEFT[1])
    d_right = np.hypot(x - _RIGHT[0], y - _RIGHT[1])
    dot = (d_left < _R / 4) | (d_right < _R / 4)
    upper = y >= _CENTER[1]
    yin = (upper & (d_right >= _R / 2)) | (~upper & (d_left <= _R / 2))
    return np.where(dot, DOT, np.where(yin, YIN, YANG)).astype(np.int64)


def gen_yinyang(n_samples: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Balanced Yin-Yang samples as ``(points[n, 4], labels[n])``.

    Features are ``(x, y, 1 - x, 1 - y)``; sample ``i`` is drawn for class
    ``i % 3`` by rejection so class counts differ by at most one.
    """
    if n_samples < 3:
        raise ValueError("need at least 3 samples")
    rng = np.random.default_rng(seed)
    targets = np.arange(n_samples) % 3
    pts = np.empty((n_samples, 2))
    filled = np.zeros(n_samples, dtype=bool)
    while not filled.all():
        todo = np.flatnonzero(~filled)
        cand = rng.random((2 * todo.size + 16, 2))
        inside = np.hypot(cand[:, 0] - _CENTER[0], cand[:, 1] - _CENTER[1]) <= _R
        cand = cand[inside]
        labels = yinyang_label(cand[:, 0], cand[:, 1])
        for cls in range(3):
            want = todo[targets[todo] == cls]
            got = cand[labels == cls][: want.size]
            pts[want[: got.shape[0]]] = got
            filled[want[: got.shape[0]]] = True
    feats = np.column_stack([pts[:, 0], pts[:, 1], 1 - pts[:, 0], 1 - pts[:, 1]])
    return feats, targets.astype(np.int64)


# ---------------------------------------------------------------- dataset types


@dataclass
class SpikeDataset:
    """Pre-encoded spikes ``B x N x T`` with integer labels."""

    spikes: np.ndarray
    labels: np.ndarray
    dt: float = 1.0
    n_classes: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.spikes.ndim != 3 or self.labels.shape[0] not in (0, self.spikes.shape[0]):
            raise EncodingError(
                f"spikes {self.spikes.shape} and labels {self.labels.shape} disagree"
            )
        if not np.all((self.spikes == 0) | (self.spikes == 1)):
            raise EncodingError("spike tensor must be binary")
        if not self.n_classes:
            self.n_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise EncodingError(f"labels outside [0, {self.n_classes})")
        b, n, t = self.spikes.shape
        self.meta = {"B": b, "N": n, "T": t, "dt": self.dt, "C": self.n_classes, **self.meta}

    def __len__(self) -> int:
        return self.spikes.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.spikes.shape[1]

    @property
    def T(self) -> int:
        return self.spikes.shape[2]

    def batch(self, idx: np.ndarray) -> np.ndarray:
        return self.spikes[idx]


@dataclass
class TtfsDataset:
    """Analog inputs encoded to spikes on demand, one batch at a time."""

    values: np.ndarray
    labels: np.ndarray
    cfg: TtfsEncoderCfg
    dt: float = 1.0
    n_classes: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        ttfs_times(self.values, self.cfg)  # validate range once
        if not self.n_classes:
            self.n_classes = int(self.labels.max()) + 1 if self.labels.size else 0

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.values.shape[1]

    @property
    def T(self) -> int:
        return self.cfg.T

    def batch(self, idx: np.ndarray) -> np.ndarray:
        return ttfs_encode(self.values[idx], self.cfg)

    def materialize(self) -> SpikeDataset:
        return SpikeDataset(
            ttfs_encode(self.values, self.cfg), self.labels, self.dt, self.n_classes
        )


# ------------------------------------------------------------------------- IDX

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise LengthError(f"{path}: file too short for an IDX magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(
            f"{path}: expected magic 0x{expected_magic:08x}, got 0x{magic:08x}"
        )
    if len(raw) < header:
        raise LengthError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = 1
    for d in dims:
        count *= d
    if count > 2**34:
        raise FormatError(f"{path}: implausible dimensions {dims}")
    need = header + count
    if len(raw) < need:
        raise LengthError(f"{path}: expected {need} bytes, file has {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] and flattened."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1).astype(np.float32) / 255.0
    return flat, labels.astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (magic 0x0801 for 1-D, 0x0803 for 3-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        f.write(array.tobytes())


# ------------------------------------------------------------------- SNNT files

SNNT_MAGIC = b"SNNT"
SNNT_VERSION = 1
_SNNT_HEADER = struct.Struct("<4sIIIId")


def save_spikes(path, data: SpikeDataset) -> None:
    """Write spikes + labels: header, u32 label count, u16 labels, then the
    raster bit-packed along time (little bit order, each row padded to a byte)."""
    spikes = np.asarray(data.spikes)
    if not np.all((spikes == 0) | (spikes == 1)):
        raise EncodingError("only binary rasters can be saved")
    b, n, t = spikes.shape
    labels = np.asarray(data.labels)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise EncodingError("labels must fit in u16")
    packed = np.packbits(spikes.astype(np.uint8), axis=-1, bitorder="little")
    with open(path, "wb") as f:
        f.write(_SNNT_HEADER.pack(SNNT_MAGIC, SNNT_VERSION, b, n, t, float(data.dt)))
        f.write(struct.pack("<I", labels.size))
        f.write(labels.astype("<u2").tobytes())
        f.write(packed.tobytes())


def load_spikes(path, dtype=np.float32) -> SpikeDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _SNNT_HEADER.size + 4:
        raise LengthError(
            f"{path}: expected at least {_SNNT_HEADER.size + 4} header bytes, got {len(raw)}"
        )
    magic, version, b, n, t, dt = _SNNT_HEADER.unpack_from(raw, 0)
    if magic != SNNT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {SNNT_MAGIC!r}")
    if version != SNNT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}, expected {SNNT_VERSION}")
    off = _SNNT_HEADER.size
    (n_labels,) = struct.unpack_from("<I", raw, off)
    off += 4
    row_bytes = (t + 7) // 8
    need = off + 2 * n_labels + b * n * row_bytes
    if len(raw) < need:
        raise LengthError(f"{path}: expected {need} bytes, file has {len(raw)}")
    labels = np.frombuffer(raw, dtype="<u2", count=n_labels, offset=off).astype(np.int64)
    off += 2 * n_labels
    packed = np.frombuffer(raw, dtype=np.uint8, count=b * n * row_bytes, offset=off)
    spikes = np.unpackbits(packed.reshape(b, n, row_bytes), axis=-1, count=t, bitorder="little")
    return SpikeDataset(spikes.astype(dtype), labels, dt)
