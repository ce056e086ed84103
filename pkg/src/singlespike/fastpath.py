"""Parallel single-spike layer.

The layer never loops over time.  Potentials are computed without reset by a
causal convolution with the per-neuron kernel ``(1 - beta) * beta**j``, every
threshold crossing is marked, and a ramp-kernel convolution (``phi``) turns
the crossings into a code that equals one only at the first of them.  ``g``
keeps that position.  Up to the first crossing the reset has not fired yet,
so this yields the same spikes as the sequential model.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EncodingError, StateError
from .neuron import V_TH, surrogate_grad
from .numerics import (
    causal_conv,
    causal_conv_backward,
    DecayConv,
    _direct_guard,
    _toeplitz,
    conv_neuron_major,
    conv_neuron_major_backward,
)
from .seqsim import LayerParams


@dataclass
class FastLayerTrace:
    """Forward state of one layer, stored neuron-major (``N x B x T``).

    The properties give the usual ``B x N x T`` views.
    """

    input_nm: np.ndarray
    current_nm: np.ndarray
    v_nm: np.ndarray
    raw_nm: np.ndarray | None = None
    latent_nm: np.ndarray | None = None
    out_nm: np.ndarray | None = None
    op: DecayConv | None = None  # unscaled beta**j operator, reused by the backward pass

    @staticmethod
    def _bnt(a):
        return None if a is None else a.transpose(1, 0, 2)

    @property
    def input(self):
        return self._bnt(self.input_nm)

    @property
    def current(self):
        return self._bnt(self.current_nm)

    @property
    def no_reset_v(self):
        return self._bnt(self.v_nm)

    @property
    def raw_spikes(self):
        return self._bnt(self.raw_nm)

    @property
    def latent(self):
        return None if self.latent_nm is None else np.rint(self._bnt(self.latent_nm)).astype(np.int64)

    @property
    def out_spikes(self):
        return self._bnt(self.out_nm)


def _powers(beta: np.ndarray, t: int) -> np.ndarray:
    """``beta[n] ** j`` for ``j = 0..t-1`` with ``0 ** 0 == 1``."""
    return np.power(beta[:, None], np.arange(t)[None, :])


def decay_kernel(beta: np.ndarray, t: int) -> np.ndarray:
    return (1 - beta)[:, None] * _powers(beta, t)


def decay_kernel_dbeta(beta: np.ndarray, t: int) -> np.ndarray:
    """Elementwise derivative of :func:`decay_kernel` with respect to ``beta``."""
    j = np.arange(t)[None, :]
    lower = np.power(beta[:, None], np.maximum(j - 1, 0))
    jb = np.where(j > 0, j * lower, 0.0)
    return -_powers(beta, t) + (1 - beta)[:, None] * jb


def no_reset_potentials(
    current: np.ndarray,
    beta: np.ndarray,
    v0: np.ndarray | None = None,
    backend: str | None = None,
) -> np.ndarray:
    """Membrane potentials with the reset term removed.

    Storage index ``t`` holds step ``t + 1``, so
    ``out[..., t] = beta**(t+1) * v0 + (1 - beta) * sum_{k <= t} beta**(t-k) * current[..., k]``.
    """
    if current.ndim != 3 or beta.shape != (current.shape[1],):
        raise DimensionError(f"beta {beta.shape} does not match current {current.shape}")
    t = current.shape[2]
    beta = beta.astype(current.dtype, copy=False)
    out = causal_conv(current, decay_kernel(beta, t), backend)
    if v0 is not None:
        if v0.shape != beta.shape:
            raise DimensionError(f"v0 {v0.shape} does not match beta {beta.shape}")
        out += (v0[:, None] * np.power(beta[:, None], np.arange(1, t + 1)[None, :]))[None]
    return out


def no_reset_backward(
    grad: np.ndarray,
    current: np.ndarray,
    beta: np.ndarray,
    v0: np.ndarray | None = None,
    backend: str | None = None,
    need_beta_grad: bool = True,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Gradients of :func:`no_reset_potentials` w.r.t. current and beta."""
    t = current.shape[2]
    beta = beta.astype(current.dtype, copy=False)
    kernel = decay_kernel(beta, t)
    grad_current, grad_kernel = causal_conv_backward(
        grad, current, kernel, backend, need_kernel_grad=need_beta_grad
    )
    if not need_beta_grad:
        return grad_current, None
    grad_beta = (grad_kernel * decay_kernel_dbeta(beta, t)).sum(axis=1)
    if v0 is not None:
        steps = np.arange(1, t + 1)[None, :]
        dpow = steps * np.power(beta[:, None], steps - 1)
        grad_beta += v0 * (grad.sum(axis=0) * dpow).sum(axis=1)
    return grad_current, grad_beta


def ramp_kernel(t: int) -> np.ndarray:
    return np.arange(1, t + 1, dtype=np.float64)


# Largest T for which every partial sum of phi is an integer float32 holds exactly.
_PHI_F32_MAX_T = 5791


@functools.lru_cache(maxsize=32)
def _ramp_operator(t: int, backend: str, dtype: str):
    """Cached operator for the ramp kernel: a unit-decay conv (applied twice) or a Toeplitz matrix."""
    if backend == "chunked":
        return DecayConv(1.0, t, backend="chunked", dtype=dtype)
    kernel = ramp_kernel(t).astype(dtype)
    _direct_guard(kernel)
    return _toeplitz(kernel, upper=True)


# Up to this length one shared Toeplitz GEMM beats two chunked passes.
PHI_DIRECT_MAX_T = 128


def choose_phi_backend(t: int) -> str:
    return "direct" if t <= PHI_DIRECT_MAX_T else "chunked"


def _phi_nm(x: np.ndarray, backend: str | None, reverse: bool = False) -> np.ndarray:
    """Ramp-kernel convolution (or its adjoint) of an ``N x B x T`` array.

    The ramp ``[1, 2, ..., T]`` is the all-ones kernel convolved with itself,
    so the chunked backend runs two unit-decay convolutions.
    """
    n, b, t = x.shape
    backend = backend or choose_phi_backend(t)
    if backend == "chunked":
        op = _ramp_operator(t, backend, x.dtype.str)
        return op(op(x, reverse), reverse)
    if backend == "direct":
        toe = _ramp_operator(t, backend, x.dtype.str)
        return (x.reshape(n * b, t) @ (toe.T if reverse else toe)).reshape(n, b, t)
    kernel = ramp_kernel(t)
    if reverse:
        return conv_neuron_major_backward(x, kernel, backend)
    return conv_neuron_major(x, kernel, backend)


def _phi_values(raw_nm: np.ndarray, backend: str | None) -> np.ndarray:
    """phi of an ``N x B x T`` raster as a float array with exact integer values."""
    t = raw_nm.shape[2]
    exact = backend != "fft" and t <= _PHI_F32_MAX_T
    z = _phi_nm(raw_nm.astype(np.float32 if exact else np.float64), backend)
    if backend == "fft":
        # The transform path carries rounding noise; the GEMM paths are exact.
        np.rint(z, out=z)
    return z


def phi(raw_spikes: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Spike-ordering code ``z[t] = sum_{k <= t} s[k] * (t - k + 1)`` as int64.

    The exact result is an integer below ``T * (T + 1) / 2``, so the
    convolution is rounded after it runs in floating point.
    """
    raw = np.asarray(raw_spikes)
    if raw.ndim != 3:
        raise DimensionError(f"spikes must be B x N x T, got {raw.shape}")
    if not np.all((raw == 0) | (raw == 1)):
        raise EncodingError("phi expects a binary spike raster")
    z = _phi_values(np.ascontiguousarray(raw.transpose(1, 0, 2)), backend)
    return np.rint(z).astype(np.int64).transpose(1, 0, 2)


def phi_adjoint(grad_latent: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Exact adjoint of :func:`phi` (correlation with the ramp kernel)."""
    g = np.asarray(grad_latent, dtype=np.float64)
    out = _phi_nm(np.ascontiguousarray(g.transpose(1, 0, 2)), backend, reverse=True)
    return np.ascontiguousarray(out.transpose(1, 0, 2))


def extract_first_spike(latent: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Keep positions whose ordering code is exactly one."""
    return (np.asarray(latent) == 1).astype(dtype)


def _affine_nm(x: np.ndarray, params: LayerParams) -> np.ndarray:
    n_in, b, t = x.shape
    if params.n_in != n_in:
        raise DimensionError(f"weights {params.weights.shape} not conformable with input of {n_in} neurons")
    out = params.weights @ x.reshape(n_in, b * t)
    out += params.bias[:, None]
    return out.reshape(params.n_out, b, t)


def _forward_nm(x, params, threshold, spiking, backend, op=None) -> tuple[np.ndarray | None, FastLayerTrace]:
    t = x.shape[2]
    current = _affine_nm(x, params)
    if op is None:
        op = DecayConv(params.beta, t, backend=backend, dtype=current.dtype)
    v = op(current)
    v *= (1 - params.beta).astype(v.dtype)[:, None, None]
    trace = FastLayerTrace(x, current, v, op=op)
    if not spiking:
        return None, trace
    raw = v > threshold
    z = _phi_values(raw, backend)
    out = extract_first_spike(z, v.dtype)
    trace.raw_nm, trace.latent_nm, trace.out_nm = raw, z, out
    return out, trace


def _backward_nm(trace, params, grad_spikes, grad_potentials, slope, threshold, need_input_grad, backend):
    v = trace.v_nm
    n_out, b, t = v.shape
    if grad_spikes is not None:
        if trace.out_nm is None:
            raise StateError("readout layer has no spike output to differentiate")
        grad_v = _phi_nm(grad_spikes.astype(v.dtype, copy=False), backend, reverse=True)
        grad_v *= surrogate_grad(v, slope, threshold)
        if grad_potentials is not None:
            grad_v += grad_potentials
    elif grad_potentials is not None:
        grad_v = grad_potentials.astype(v.dtype, copy=False)
    else:
        grad_v = np.zeros_like(v)
    # lam[t] = sum_{k >= t} beta**(k-t) grad_v[k] is the adjoint state of
    # v[t] = beta v[t-1] + (1 - beta) I[t]; both parameter paths read from it.
    op = trace.op or DecayConv(params.beta, t, backend=backend, dtype=v.dtype)
    lam = op(grad_v, reverse=True)
    if params.trainable_beta:
        grad_beta = np.einsum("nbt,nbt->n", lam[:, :, 1:], v[:, :, :-1])
        grad_beta -= np.einsum("nbt,nbt->n", lam, trace.current_nm)
        grad_beta = grad_beta.astype(np.float64)
    else:
        grad_beta = np.zeros_like(params.beta)
    lam *= (1 - params.beta).astype(lam.dtype)[:, None, None]
    g2 = lam.reshape(n_out, b * t)
    x2 = trace.input_nm.reshape(params.n_in, b * t)
    grad_w = g2 @ x2.T
    grad_b = g2.sum(axis=1)
    grad_in = (params.weights.T @ g2).reshape(params.n_in, b, t) if need_input_grad else None
    return grad_in, {"weights": grad_w, "bias": grad_b, "beta": grad_beta}


def fast_layer_forward(
    spikes_in: np.ndarray,
    params: LayerParams,
    threshold: float = V_TH,
    spiking: bool = True,
    backend: str | None = None,
) -> tuple[np.ndarray | None, FastLayerTrace]:
    """Current -> no-reset potentials -> crossings -> phi -> g.

    Takes and returns ``B x N x T`` spikes.  With ``spiking=False`` the layer
    is a readout and stops after the potentials.
    """
    if spikes_in.ndim != 3:
        raise DimensionError(f"input must be B x N x T, got {spikes_in.shape}")
    x = np.ascontiguousarray(spikes_in.transpose(1, 0, 2))
    out, trace = _forward_nm(x, params, threshold, spiking, backend)
    if out is None:
        return None, trace
    return np.ascontiguousarray(out.transpose(1, 0, 2)), trace


def fast_layer_backward(
    trace: FastLayerTrace | None,
    params: LayerParams,
    grad_spikes: np.ndarray | None = None,
    grad_potentials: np.ndarray | None = None,
    slope: float = 10.0,
    threshold: float = V_TH,
    need_input_grad: bool = True,
    backend: str | None = None,
) -> tuple[np.ndarray | None, dict[str, np.ndarray]]:
    """Hand-composed adjoint of :func:`fast_layer_forward`.

    ``g`` is straight-through, ``phi`` uses its exact linear adjoint, and the
    spike function is replaced by the surrogate derivative at the no-reset
    potential.  Gradients are ``B x N x T``.
    """
    if trace is None:
        raise StateError("fast_layer_backward called without a forward trace")
    gs = None if grad_spikes is None else np.ascontiguousarray(grad_spikes.transpose(1, 0, 2))
    gp = None if grad_potentials is None else np.ascontiguousarray(grad_potentials.transpose(1, 0, 2))
    grad_in, grads = _backward_nm(trace, params, gs, gp, slope, threshold, need_input_grad, backend)
    if grad_in is not None:
        grad_in = np.ascontiguousarray(grad_in.transpose(1, 0, 2))
    return grad_in, grads


# Batch tiles of about this many elements keep a layer's intermediates in
# cache; on one core that matters more than GEMM size.
TILE_ELEMS = 2**18


def tile_rows(batch: int, width: int, t: int) -> int:
    """Samples per tile for a stack whose widest layer has ``width`` neurons."""
    return max(1, min(batch, TILE_ELEMS // max(width * t, 1)))


@dataclass
class FastStackTrace:
    """Per-tile layer traces of a whole stack; tiles partition the batch."""

    tiles: list[tuple[slice, list[FastLayerTrace]]]
    batch: int

    def hidden_spikes(self, i: int) -> np.ndarray:
        """``B x N x T`` output spikes of hidden layer ``i``."""
        return np.concatenate([trs[i].out_spikes for _, trs in self.tiles], axis=0)

    def hidden_counts(self) -> list[float]:
        """Total spikes emitted by each hidden layer over the batch."""
        n_hidden = len(self.tiles[0][1]) - 1 if self.tiles else 0
        return [float(sum(trs[i].out_nm.sum() for _, trs in self.tiles)) for i in range(n_hidden)]


def fast_forward(
    layers: list[LayerParams],
    spikes: np.ndarray,
    threshold: float = V_TH,
    backend: str | None = None,
    tile: int | None = None,
) -> tuple[np.ndarray, FastStackTrace]:
    """Whole stack with a non-spiking last layer, one batch tile at a time.

    Returns the ``B x C x T`` readout potentials and the stack trace.
    """
    if spikes.ndim != 3:
        raise DimensionError(f"input must be B x N x T, got {spikes.shape}")
    b, _, t = spikes.shape
    step = tile or tile_rows(b, max(max(p.n_in, p.n_out) for p in layers), t)
    pots = np.empty((b, layers[-1].n_out, t), dtype=np.result_type(spikes.dtype, layers[-1].weights.dtype))
    ops = [DecayConv(p.beta, t, backend=backend, dtype=pots.dtype) for p in layers]
    tiles = []
    for start in range(0, b, step):
        sl = slice(start, min(start + step, b))
        x = np.ascontiguousarray(spikes[sl].transpose(1, 0, 2))
        traces = []
        for i, p in enumerate(layers):
            out, tr = _forward_nm(x, p, threshold, i < len(layers) - 1, backend, ops[i])
            traces.append(tr)
            x = out
        pots[sl] = traces[-1].v_nm.transpose(1, 0, 2)
        tiles.append((sl, traces))
    return pots, FastStackTrace(tiles, b)


def fast_backward(
    layers: list[LayerParams],
    stack: FastStackTrace,
    grad_potentials: np.ndarray,
    slope: float = 10.0,
    threshold: float = V_TH,
    backend: str | None = None,
) -> list[dict[str, np.ndarray]]:
    """Parameter gradients of the stack given ``B x C x T`` readout gradients."""
    if stack is None or not stack.tiles:
        raise StateError("fast_backward called without a forward trace")
    if grad_potentials.shape[0] != stack.batch:
        raise DimensionError(f"gradient batch {grad_potentials.shape[0]} != traced batch {stack.batch}")
    total: list[dict[str, np.ndarray]] | None = None
    for sl, traces in stack.tiles:
        upstream = None
        grads: list[dict[str, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
        for i in reversed(range(len(layers))):
            is_readout = i == len(layers) - 1
            gp = np.ascontiguousarray(grad_potentials[sl].transpose(1, 0, 2)) if is_readout else None
            upstream, grads[i] = _backward_nm(
                traces[i], layers[i], None if is_readout else upstream, gp,
                slope, threshold, i > 0, backend,
            )
        total = grads if total is None else _accumulate(total, grads)
    return total


def _accumulate(total: list[dict], grads: list[dict]) -> list[dict]:
    for acc, g in zip(total, grads):
        for k in acc:
            acc[k] += g[k]
    return total
