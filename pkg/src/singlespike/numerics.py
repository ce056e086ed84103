"""Dense tensor kernels used by both network models.

Arrays are plain ``numpy.ndarray`` objects laid out as ``batch x neurons x time``
with time as the innermost (contiguous) axis.  Nothing here broadcasts
implicitly: mismatched shapes raise :class:`DimensionError`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import as_strided, sliding_window_view

from .errors import DimensionError, NumericError

__all__ = [
    "affine_forward",
    "affine_backward",
    "causal_conv",
    "causal_conv_backward",
    "choose_backend",
    "conv_neuron_major",
    "conv_neuron_major_backward",
    "decay_conv_neuron_major",
    "DecayConv",
    "choose_decay_backend",
    "finite_diff_check",
    "DIRECT_MAX_T",
]

# Below this many timesteps the Toeplitz/GEMM path beats the FFT path on a
# single-core reference machine (crossover measured near T=200-250).
DIRECT_MAX_T = 256

# Direct path materialises an N x T x T Toeplitz stack; refuse beyond this.
_DIRECT_MAX_ELEMS = 64_000_000


def _check_3d(name: str, x: np.ndarray) -> None:
    if x.ndim != 3:
        raise DimensionError(f"{name} must be B x N x T, got shape {x.shape}")


def affine_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Apply ``bias[i] + sum_j weights[i, j] * x[b, j, t]`` at every (b, t)."""
    _check_3d("input", x)
    if weights.ndim != 2 or weights.shape[1] != x.shape[1]:
        raise DimensionError(
            f"weights {weights.shape} not conformable with input {x.shape}"
        )
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"bias {bias.shape} does not match weights {weights.shape}")
    out = np.matmul(weights, x)
    out += bias[:, None]
    return out


def affine_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    weights: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Adjoint of :func:`affine_forward`.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_input`` is
    ``None`` when ``need_input_grad`` is false (first layer).
    """
    _check_3d("grad_out", grad_out)
    _check_3d("input", x)
    expected = (x.shape[0], weights.shape[0], x.shape[2])
    if grad_out.shape != expected:
        raise DimensionError(f"grad_out {grad_out.shape} != forward output shape {expected}")
    if weights.shape[1] != x.shape[1]:
        raise DimensionError(f"weights {weights.shape} not conformable with input {x.shape}")
    b, n_out, t = grad_out.shape
    n_in = x.shape[1]
    # Fold batch into the time axis: (N_out, B*T) @ (B*T, N_in).
    g2 = grad_out.transpose(1, 0, 2).reshape(n_out, b * t)
    x2 = x.transpose(1, 0, 2).reshape(n_in, b * t)
    grad_w = g2 @ x2.T
    grad_b = g2.sum(axis=1)
    grad_in = np.matmul(weights.T, grad_out) if need_input_grad else None
    return grad_in, grad_w, grad_b


def choose_backend(t: int) -> str:
    return "direct" if t < DIRECT_MAX_T else "fft"


def _check_conv(x: np.ndarray, kernel: np.ndarray) -> None:
    _check_3d("input", x)
    t = x.shape[2]
    if kernel.ndim == 1:
        if kernel.shape[0] != t:
            raise DimensionError(f"shared kernel length {kernel.shape[0]} != T={t}")
    elif kernel.ndim == 2:
        if kernel.shape != (x.shape[1], t):
            raise DimensionError(
                f"kernel {kernel.shape} does not match input channels/time {x.shape}"
            )
    else:
        raise DimensionError(f"kernel must be N x T or length-T, got shape {kernel.shape}")


def _toeplitz(kernel: np.ndarray, upper: bool = False) -> np.ndarray:
    """Contiguous Toeplitz stack built from ``kernel`` along its last axis.

    Lower form: ``toe[..., t, k] = kernel[..., t - k]`` for ``t >= k``.  Upper
    form is its transpose, ``toe[..., k, t]``.  Entries off the causal
    triangle are zero.
    """
    t = kernel.shape[-1]
    pad = np.zeros(kernel.shape[:-1] + (t - 1,), dtype=kernel.dtype)
    padded = np.concatenate([pad, kernel], axis=-1)
    # window[..., i, j] = padded[..., i + j]; reversing j gives kernel[i - j'].
    lower = sliding_window_view(padded, t, axis=-1)[..., ::-1]
    if upper:
        return np.ascontiguousarray(lower.swapaxes(-1, -2))
    return np.ascontiguousarray(lower)


def _direct_guard(kernel: np.ndarray) -> None:
    t = kernel.shape[-1]
    rows = 1 if kernel.ndim == 1 else kernel.shape[0]
    if rows * t * t > _DIRECT_MAX_ELEMS:
        raise MemoryError(f"direct backend would need a {rows}x{t}x{t} Toeplitz stack")


def _conv_direct(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    _direct_guard(kernel)
    b, n, t = x.shape
    toe_t = _toeplitz(kernel.astype(x.dtype, copy=False), upper=True)
    if kernel.ndim == 1:
        return (x.reshape(b * n, t) @ toe_t).reshape(b, n, t)
    xt = np.ascontiguousarray(x.transpose(1, 0, 2))  # N x B x T
    out = np.matmul(xt, toe_t)
    return np.ascontiguousarray(out.transpose(1, 0, 2))


def _fft_len(t: int) -> int:
    return sfft.next_fast_len(2 * t - 1, real=True)


def _conv_fft(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    t = x.shape[2]
    n = _fft_len(t)
    kf = sfft.rfft(kernel.astype(x.dtype, copy=False), n=n, axis=-1)
    out = sfft.irfft(sfft.rfft(x, n=n, axis=-1) * kf, n=n, axis=-1)[..., :t]
    return np.ascontiguousarray(out)


def causal_conv(x: np.ndarray, kernel: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Depthwise causal convolution along time.

    ``out[b, n, t] = sum_{k <= t} kernel[n, t - k] * x[b, n, k]``.  ``kernel``
    is either ``N x T`` (one kernel per neuron) or a single length-``T`` row
    shared by every channel.
    """
    _check_conv(x, kernel)
    backend = backend or choose_backend(x.shape[2])
    if backend == "direct":
        return _conv_direct(x, kernel)
    if backend == "fft":
        return _conv_fft(x, kernel)
    raise ValueError(f"unknown backend {backend!r}")


def causal_conv_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    kernel: np.ndarray,
    backend: str | None = None,
    need_input_grad: bool = True,
    need_kernel_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Adjoint of :func:`causal_conv`.

    ``grad_input[b, n, k] = sum_{t >= k} grad_out[b, n, t] * kernel[n, t - k]`` and
    ``grad_kernel[n, j] = sum_{b, t} grad_out[b, n, t] * x[b, n, t - j]``.  For a
    shared kernel the kernel gradient is also summed over channels.
    """
    _check_conv(x, kernel)
    if grad_out.shape != x.shape:
        raise DimensionError(f"grad_out {grad_out.shape} != input {x.shape}")
    backend = backend or choose_backend(x.shape[2])
    if backend == "direct":
        return _conv_backward_direct(grad_out, x, kernel, need_input_grad, need_kernel_grad)
    if backend == "fft":
        return _conv_backward_fft(grad_out, x, kernel, need_input_grad, need_kernel_grad)
    raise ValueError(f"unknown backend {backend!r}")


def _diag_sums(m: np.ndarray) -> np.ndarray:
    """``out[..., j] = sum_t m[..., t, t - j]`` for lags ``j >= 0``."""
    t = m.shape[-1]
    lead = m.shape[:-2]
    low = np.tril(m).reshape(-1, t * t)
    rows = low.shape[0]
    buf = np.zeros((rows, t + t * t), dtype=m.dtype)
    buf[:, t:] = low
    s = buf.strides[1]
    # view[r, i, j] = buf[r, t + i * (t + 1) - j]; entries with i < j land in
    # the zero pad or the zeroed upper triangle.
    view = as_strided(buf[:, t:], shape=(rows, t, t), strides=(buf.strides[0], (t + 1) * s, -s))
    return view.sum(axis=1).reshape(*lead, t)


def _conv_backward_direct(grad_out, x, kernel, need_input_grad, need_kernel_grad):
    _direct_guard(kernel)
    b, n, t = x.shape
    grad_in = grad_k = None
    if kernel.ndim == 1:
        g2 = grad_out.reshape(b * n, t)
        if need_input_grad:
            grad_in = (g2 @ _toeplitz(kernel.astype(x.dtype, copy=False))).reshape(b, n, t)
        if need_kernel_grad:
            m = np.ascontiguousarray(g2.T) @ x.reshape(b * n, t)  # T x T
            grad_k = _diag_sums(m)
        return grad_in, grad_k
    gt = np.ascontiguousarray(grad_out.transpose(1, 0, 2))  # N x B x T
    if need_input_grad:
        toe = _toeplitz(kernel.astype(x.dtype, copy=False))
        grad_in = np.ascontiguousarray(np.matmul(gt, toe).transpose(1, 0, 2))
    if need_kernel_grad:
        g_tb = np.ascontiguousarray(grad_out.transpose(1, 2, 0))  # N x T x B
        xt = np.ascontiguousarray(x.transpose(1, 0, 2))
        m = np.matmul(g_tb, xt)  # N x T x T
        grad_k = _diag_sums(m)
    return grad_in, grad_k


def _conv_backward_fft(grad_out, x, kernel, need_input_grad, need_kernel_grad):
    t = x.shape[2]
    n = _fft_len(t)
    gf = sfft.rfft(grad_out, n=n, axis=-1)
    grad_in = grad_k = None
    if need_input_grad:
        kf = sfft.rfft(kernel.astype(x.dtype, copy=False), n=n, axis=-1)
        grad_in = np.ascontiguousarray(sfft.irfft(gf * np.conj(kf), n=n, axis=-1)[..., :t])
    if need_kernel_grad:
        cross = gf * np.conj(sfft.rfft(x, n=n, axis=-1))
        cross = cross.sum(axis=(0, 1)) if kernel.ndim == 1 else cross.sum(axis=0)
        grad_k = np.ascontiguousarray(sfft.irfft(cross, n=n, axis=-1)[..., :t])
    return grad_in, grad_k


# ------------------------------------------------------------ neuron-major
#
# The fast path keeps activations as ``N x B x T`` so that per-neuron kernels
# index the leading axis and the affine maps become plain 2-D GEMMs over a
# ``N x (B*T)`` view.  No transposes are needed between layers.


def _check_nm(x: np.ndarray, kernel: np.ndarray) -> None:
    _check_3d("input", x)
    t = x.shape[2]
    if kernel.ndim == 1 and kernel.shape[0] == t:
        return
    if kernel.ndim == 2 and kernel.shape == (x.shape[0], t):
        return
    raise DimensionError(f"kernel {kernel.shape} does not match N x B x T input {x.shape}")


def conv_neuron_major(x: np.ndarray, kernel: np.ndarray, backend: str | None = None) -> np.ndarray:
    """:func:`causal_conv` for an ``N x B x T`` array."""
    _check_nm(x, kernel)
    n, b, t = x.shape
    backend = backend or choose_backend(t)
    kernel = kernel.astype(x.dtype, copy=False)
    if backend == "direct":
        _direct_guard(kernel)
        toe_t = _toeplitz(kernel, upper=True)
        if kernel.ndim == 1:
            return (x.reshape(n * b, t) @ toe_t).reshape(n, b, t)
        return np.matmul(x, toe_t)
    if backend == "fft":
        size = _fft_len(t)
        kf = sfft.rfft(kernel, n=size, axis=-1)
        if kernel.ndim == 2:
            kf = kf[:, None, :]
        out = sfft.irfft(sfft.rfft(x, n=size, axis=-1) * kf, n=size, axis=-1)[..., :t]
        return np.ascontiguousarray(out)
    raise ValueError(f"unknown backend {backend!r}")


def conv_neuron_major_backward(
    grad_out: np.ndarray, kernel: np.ndarray, backend: str | None = None
) -> np.ndarray:
    """Input gradient of :func:`conv_neuron_major` (causal correlation with the kernel)."""
    _check_nm(grad_out, kernel)
    n, b, t = grad_out.shape
    backend = backend or choose_backend(t)
    kernel = kernel.astype(grad_out.dtype, copy=False)
    if backend == "direct":
        _direct_guard(kernel)
        toe = _toeplitz(kernel)
        if kernel.ndim == 1:
            return (grad_out.reshape(n * b, t) @ toe).reshape(n, b, t)
        return np.matmul(grad_out, toe)
    if backend == "fft":
        size = _fft_len(t)
        kf = sfft.rfft(kernel, n=size, axis=-1)
        if kernel.ndim == 2:
            kf = kf[:, None, :]
        gf = sfft.rfft(grad_out, n=size, axis=-1)
        return np.ascontiguousarray(sfft.irfft(gf * np.conj(kf), n=size, axis=-1)[..., :t])
    raise ValueError(f"unknown backend {backend!r}")


# ------------------------------------------------------ geometric kernels
#
# Kernels of the form ``scale * beta**j`` have rank-one off-diagonal blocks,
# so a length-T convolution splits into independent length-L blocks (one
# batched GEMM) plus a carry between blocks, which is itself a geometric
# convolution over block index with ratio ``beta**L`` (a second, much smaller
# GEMM).  Cost per row is about ``T*L + (T/L)**2`` instead of ``T**2``.

DECAY_BACKENDS = ("direct", "fft", "chunked")

# Below this length a single Toeplitz GEMM is cheaper than blocking.
CHUNKED_MIN_T = 32


def choose_decay_backend(t: int) -> str:
    return "direct" if t < CHUNKED_MIN_T else "chunked"


def _block_len(t: int) -> int:
    """Block length; flat in T because the block GEMM dominates, measured on one core."""
    return 16 if t < 256 else 32


def _geometric(beta: np.ndarray, length: int, dtype) -> np.ndarray:
    """``beta[..., None] ** j`` for ``j < length``, ``0 ** 0 == 1``."""
    return np.power(beta[..., None], np.arange(length)).astype(dtype, copy=False)


class DecayConv:
    """Geometric causal convolution with precomputed operators.

    ``out[n, b, t] = scale[n] * sum_{k <= t} beta[n]**(t - k) * x[n, b, k]`` on
    ``N x B x T`` arrays; ``reverse=True`` applies the adjoint, which sums over
    ``k >= t`` with ``beta**(k - t)``.  ``beta`` may be a scalar shared by every
    neuron.  Build once per parameter value and apply to many batch tiles.
    """

    def __init__(self, beta, t: int, scale=None, backend: str | None = None, dtype=np.float64,
                 block: int | None = None):
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim not in (0, 1):
            raise DimensionError(f"beta must be a scalar or a vector, got {beta.shape}")
        scale = np.ones_like(beta) if scale is None else np.asarray(scale, dtype=np.float64)
        if scale.shape != beta.shape:
            raise DimensionError(f"scale {scale.shape} does not match beta {beta.shape}")
        self.backend = backend or choose_decay_backend(t)
        if self.backend not in DECAY_BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        self.t, self.dtype = t, np.dtype(dtype)
        self.n = None if beta.ndim == 0 else beta.shape[0]
        self.shared = beta.ndim == 0
        if self.backend == "chunked":
            self._build_chunked(beta, scale, block or _block_len(t))
        else:
            self.kernel = (scale[..., None] * _geometric(beta, t, np.float64)).astype(self.dtype)
            if self.backend == "direct":
                _direct_guard(self.kernel)
                self.toe = _toeplitz(self.kernel, upper=True)

    def _build_chunked(self, beta, scale, block):
        self.block = block
        self.m = -(-self.t // block)
        pw = _geometric(beta, block + 1, np.float64)
        toe = _toeplitz(scale[..., None] * pw[..., :block], upper=True)  # toe[k, i] = kern[i - k]
        # One extra row multiplies the state carried in from the neighbouring
        # block, so a single GEMM applies both parts.
        fwd = np.concatenate([toe, pw[..., None, 1:]], axis=-2)          # beta**(i + 1) from the previous end
        rev = np.concatenate([toe.swapaxes(-1, -2), pw[..., None, block:0:-1]], axis=-2)
        self.aug = {False: np.ascontiguousarray(fwd, dtype=self.dtype),
                    True: np.ascontiguousarray(rev, dtype=self.dtype)}
        # Column whose value is the state at a block's end (forward) or start (adjoint).
        self.edge = {False: np.ascontiguousarray(self.aug[False][..., block - 1:block]),
                     True: np.ascontiguousarray(self.aug[True][..., 0:1])}
        carry = _toeplitz(_geometric(beta ** block, self.m, self.dtype), upper=True)
        self.carry = {False: carry, True: np.ascontiguousarray(carry.swapaxes(-1, -2))}

    def __call__(self, x: np.ndarray, reverse: bool = False) -> np.ndarray:
        _check_3d("input", x)
        n, b, t = x.shape
        if t != self.t or (self.n is not None and n != self.n):
            raise DimensionError(f"input {x.shape} does not match operator for {self.n} x {self.t}")
        x = x.astype(self.dtype, copy=False)
        if self.backend == "chunked":
            return self._chunked(x, reverse)
        if self.backend == "direct":
            if reverse:
                if not hasattr(self, "toe_rev"):
                    self.toe_rev = np.ascontiguousarray(self.toe.swapaxes(-1, -2))
                toe = self.toe_rev
            else:
                toe = self.toe
            if self.shared:
                return (x.reshape(n * b, t) @ toe).reshape(n, b, t)
            return np.matmul(x, toe)
        if reverse:
            return conv_neuron_major_backward(x, self.kernel, "fft")
        return conv_neuron_major(x, self.kernel, "fft")

    def _chunked(self, x: np.ndarray, reverse: bool) -> np.ndarray:
        n, b, t = x.shape
        block, m = self.block, self.m
        full = t // block
        xa = np.empty((n, b, m, block + 1), dtype=self.dtype)
        xa[:, :, :full, :block] = x[..., : full * block].reshape(n, b, full, block)
        if full < m:
            tail = t - full * block
            xa[:, :, full, :tail] = x[..., full * block:]
            xa[:, :, full, tail:block] = 0
        xa[..., block] = 0
        rows = xa.reshape(-1, block + 1) if self.shared else xa.reshape(n, b * m, block + 1)
        if m > 1:
            edge = (rows @ self.edge[reverse]).reshape(n, b, m)
            if self.shared:
                state = (edge.reshape(-1, m) @ self.carry[reverse]).reshape(n, b, m)
            else:
                state = np.matmul(edge, self.carry[reverse])
            if reverse:
                xa[:, :, :-1, block] = state[:, :, 1:]
            else:
                xa[:, :, 1:, block] = state[:, :, :-1]
        out = (rows @ self.aug[reverse]).reshape(n, b, m * block)
        return out[..., :t] if m * block != t else out


def decay_conv_neuron_major(
    x: np.ndarray,
    beta,
    scale=None,
    backend: str | None = None,
    reverse: bool = False,
    block: int | None = None,
) -> np.ndarray:
    """One-off :class:`DecayConv` application to an ``N x B x T`` array."""
    _check_3d("input", x)
    n, _, t = x.shape
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim == 1 and beta.shape != (n,):
        raise DimensionError(f"beta {beta.shape} does not match {n} neurons")
    return DecayConv(beta, t, scale, backend, x.dtype, block)(x, reverse)


def finite_diff_check(
    fn: Callable[[np.ndarray], float],
    point: np.ndarray,
    analytic_grad: np.ndarray,
    step: float = 1e-5,
) -> float:
    """Largest relative error between ``analytic_grad`` and central differences of ``fn``.

    The relative error per coordinate is
    ``|a - c| / (|a| + |c| + 1e-12)``.
    """
    point = np.array(point, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if analytic.shape != point.shape:
        raise DimensionError(f"gradient {analytic.shape} != point {point.shape}")
    flat = point.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(fn(point))
        flat[i] = orig - step
        f_minus = float(fn(point))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        central = (f_plus - f_minus) / (2 * step)
        a = analytic.reshape(-1)[i]
        err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
        worst = max(worst, err)
    return worst
