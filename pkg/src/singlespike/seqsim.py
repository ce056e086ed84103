"""Sequential LIF baseline: step-by-step simulation with reset, and BPTT.

This is the reference the fast path is measured against, both for
correctness (identical single-spike outputs) and for speed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import DimensionError, EncodingError, StateError
from .neuron import V_TH, surrogate_grad
from .numerics import affine_backward, affine_forward

Mode = Literal["single", "multi"]


@dataclass
class LayerParams:
    """Weights ``N_out x N_in``, bias ``N_out`` and per-neuron decay ``beta``."""

    weights: np.ndarray
    bias: np.ndarray
    beta: np.ndarray
    trainable_beta: bool = True

    def __post_init__(self):
        n_out = self.weights.shape[0]
        if self.weights.ndim != 2:
            raise DimensionError(f"weights must be 2-D, got {self.weights.shape}")
        if self.bias.shape != (n_out,) or self.beta.shape != (n_out,):
            raise DimensionError(
                f"bias {self.bias.shape} / beta {self.beta.shape} must both be ({n_out},)"
            )

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "LayerParams":
        return LayerParams(
            self.weights.copy(), self.bias.copy(), self.beta.copy(), self.trainable_beta
        )

    def astype(self, dtype) -> "LayerParams":
        return LayerParams(
            self.weights.astype(dtype),
            self.bias.astype(dtype),
            self.beta.astype(dtype),
            self.trainable_beta,
        )


@dataclass
class SeqLayerState:
    """Per-neuron state carried between timesteps, each ``B x N``."""

    v: np.ndarray
    d: np.ndarray
    last_spike: np.ndarray

    @classmethod
    def rest(cls, batch: int, n: int, dtype=np.float64) -> "SeqLayerState":
        z = np.zeros((batch, n), dtype=dtype)
        return cls(z, z.copy(), z.copy())


def seq_step(
    state: SeqLayerState,
    params: LayerParams,
    input_t: np.ndarray,
    mode: Mode = "single",
    threshold: float = V_TH,
) -> tuple[SeqLayerState, np.ndarray]:
    """Advance one layer by one timestep.

    ``input_t`` holds presynaptic spikes at the new timestep (``B x N_in``).
    Returns the new state and the emitted spikes (``B x N_out``).
    """
    if input_t.ndim != 2 or input_t.shape[1] != params.n_in:
        raise DimensionError(
            f"input {input_t.shape} not conformable with weights {params.weights.shape}"
        )
    if state.v.shape != (input_t.shape[0], params.n_out):
        raise DimensionError(f"state {state.v.shape} does not match batch/layer size")
    beta = params.beta
    current = params.bias + input_t @ params.weights.T
    v = beta * state.v + (1 - beta) * current - state.last_spike
    raw = (v > threshold).astype(v.dtype)
    if mode == "single":
        emitted = (1 - state.d) * raw
        d = np.maximum(state.d, emitted)
    else:
        emitted = raw
        d = np.maximum(state.d, raw)
    return SeqLayerState(v, d, raw), emitted


@dataclass
class SeqLayerTrace:
    """Everything the backward pass needs from one layer's forward run.

    Time-major copies (``T x B x N``) are what the reverse-time loop reads.
    """

    input: np.ndarray
    current_tm: np.ndarray
    v_tm: np.ndarray
    gate_tm: np.ndarray | None
    out: np.ndarray | None
    mode: Mode
    threshold: float

    @property
    def potentials(self) -> np.ndarray:
        return np.ascontiguousarray(self.v_tm.transpose(1, 2, 0))


def _check_binary(x: np.ndarray) -> None:
    if not np.all((x == 0) | (x == 1)):
        raise EncodingError("input spikes must be binary (0/1)")


def seq_layer_forward(
    spikes_in: np.ndarray,
    params: LayerParams,
    mode: Mode = "single",
    threshold: float = V_TH,
    spiking: bool = True,
) -> tuple[np.ndarray | None, SeqLayerTrace]:
    """Simulate one layer over all timesteps.

    With ``spiking=False`` the layer is a readout: infinite threshold, no reset,
    and only the potential trace is produced.
    """
    current = affine_forward(spikes_in, params.weights, params.bias)
    cur_tm = np.ascontiguousarray(current.transpose(2, 0, 1))
    t_steps, b, n = cur_tm.shape
    beta = params.beta.astype(cur_tm.dtype, copy=False)
    one_minus = 1 - beta
    v_tm = np.empty_like(cur_tm)
    v = np.zeros((b, n), dtype=cur_tm.dtype)

    if not spiking:
        for t in range(t_steps):
            v = beta * v + one_minus * cur_tm[t]
            v_tm[t] = v
        return None, SeqLayerTrace(spikes_in, cur_tm, v_tm, None, None, mode, np.inf)

    out_tm = np.empty_like(cur_tm)
    gate_tm = np.empty_like(cur_tm) if mode == "single" else None
    raw = np.zeros((b, n), dtype=cur_tm.dtype)
    d = np.zeros((b, n), dtype=cur_tm.dtype)
    for t in range(t_steps):
        v = beta * v + one_minus * cur_tm[t] - raw
        v_tm[t] = v
        raw = (v > threshold).astype(v.dtype)
        if mode == "single":
            gate = 1 - d
            gate_tm[t] = gate
            emitted = gate * raw
            np.maximum(d, emitted, out=d)
            out_tm[t] = emitted
        else:
            out_tm[t] = raw
    out = np.ascontiguousarray(out_tm.transpose(1, 2, 0))
    return out, SeqLayerTrace(spikes_in, cur_tm, v_tm, gate_tm, out, mode, threshold)


def seq_layer_backward(
    trace: SeqLayerTrace | None,
    params: LayerParams,
    grad_spikes: np.ndarray | None = None,
    grad_potentials: np.ndarray | None = None,
    slope: float = 10.0,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, dict[str, np.ndarray]]:
    """Surrogate-gradient BPTT through one layer.

    The reset term and the single-spike gate are treated as constants.
    ``grad_spikes`` / ``grad_potentials`` are ``B x N x T`` upstream gradients;
    either may be omitted.
    """
    if trace is None:
        raise StateError("seq_layer_backward called without a forward trace")
    v_tm = trace.v_tm
    t_steps, b, n = v_tm.shape
    direct = np.zeros_like(v_tm)
    if grad_spikes is not None:
        if trace.out is None:
            raise StateError("readout layer has no spike output to differentiate")
        g = np.ascontiguousarray(grad_spikes.transpose(2, 0, 1))
        g = g * surrogate_grad(v_tm, slope, trace.threshold)
        if trace.gate_tm is not None:
            g *= trace.gate_tm
        direct += g
    if grad_potentials is not None:
        direct += grad_potentials.transpose(2, 0, 1)

    beta = params.beta.astype(v_tm.dtype, copy=False)
    gv_tm = np.empty_like(v_tm)
    acc = np.zeros((b, n), dtype=v_tm.dtype)
    for t in range(t_steps - 1, -1, -1):
        acc = direct[t] + beta * acc
        gv_tm[t] = acc

    v_prev = np.concatenate([np.zeros((1, b, n), dtype=v_tm.dtype), v_tm[:-1]], axis=0)
    grad_beta = np.einsum("tbn,tbn->n", gv_tm, v_prev - trace.current_tm)
    grad_current = np.ascontiguousarray(((1 - beta) * gv_tm).transpose(1, 2, 0))
    grad_in, grad_w, grad_b = affine_backward(
        grad_current, trace.input, params.weights, need_input_grad
    )
    grads = {"weights": grad_w, "bias": grad_b, "beta": grad_beta}
    return grad_in, grads


@dataclass
class SeqTrace:
    layers: list[SeqLayerTrace] = field(default_factory=list)


def seq_forward(
    layers: list[LayerParams],
    spikes: np.ndarray,
    mode: Mode = "single",
    readout: bool = True,
) -> tuple[list[np.ndarray], list[np.ndarray], SeqTrace]:
    """Run a feedforward stack layer by layer.

    Returns ``(spikes_per_layer, potentials_per_layer, trace)``.  When
    ``readout`` is true the last layer never spikes and contributes ``None`` to
    the spike list.
    """
    _check_binary(spikes)
    outs: list[np.ndarray] = []
    pots: list[np.ndarray] = []
    trace = SeqTrace()
    x = spikes
    for i, p in enumerate(layers):
        is_readout = readout and i == len(layers) - 1
        out, tr = seq_layer_forward(x, p, mode, spiking=not is_readout)
        trace.layers.append(tr)
        outs.append(out)
        pots.append(tr.potentials)
        x = out
    return outs, pots, trace
