"""Scalar LIF maths in normalised units (rest 0, threshold 1)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateModelError, ParameterError

V_TH = 1.0
V_REST = 0.0


@dataclass(frozen=True)
class LifPhysical:
    """LIF neuron in physical units (potentials in mV, tau in ms)."""

    v_rest: float
    v_th: float
    resistance: float = 1.0
    tau: float = 10.0

    def __post_init__(self):
        if self.v_th == self.v_rest:
            raise DegenerateModelError("v_th equals v_rest")
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")

    def normalized(self, dt: float) -> "LifNormalized":
        return LifNormalized(beta=beta_from_tau(self.tau, dt), dt=dt)

    def input_scale(self) -> float:
        """Factor mapping physical current to normalised current."""
        return self.resistance / (self.v_th - self.v_rest)


@dataclass(frozen=True)
class LifNormalized:
    beta: float
    dt: float

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ParameterError(f"beta must lie in [0, 1], got {self.beta}")
        if not self.dt > 0:
            raise ParameterError(f"dt must be positive, got {self.dt}")


@dataclass(frozen=True)
class SurrogateCfg:
    slope: float = 10.0

    def __post_init__(self):
        if not self.slope > 0:
            raise ParameterError(f"surrogate slope must be positive, got {self.slope}")


def normalize_potential(p: LifPhysical, v):
    """Map a physical potential so that rest -> 0 and threshold -> 1."""
    if p.v_th == p.v_rest:
        raise DegenerateModelError("v_th equals v_rest")
    return (v - p.v_rest) / (p.v_th - p.v_rest)


def beta_from_tau(tau, dt, method: str = "exp"):
    """Per-step decay factor.

    ``method="exp"`` gives ``exp(-dt / tau)``, exact for piecewise-constant
    current.  ``method="euler"`` gives the forward-Euler factor ``1 - dt / tau``
    (first-order accurate, requires ``dt <= tau``).  Scalars or arrays.
    """
    tau_a = np.asarray(tau, dtype=np.float64)
    if np.any(~(tau_a > 0)):
        raise ParameterError(f"tau must be positive, got {tau}")
    if not dt > 0:
        raise ParameterError(f"dt must be positive, got {dt}")
    if method == "exp":
        out = np.exp(-dt / tau_a)
    elif method == "euler":
        if np.any(dt > tau_a):
            raise ParameterError(f"forward Euler needs dt <= tau (dt={dt}, tau={tau})")
        out = 1.0 - dt / tau_a
    else:
        raise ParameterError(f"unknown discretisation {method!r}")
    return float(out) if out.ndim == 0 else out


def spike_fn(v, threshold: float = V_TH):
    """Heaviside with strict inequality: a potential exactly at threshold is silent."""
    v = np.asarray(v)
    dtype = v.dtype if v.dtype.kind == "f" else np.float64
    return (v > threshold).astype(dtype)


def surrogate_grad(v, slope: "float | SurrogateCfg" = 10.0, threshold: float = V_TH):
    """Fast-sigmoid surrogate derivative ``(slope * |v - threshold| + 1) ** -2``."""
    if isinstance(slope, SurrogateCfg):
        slope = slope.slope
    if not slope > 0:
        raise ParameterError(f"surrogate slope must be positive, got {slope}")
    u = np.subtract(v, threshold)
    if u.ndim == 0:
        return 1.0 / (slope * abs(float(u)) + 1.0) ** 2
    np.abs(u, out=u)
    u *= slope
    u += 1.0
    np.square(u, out=u)
    return np.reciprocal(u, out=u)


def clip_beta(beta):
    """Clamp decay factors into [0, 1]; leaves interior values untouched."""
    if np.isscalar(beta):
        return min(1.0, max(0.0, float(beta)))
    return np.clip(beta, 0.0, 1.0)
