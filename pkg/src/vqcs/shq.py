"""Soft-to-hard quantization: a differentiable stand-in for an I-level
scalar quantizer.

The forward map is a weighted sum of shifted hyperbolic tangents,

    q(a) = sum_i v_i * tanh(h*a - s_i),

whose steepness h is annealed upward during training until the map is an
arbitrarily sharp staircase. The backward pass blends the true elementwise
derivative with a saturation-aware straight-through pass (weight beta vs
1-beta), and exposes the analytic gradients for the level coefficients v and
shift coefficients s. After training, the staircase's plateaus and step
locations define a hard ScalarQuantizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError
from .quantizer import ScalarQuantizer

LINEAR = "linear"
STAIRCASE = "staircase"


@dataclass
class ShqLayer:
    """Level coefficients v (nonnegative), shift coefficients s (sorted
    ascending), and the steepness hyperparameter h; represents I =
    len(v) + 1 quantization levels."""

    levels_v: np.ndarray
    shifts_s: np.ndarray
    steepness_h: float

    def __post_init__(self):
        self.levels_v = np.asarray(self.levels_v, dtype=np.float64).ravel()
        self.shifts_s = np.asarray(self.shifts_s, dtype=np.float64).ravel()
        if self.levels_v.size != self.shifts_s.size or self.levels_v.size < 1:
            raise ConfigurationError("need I-1 >= 1 level and shift coefficients")
        if np.any(self.levels_v < 0):
            raise ConfigurationError("level coefficients must be nonnegative")
        if np.any(np.diff(self.shifts_s) < 0):
            raise ConfigurationError("shift coefficients must be sorted ascending")
        if not self.steepness_h > 0:
            raise ConfigurationError("steepness must be positive")

    @property
    def num_levels(self) -> int:
        return self.levels_v.size + 1


def shq_forward(layer: ShqLayer, a) -> np.ndarray:
    """Elementwise soft quantization of ``a`` (any shape)."""
    a = np.asarray(a, dtype=np.float64)
    u = layer.steepness_h * a[..., None] - layer.shifts_s
    return np.tanh(u) @ layer.levels_v


def shq_backward(layer: ShqLayer, a, delta1, beta_t: float):
    """Backward pass through the soft quantizer.

    Parameters
    ----------
    a : array
        Layer input (the encoder output), shape (K,) or (B, K).
    delta1 : array
        Upstream gradient at the layer output, same shape as ``a``.
    beta_t : float in [0, 1]
        Blend weight: 0 uses the saturation-aware straight-through pass,
        1 uses the true elementwise derivative.

    Returns
    -------
    xi : array
        Gradient with respect to ``a``, same shape.
    grad_v, grad_s : arrays of shape (I-1,)
        Gradients for the level and shift coefficients; for batched input
        these are averaged over the batch.
    """
    if not 0.0 <= beta_t <= 1.0:
        raise ConfigurationError(f"beta_t must lie in [0, 1], got {beta_t}")
    a = np.asarray(a, dtype=np.float64)
    delta1 = np.asarray(delta1, dtype=np.float64)
    if a.shape != delta1.shape:
        raise ShapeError("a and delta1 must have the same shape")
    h = layer.steepness_h
    v = layer.levels_v
    u = h * a[..., None] - layer.shifts_s
    th = np.tanh(u)
    sech2 = 1.0 - th**2  # stable at large |u| where cosh overflows
    true_term = delta1 * (sech2 @ (h * v))
    saturated = np.abs(a) <= v.sum()
    xi = (1.0 - beta_t) * (delta1 * saturated) + beta_t * true_term
    if a.ndim == 2:
        batch = a.shape[0]
        grad_v = np.einsum("bk,bki->i", delta1, th) / batch
        grad_s = -v * (np.einsum("bk,bki->i", delta1, sech2) / batch)
    else:
        grad_v = delta1 @ th
        grad_s = -v * (delta1 @ sech2)
    return xi, grad_v, grad_s


@dataclass
class AnnealSchedule:
    """Steepness and gradient-blend schedules.

    h(t) = min(h_init + increment(t), h_max) with a linear increment
    alpha*t by default, or alpha*ceil(t/100) in staircase mode;
    beta(t) = min(beta*t, 1).
    """

    h_init: float
    h_max: float
    alpha: float
    beta: float
    alpha_mode: str = LINEAR

    def __post_init__(self):
        if self.h_init > self.h_max:
            raise ConfigurationError("h_init must not exceed h_max")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be nonnegative")
        if self.alpha_mode not in (LINEAR, STAIRCASE):
            raise ConfigurationError(f"unknown alpha_mode {self.alpha_mode!r}")


def steepness_at(sched: AnnealSchedule, t: int) -> float:
    if sched.alpha_mode == STAIRCASE:
        increment = sched.alpha * math.ceil(t / 100)
    else:
        increment = sched.alpha * t
    return min(sched.h_init + increment, sched.h_max)


def blend_at(sched: AnnealSchedule, t: int) -> float:
    return min(sched.beta * t, 1.0)


def shifts_at(num_levels: int, h_t: float) -> np.ndarray:
    """Shift coefficients that keep the quantizer thresholds s_i/h fixed as
    h grows: 0 for a 2-level quantizer, h_t * [-0.8 .. 0.8] otherwise."""
    if num_levels < 2:
        raise ConfigurationError("need at least 2 quantization levels")
    if num_levels == 2:
        return np.zeros(1)
    return h_t * np.linspace(-0.8, 0.8, num_levels - 1)


def build_quantizer(layer: ShqLayer) -> ScalarQuantizer:
    """Hard quantizer whose levels are the soft staircase's saturation
    plateaus and whose thresholds sit at the step locations s_i/h.

    The (level, shift) pairs are ordered by shift first; the plateau below
    every threshold then grows by 2*v_i as each term saturates, so the
    reproduction levels are the suffix sums of the pair-ordered level
    coefficients. Sorting v independently of s would scramble the plateaus
    whenever v is not ascending.
    """
    if not layer.steepness_h > 0:
        raise ConfigurationError("steepness must be positive")
    order = np.argsort(layer.shifts_s, kind="stable")
    v = layer.levels_v[order]
    s = layer.shifts_s[order]
    total = v.sum()
    suffix = np.cumsum(v[::-1])[::-1]
    levels = np.empty(v.size + 1)
    levels[0] = -total
    levels[-1] = total
    levels[1:-1] = total - 2.0 * suffix[1:]
    return ScalarQuantizer(s / layer.steepness_h, levels)
