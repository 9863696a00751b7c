"""Fully connected feedforward networks, from scratch.

Forward passes cache the weighted inputs and outputs of every layer; the
backward pass applies the transpose/Hadamard recursion

    delta_l = W_{l+1}^T delta_{l+1} * act'_l(z_l)

and yields per-layer weight gradients ``delta_l p_{l-1}^T`` plus the gradient
with respect to the network input (used to chain across the quantization
layer). Everything operates on float64 with a fixed summation order, so
results are bit-deterministic for fixed inputs.

A single vector of shape (d,) or a batch of shape (B, d) may be passed
anywhere; batched backprop returns parameter gradients averaged over the
batch (the per-sample mean used by mini-batch SGD) while the input gradient
stays per-sample.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DivergenceError, ProtocolError, ShapeError

IDENTITY = "identity"
TANH = "tanh"
_ACT_CODES = {IDENTITY: 0, TANH: 1}
_ACT_NAMES = {code: name for name, code in _ACT_CODES.items()}


@dataclass
class FeedforwardNet:
    """Layer widths, weight matrices, bias vectors, and activation tags.

    ``weights[i]`` has shape (widths[i+1], widths[i]); ``activations`` has one
    tag per layer and the input layer is always the identity.
    """

    widths: list
    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ConfigurationError("need at least an input and an output layer")
        if len(self.activations) != len(self.widths):
            raise ConfigurationError("need one activation tag per layer")
        if self.activations[0] != IDENTITY:
            raise ConfigurationError("input layer activation must be identity")
        for tag in self.activations:
            if tag not in _ACT_CODES:
                raise ConfigurationError(f"unknown activation tag {tag!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[i + 1], self.widths[i]):
                raise ConfigurationError(f"weight {i} has shape {w.shape}")
            if b.shape != (self.widths[i + 1],):
                raise ConfigurationError(f"bias {i} has shape {b.shape}")

    @property
    def depth(self) -> int:
        return len(self.widths)

    def copy(self) -> "FeedforwardNet":
        return FeedforwardNet(
            list(self.widths),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )


def init_net(widths, activations, rng: np.random.Generator) -> FeedforwardNet:
    """Weights i.i.d. N(0, 1/fan_in), biases zero."""
    widths = [int(w) for w in widths]
    weights = []
    biases = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return FeedforwardNet(widths, weights, biases, list(activations))


@dataclass
class LayerTrace:
    """Per-layer weighted inputs and activation outputs from one forward pass."""

    weighted_inputs: list
    outputs: list

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1]


def _act(tag: str, c: np.ndarray) -> np.ndarray:
    return np.tanh(c) if tag == TANH else c


def _act_derivative(tag: str, output: np.ndarray) -> np.ndarray:
    # tanh' recovered from the cached activation output as 1 - a^2
    if tag == TANH:
        return 1.0 - output**2
    return np.ones_like(output)


def forward(net: FeedforwardNet, x) -> LayerTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.widths[0]:
        raise ShapeError(f"input width {x.shape[-1]} != layer width {net.widths[0]}")
    weighted_inputs = [x]
    outputs = [x]
    a = x
    for w, b, tag in zip(net.weights, net.biases, net.activations[1:]):
        c = a @ w.T + b
        a = _act(tag, c)
        weighted_inputs.append(c)
        outputs.append(a)
    return LayerTrace(weighted_inputs, outputs)


@dataclass
class GradientSet:
    """Parameter gradients mirroring a net, plus the input gradient."""

    weight_grads: list
    bias_grads: list
    input_grad: np.ndarray

    def arrays(self) -> list:
        return self.weight_grads + self.bias_grads


def backprop(net: FeedforwardNet, trace: LayerTrace, output_grad) -> GradientSet:
    """Gradients of a scalar loss whose gradient at the network output is
    ``output_grad``; batched calls average parameter gradients over rows."""
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != trace.output.shape:
        raise ShapeError("output_grad must match the forward output shape")
    batched = g.ndim == 2
    scale = 1.0 / g.shape[0] if batched else 1.0
    delta = g * _act_derivative(net.activations[-1], trace.outputs[-1])
    weight_grads = [None] * len(net.weights)
    bias_grads = [None] * len(net.biases)
    for i in range(len(net.weights) - 1, -1, -1):
        a_prev = trace.outputs[i]
        if batched:
            weight_grads[i] = scale * (delta.T @ a_prev)
            bias_grads[i] = delta.mean(axis=0)
        else:
            weight_grads[i] = np.outer(delta, a_prev)
            bias_grads[i] = delta.copy()
        prev = delta @ net.weights[i]
        if i > 0:
            delta = prev * _act_derivative(net.activations[i], trace.outputs[i])
    return GradientSet(weight_grads, bias_grads, prev)


@dataclass
class AdamState:
    """Bias-corrected Adam moments for a list of parameter arrays, plus the
    diminishing step-size scale max(eta_min, eta_init/sqrt(t))."""

    first_moments: list
    second_moments: list
    eta_init: float
    eta_min: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_arrays(cls, arrays, eta_init, eta_min, **kwargs) -> "AdamState":
        return cls(
            [np.zeros_like(a) for a in arrays],
            [np.zeros_like(a) for a in arrays],
            eta_init,
            eta_min,
            **kwargs,
        )

    @classmethod
    def for_net(cls, net: FeedforwardNet, eta_init, eta_min, **kwargs) -> "AdamState":
        return cls.for_arrays(net.weights + net.biases, eta_init, eta_min, **kwargs)

    def scale_at(self, t: int) -> float:
        return max(self.eta_min, self.eta_init / np.sqrt(t))


def adam_update_arrays(state: AdamState, params, grads, t: int) -> None:
    """One Adam step applied in place to every array in ``params``."""
    if t < 1:
        raise ConfigurationError("iteration index t must be >= 1")
    if t <= state.step_count:
        raise ConfigurationError("iteration index must increase monotonically")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient entries")
    state.step_count = t
    scale = state.scale_at(t)
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v, g in zip(params, state.first_moments, state.second_moments, grads):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g**2
        p -= scale * (m / c1) / (np.sqrt(v / c2) + eps)


def adam_step(state: AdamState, net: FeedforwardNet, grads: GradientSet, t: int):
    """Adam update of all net weights and biases; mutates in place."""
    adam_update_arrays(state, net.weights + net.biases, grads.arrays(), t)
    return net, state


def write_net_segment(f, net: FeedforwardNet) -> None:
    """Checkpoint segment: depth, widths, activation codes, then row-major
    float64 LE weights and biases per layer."""
    f.write(struct.pack("<Q", net.depth))
    f.write(struct.pack(f"<{net.depth}Q", *net.widths))
    f.write(struct.pack(f"<{net.depth}B", *(_ACT_CODES[a] for a in net.activations)))
    for w, b in zip(net.weights, net.biases):
        f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def read_net_segment(f) -> FeedforwardNet:
    (depth,) = struct.unpack("<Q", f.read(8))
    widths = list(struct.unpack(f"<{depth}Q", f.read(8 * depth)))
    codes = struct.unpack(f"<{depth}B", f.read(depth))
    try:
        activations = [_ACT_NAMES[c] for c in codes]
    except KeyError as exc:
        raise ProtocolError(f"unknown activation code {exc}") from exc
    weights = []
    biases = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(
            np.frombuffer(f.read(8 * fan_out * fan_in), dtype="<f8")
            .reshape(fan_out, fan_in).copy()
        )
        biases.append(np.frombuffer(f.read(8 * fan_out), dtype="<f8").copy())
    return FeedforwardNet(widths, weights, biases, activations)
