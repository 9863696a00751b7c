"""Shared oracles for the trainer and acceptance tests: full-pipeline loss,
its analytic gradients assembled from the public backward passes, and a
central finite-difference comparator."""

import numpy as np

from vqcs.nnet import backprop, forward
from vqcs.shq import shq_backward, shq_forward


def rel_err(a, b, floor=1e-3):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def pipeline_loss(enc, layer, dec, y, x):
    """Squared error of the soft pipeline dec(shq(enc(y))) against x."""
    a = forward(enc, y).output if enc is not None else y
    z = shq_forward(layer, a)
    p = forward(dec, z).output
    return float(np.sum((p - x) ** 2))


def pipeline_grads(enc, layer, dec, y, x, beta_t=1.0):
    """Analytic gradients of pipeline_loss for every parameter group.

    Returns (enc_grads, dec_grads, grad_v, grad_s, xi) with net gradients
    ordered weights-then-biases; xi is the gradient at the quantization-layer
    input (the encoder output when an encoder is present).
    """
    trace_e = forward(enc, y) if enc is not None else None
    a = trace_e.output if enc is not None else y
    z = shq_forward(layer, a)
    trace_d = forward(dec, z)
    grads_d = backprop(dec, trace_d, 2.0 * (trace_d.output - x))
    xi, grad_v, grad_s = shq_backward(layer, a, grads_d.input_grad, beta_t)
    if enc is not None:
        grads_e = backprop(enc, trace_e, xi)
        return grads_e.arrays(), grads_d.arrays(), grad_v, grad_s, xi
    return [], grads_d.arrays(), grad_v, grad_s, xi


def fd_gradient(loss_fn, arr, step=1e-6):
    """Central finite differences of ``loss_fn()`` w.r.t. every entry of
    ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn()
        flat[i] = orig - step
        lo = loss_fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def check_pipeline_gradients(enc, layer, dec, y, x, tol_report=None):
    """Max relative error of every analytic gradient vs finite differences.

    Covers all encoder/decoder weights and biases, the level and shift
    coefficient gradients, and the quantization-layer input gradient at
    blend weight 1.
    """
    enc_grads, dec_grads, grad_v, grad_s, _ = pipeline_grads(
        enc, layer, dec, y, x, beta_t=1.0)

    def loss():
        return pipeline_loss(enc, layer, dec, y, x)

    analytic = list(dec_grads) + [grad_v, grad_s]
    arrays = (dec.weights + dec.biases) + [layer.levels_v, layer.shifts_s]
    if enc is not None:
        analytic = list(enc_grads) + analytic
        arrays = (enc.weights + enc.biases) + arrays
    worst = 0.0
    for a, arr in zip(analytic, arrays):
        worst = max(worst, rel_err(a, fd_gradient(loss, arr)).max())

    # quantizer-input gradient: perturb the encoder output directly
    a_in = forward(enc, y).output.copy() if enc is not None else y.copy()
    _, _, _, _, xi = pipeline_grads(None, layer, dec, a_in, x)
    fd_xi = fd_gradient(lambda: pipeline_loss(None, layer, dec, a_in, x), a_in)
    worst = max(worst, rel_err(xi, fd_xi).max())
    return worst
