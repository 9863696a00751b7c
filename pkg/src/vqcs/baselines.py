"""Classical quantized-compressed-sensing pipelines.

Compress-and-estimate (CE) methods quantize the raw measurements y, oblivious
to the source, then decode with orthogonal matching pursuit, basis-pursuit
denoising, or a trained decoder net. Estimate-and-compress (EC) forms the
exhaustive MMSE estimate of the source at the encoder and vector-quantizes
that estimate with a Lloyd codebook; it is tractable only at tiny scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from itertools import combinations
from math import comb

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigurationError, ShapeError
from .quantizer import (
    VectorCodebook,
    lloyd_max_sq,
    lloyd_vq,
    sq_decode_array,
    sq_encode_array,
    uniform_sq,
    vq_quantize_batch,
)
from .signal_model import Dataset, MeasurementModel, nmse_db, rate_bits
from . import trainer as _trainer

UNIFORM_SQ = "uniform_sq"
LLOYD_SQ = "lloyd_sq"
LLOYD_VQ = "lloyd_vq"
OMP_DECODER = "omp"
BPDN_DECODER = "bpdn"
DECNET_DECODER = "decnet"

MMSE_SUPPORT_GUARD = 100_000


def omp(phi: np.ndarray, y_tilde: np.ndarray, sparsity: int) -> np.ndarray:
    """Orthogonal matching pursuit with known sparsity.

    Runs exactly ``sparsity`` greedy rounds; each round selects the atom with
    the largest absolute correlation to the residual and re-fits least
    squares on the selected support. A rank-deficient support matrix falls
    back to a 1e-12 ridge solve (with a warning).
    """
    phi = np.asarray(phi, dtype=np.float64)
    y_tilde = np.asarray(y_tilde, dtype=np.float64).ravel()
    m, n = phi.shape
    if y_tilde.size != m:
        raise ShapeError(f"measurement has length {y_tilde.size}, expected {m}")
    if not 1 <= sparsity <= m:
        raise ConfigurationError(f"need 1 <= sparsity <= {m}, got {sparsity}")
    support: list = []
    residual = y_tilde
    coef = np.zeros(0)
    for _ in range(sparsity):
        corr = phi.T @ residual
        corr[support] = 0.0
        support.append(int(np.argmax(np.abs(corr))))
        sub = phi[:, support]
        coef, _, rank, _ = np.linalg.lstsq(sub, y_tilde, rcond=None)
        if rank < len(support):
            warnings.warn("rank-deficient OMP support; using 1e-12 ridge")
            gram = sub.T @ sub + 1e-12 * np.eye(len(support))
            coef = np.linalg.solve(gram, sub.T @ y_tilde)
        residual = y_tilde - sub @ coef
    x = np.zeros(n)
    x[support] = coef
    return x


def omp_batch(phi: np.ndarray, measurements: np.ndarray, sparsity: int) -> np.ndarray:
    """OMP applied row-wise; returns an (n_samples, N) array of estimates."""
    measurements = np.atleast_2d(measurements)
    return np.stack([omp(phi, row, sparsity) for row in measurements])


@dataclass
class BpdnProblem:
    """min ||x||_1  s.t.  ||y_tilde - phi x||_2 <= epsilon."""

    phi: np.ndarray
    y_tilde: np.ndarray
    epsilon: float

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be nonnegative")


def _soft_threshold(x: np.ndarray, thr) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)


def _fista(phi, y_cols, lam, x0, max_inner, ftol=1e-11):
    """Monotone FISTA on f(x) = lam*||x||_1 + ||y - phi x||^2, columnwise.

    ``y_cols`` is (M, B), ``lam`` is (B,), ``x0`` is (N, B). Keeps the
    objective non-increasing by falling back to the previous iterate whenever
    the accelerated step would increase it, restarting the momentum there.
    Columns whose accepted step changes the objective by less than ``ftol``
    (relative) are frozen and dropped from further iterations.
    Returns (x, objective, converged_mask).
    """
    lip = 2.0 * np.linalg.norm(phi, 2) ** 2
    step = 1.0 / lip
    batch = x0.shape[1]

    def objective(xs, ys, lams):
        r = ys - phi @ xs
        return lams * np.abs(xs).sum(axis=0) + np.einsum("ij,ij->j", r, r)

    x_out = x0.copy()
    f_out = objective(x_out, y_cols, lam)
    conv_out = np.zeros(batch, dtype=bool)
    live = np.arange(batch)
    x = x_out.copy()
    fx = f_out.copy()
    ys = y_cols
    lams = lam
    z = x.copy()
    t_acc = 1.0
    for _ in range(max_inner):
        grad = 2.0 * (phi.T @ (phi @ z - ys))
        cand = _soft_threshold(z - step * grad, step * lams)
        f_cand = objective(cand, ys, lams)
        accept = f_cand <= fx
        x_new = np.where(accept, cand, x)
        f_new = np.where(accept, f_cand, fx)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_acc**2))
        z = x_new + (t_acc / t_new) * (cand - x_new) \
            + ((t_acc - 1.0) / t_new) * (x_new - x)
        # a rejected momentum step is a restart, not convergence
        done = accept & (fx - f_new <= ftol * np.maximum(fx, 1e-300))
        x, fx, t_acc = x_new, f_new, t_new
        if done.any():
            sel = live[done]
            x_out[:, sel] = x[:, done]
            f_out[sel] = fx[done]
            conv_out[sel] = True
            if done.all():
                live = live[:0]
                break
            keep = ~done
            live = live[keep]
            x = x[:, keep]
            fx = fx[keep]
            z = z[:, keep]
            ys = ys[:, keep]
            lams = lams[keep]
    if live.size:
        x_out[:, live] = x
        f_out[live] = fx
    return x_out, f_out, conv_out


def bpdn_batch(phi, y_rows, epsilon, residual_rtol=0.01,
               max_inner=10_000, max_outer=60) -> np.ndarray:
    """Solve the quadratically constrained basis-pursuit problem for every
    row of ``y_rows`` via the penalized form, adjusting the l1 weight until
    each residual norm is within ``residual_rtol`` of min(epsilon, ||y||).

    The weight search exploits that the residual is nondecreasing and
    locally near-linear in the weight: each step rescales lambda by the
    (clipped) target/residual ratio, with warm-started inner solves. An
    infeasibly small epsilon (below the attainable residual) produces a
    tolerance-miss warning and returns the best iterate.
    """
    phi = np.asarray(phi, dtype=np.float64)
    y_cols = np.atleast_2d(np.asarray(y_rows, dtype=np.float64)).T
    m, n = phi.shape
    batch = y_cols.shape[1]
    eps = np.broadcast_to(np.asarray(epsilon, dtype=np.float64), (batch,)).copy()
    y_norm = np.linalg.norm(y_cols, axis=0)
    target = np.minimum(eps, y_norm)
    x = np.zeros((n, batch))
    # columns already feasible at x = 0 stay there
    active = np.flatnonzero(y_norm > eps)
    if active.size == 0:
        return x.T

    ya = y_cols[:, active]
    tgt = target[active]
    # lambda >= 2*||phi^T y||_inf yields x = 0 with residual ||y||; walking
    # lambda down from there by at most 10x per step keeps each warm start on
    # the sparse regularization path (continuation), which plain jumps to a
    # tiny lambda would not
    lam_hi = 2.0 * np.abs(phi.T @ ya).max(axis=0) + 1e-300
    lam_min = lam_hi * 1e-16
    lam = lam_hi.copy()
    xa = np.zeros((n, active.size))
    best_x = xa.copy()
    best_gap = np.full(active.size, np.inf)
    all_converged = True
    tol = residual_rtol * np.maximum(tgt, 1e-300)
    live = np.arange(active.size)
    for _ in range(max_outer):
        xs, _, conv = _fista(phi, ya[:, live], lam[live], xa[:, live], max_inner)
        all_converged &= bool(conv.all())
        xa[:, live] = xs
        resid = np.linalg.norm(ya[:, live] - phi @ xs, axis=0)
        gap = np.abs(resid - tgt[live])
        better = gap < best_gap[live]
        sel = live[better]
        best_gap[sel] = gap[better]
        best_x[:, sel] = xs[:, better]
        ratio = np.clip(tgt[live] / np.maximum(resid, 1e-300), 0.1, 10.0)
        lam[live] = np.clip(lam[live] * ratio, lam_min[live], lam_hi[live])
        live = live[gap > tol[live]]
        if live.size == 0:
            break
    if not all_converged:
        warnings.warn("FISTA hit the inner iteration cap; keeping best iterate")
    missed = best_gap > tol
    if missed.any():
        warnings.warn(
            f"{int(missed.sum())} BPDN problem(s) missed the residual target "
            "(epsilon may be below the attainable residual)"
        )
    x[:, active] = best_x
    return x.T


def bpdn(problem: BpdnProblem, residual_rtol=0.01, max_inner=10_000) -> np.ndarray:
    """Single-problem wrapper around :func:`bpdn_batch`."""
    out = bpdn_batch(problem.phi, problem.y_tilde[None, :], problem.epsilon,
                     residual_rtol=residual_rtol, max_inner=max_inner)
    return out[0]


def mmse_batch(model: MeasurementModel, measurements: np.ndarray,
               sparsity: int) -> np.ndarray:
    """Exhaustive posterior-mean estimates, one per row of ``measurements``.

    Mixes the per-support Gaussian posteriors of a source with exactly
    ``sparsity`` unit-variance nonzeros on a uniformly distributed support,
    with evidence weights computed in the log domain.
    """
    n, m = model.n_dim, model.m_dim
    n_supports = comb(n, sparsity)
    if n_supports > MMSE_SUPPORT_GUARD:
        raise ConfigurationError(
            f"C({n},{sparsity}) = {n_supports} supports exceeds the "
            f"{MMSE_SUPPORT_GUARD} guard; exhaustive MMSE is intractable here"
        )
    if model.noise_variance <= 0:
        raise ConfigurationError("exhaustive MMSE needs a positive noise variance")
    y_all = np.atleast_2d(np.asarray(measurements, dtype=np.float64))
    supports = list(combinations(range(n), sparsity))
    eye_m = np.eye(m)
    factors = []
    for sup in supports:
        phi_t = model.phi[:, sup]
        cov = phi_t @ phi_t.T + model.noise_variance * eye_m
        chol = cho_factor(cov, lower=True)
        logdet = 2.0 * np.log(np.diag(chol[0])).sum()
        factors.append((phi_t, chol, logdet))
    estimates = np.zeros((y_all.shape[0], n))
    chunk = max(1, int(1e7) // max(n_supports, 1))
    for lo in range(0, y_all.shape[0], chunk):
        y_cols = y_all[lo:lo + chunk].T
        n_samples = y_cols.shape[1]
        log_w = np.empty((n_supports, n_samples))
        means = np.empty((n_supports, sparsity, n_samples))
        for i, (phi_t, chol, logdet) in enumerate(factors):
            solved = cho_solve(chol, y_cols)
            log_w[i] = -0.5 * (np.einsum("ij,ij->j", y_cols, solved) + logdet)
            means[i] = phi_t.T @ solved
        log_w -= log_w.max(axis=0, keepdims=True)
        weights = np.exp(log_w)
        weights /= weights.sum(axis=0, keepdims=True)
        out = estimates[lo:lo + chunk]
        for i, sup in enumerate(supports):
            out[:, sup] += (weights[i] * means[i]).T
    return estimates


def mmse_exhaustive(model: MeasurementModel, y: np.ndarray,
                    sparsity: int) -> np.ndarray:
    """Posterior-mean estimate of the source from one measurement vector."""
    return mmse_batch(model, np.asarray(y, dtype=np.float64)[None, :], sparsity)[0]


def mu_qc_rule(noise_variance: float, levels: int) -> float:
    """Residual budget sqrt(sigma_n)*(1 + 1/I) for the basis-pursuit decoder,
    where sigma_n is the noise standard deviation."""
    return np.sqrt(np.sqrt(noise_variance)) * (1.0 + 1.0 / levels)


@dataclass
class CePipelineSpec:
    """Compress-and-estimate pipeline: measurement quantizer plus decoder.

    ``levels`` is the per-coordinate resolution for scalar quantizers;
    ``codebook_bits`` sets the whole-vector codebook size for the VQ variant.
    ``mu_qc`` overrides the default residual budget; ``usq_range`` pins the
    uniform quantizer range instead of the +-4 sigma estimate. ``mu_sweep``
    enables the genie-aided variant: decode at every value and keep the
    per-sample minimum-MSE solution (requires the true sources).
    """

    quantizer_kind: str
    decoder_kind: str
    levels: int = 2
    codebook_bits: int | None = None
    mu_qc: float | None = None
    usq_range: tuple | None = None
    vq_train_limit: int | None = None
    mu_sweep: list | None = None
    train_config: "_trainer.TrainConfig | None" = None
    seed: int = 0

    def __post_init__(self):
        if self.quantizer_kind not in (UNIFORM_SQ, LLOYD_SQ, LLOYD_VQ):
            raise ConfigurationError(f"unknown quantizer {self.quantizer_kind!r}")
        if self.decoder_kind not in (OMP_DECODER, BPDN_DECODER, DECNET_DECODER):
            raise ConfigurationError(f"unknown decoder {self.decoder_kind!r}")
        if self.quantizer_kind == LLOYD_VQ and self.codebook_bits is None:
            raise ConfigurationError("lloyd_vq needs codebook_bits")


def design_scalar_quantizers(spec: CePipelineSpec, train: Dataset) -> list:
    """One quantizer per measurement coordinate, fit on the training split."""
    quantizers = []
    for j in range(train.m_dim):
        col = train.measurements[:, j]
        if spec.quantizer_kind == UNIFORM_SQ:
            if spec.usq_range is not None:
                lo, hi = spec.usq_range
            else:
                mu, sd = col.mean(), col.std()
                lo, hi = mu - 4.0 * sd, mu + 4.0 * sd
            quantizers.append(uniform_sq(lo, hi, spec.levels))
        else:
            quantizers.append(lloyd_max_sq(col, spec.levels))
    return quantizers


def quantize_rows(quantizers: list, measurements: np.ndarray) -> np.ndarray:
    """Coordinate-wise quantize-dequantize of measurement rows."""
    out = np.empty_like(measurements)
    for j, q in enumerate(quantizers):
        out[:, j] = sq_decode_array(q, sq_encode_array(q, measurements[:, j]))
    return out


def _ce_effective_levels(spec: CePipelineSpec) -> int:
    if spec.quantizer_kind == LLOYD_VQ:
        return 2**spec.codebook_bits
    return spec.levels


def _decode_ce(spec: CePipelineSpec, model: MeasurementModel,
               y_tilde: np.ndarray, test: Dataset) -> np.ndarray:
    mu = spec.mu_qc
    if mu is None:
        mu = mu_qc_rule(model.noise_variance, _ce_effective_levels(spec))
    if spec.decoder_kind == OMP_DECODER:
        return omp_batch(model.phi, y_tilde, test.sparsity)
    if spec.mu_sweep is not None:
        best = None
        best_err = np.full(test.count, np.inf)
        for mu_try in spec.mu_sweep:
            est = bpdn_batch(model.phi, y_tilde, mu_try)
            err = np.sum((est - test.sources) ** 2, axis=1)
            if best is None:
                best, best_err = est, err
            else:
                better = err < best_err
                best[better] = est[better]
                best_err = np.minimum(best_err, err)
        return best
    return bpdn_batch(model.phi, y_tilde, mu)


def run_ce_baseline(spec: CePipelineSpec, model: MeasurementModel,
                    test: Dataset, train: Dataset):
    """Design the measurement quantizer on the training split, quantize the
    test measurements, decode, and report (rate, NMSE dB)."""
    if spec.decoder_kind == DECNET_DECODER:
        return run_ce_decnet(spec, model, test, train)
    if spec.quantizer_kind == LLOYD_VQ:
        limit = spec.vq_train_limit or train.count
        rng = np.random.default_rng(spec.seed)
        book = lloyd_vq(train.measurements[:limit], 2**spec.codebook_bits, rng=rng)
        _, y_tilde = vq_quantize_batch(book, test.measurements)
        rate = spec.codebook_bits / model.n_dim
    else:
        quantizers = design_scalar_quantizers(spec, train)
        y_tilde = quantize_rows(quantizers, test.measurements)
        rate = rate_bits(model.m_dim, spec.levels, model.n_dim)
    estimates = _decode_ce(spec, model, y_tilde, test)
    return rate, nmse_db(estimates, test.sources)


def run_ce_decnet(spec: CePipelineSpec, model: MeasurementModel,
                  test: Dataset, train: Dataset):
    """Decoder-net CE variant: the quantizer and decoder net are trained
    jointly on the measurements (no encoder net), then evaluated hard."""
    if spec.train_config is None:
        raise ConfigurationError("decnet decoding needs train_config")
    config = replace(spec.train_config, use_encoder=False,
                     k_width=model.m_dim, num_levels=spec.levels)
    val_count = max(1, train.count // 10)
    train_part = Dataset(train.sources[:-val_count],
                         train.measurements[:-val_count],
                         train.seed, train.sparsity, train.noise_variance)
    val_part = Dataset(train.sources[-val_count:],
                       train.measurements[-val_count:],
                       train.seed, train.sparsity, train.noise_variance)
    trained, _ = _trainer.train(config, train_part, val_part)
    rate = rate_bits(model.m_dim, spec.levels, model.n_dim)
    return rate, _trainer.validate_hard(trained, test)


def run_ec_vq(model: MeasurementModel, train: Dataset, test: Dataset,
              codebook_bits: int, vq_train_limit: int | None = None,
              rng: np.random.Generator | None = None, vq_tol: float = 1e-6):
    """Estimate-and-compress: exhaustive MMSE estimates at the encoder,
    Lloyd-VQ codebook fit on the training estimates, rate = bits/N."""
    if codebook_bits < 0:
        raise ConfigurationError("codebook_bits must be nonnegative")
    limit = vq_train_limit or train.count
    est_train = mmse_batch(model, train.measurements[:limit], train.sparsity)
    if codebook_bits == 0:
        book = VectorCodebook(est_train.mean(axis=0)[None, :])
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        book = lloyd_vq(est_train, 2**codebook_bits, rng=rng, tol=vq_tol)
    est_test = mmse_batch(model, test.measurements, test.sparsity)
    _, quantized = vq_quantize_batch(book, est_test)
    rate = codebook_bits / model.n_dim
    return rate, nmse_db(quantized, test.sources)
