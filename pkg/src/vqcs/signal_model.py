"""Sparse sources, compressive measurements, paired datasets, and metrics.

The sensing model is ``y = phi @ x + n`` with an S-sparse source x whose
nonzero entries are standard normal, a fixed measurement matrix phi built
from the first M rows of an orthonormal DCT-II basis (columns rescaled to
unit norm), and i.i.d. Gaussian measurement noise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .errors import ConfigurationError, DomainError, ProtocolError

# Sentinel reported when the reconstruction error is exactly zero, so that
# result tables stay numeric instead of holding -inf.
PERFECT_NMSE_DB = -1e9

_DATASET_MAGIC = b"VQCSDATA"
_DATASET_VERSION = 1
_HEADER = struct.Struct("<8sQQQQdQQ")


def make_measurement_matrix(n_dim: int, m_dim: int) -> np.ndarray:
    """First ``m_dim`` rows of the n x n orthonormal DCT-II matrix, with
    every column rescaled to unit Euclidean norm.

    Deterministic; raises ConfigurationError on dimension violations.
    """
    if not (1 <= m_dim <= n_dim):
        raise ConfigurationError(
            f"need 1 <= m_dim <= n_dim, got m_dim={m_dim}, n_dim={n_dim}"
        )
    basis = dct(np.eye(n_dim), axis=0, norm="ortho")
    phi = basis[:m_dim].copy()
    phi /= np.linalg.norm(phi, axis=0, keepdims=True)
    return phi


@dataclass
class MeasurementModel:
    """Fixed sensing operator plus the measurement-noise variance."""

    phi: np.ndarray
    noise_variance: float

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.phi.ndim != 2:
            raise ConfigurationError("phi must be a 2-D matrix")
        if self.m_dim > self.n_dim:
            raise ConfigurationError("phi must have m_dim <= n_dim")
        if self.noise_variance < 0:
            raise ConfigurationError("noise_variance must be non-negative")

    @property
    def m_dim(self) -> int:
        return self.phi.shape[0]

    @property
    def n_dim(self) -> int:
        return self.phi.shape[1]

    @classmethod
    def dct(cls, n_dim: int, m_dim: int, noise_variance: float) -> "MeasurementModel":
        return cls(make_measurement_matrix(n_dim, m_dim), noise_variance)


@dataclass
class SparseSourceSpec:
    """Distribution of the source: exactly ``sparsity`` nonzeros on a
    uniformly random support, values i.i.d. N(0, nonzero_variance).

    With ``exact_sparsity=False`` the support size is drawn uniformly from
    {0, ..., sparsity} first (an "at most S nonzeros" source).
    """

    n_dim: int
    sparsity: int
    nonzero_variance: float = 1.0
    exact_sparsity: bool = True

    def __post_init__(self):
        if not (0 <= self.sparsity <= self.n_dim):
            raise ConfigurationError(
                f"need 0 <= sparsity <= n_dim, got S={self.sparsity}, N={self.n_dim}"
            )
        if self.nonzero_variance <= 0:
            raise ConfigurationError("nonzero_variance must be positive")


def sample_source(spec: SparseSourceSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one source vector from ``spec`` using ``rng``."""
    s = spec.sparsity
    if not spec.exact_sparsity:
        s = int(rng.integers(0, spec.sparsity + 1))
    x = np.zeros(spec.n_dim)
    if s > 0:
        support = rng.choice(spec.n_dim, size=s, replace=False)
        x[support] = np.sqrt(spec.nonzero_variance) * rng.standard_normal(s)
    return x


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based per-sample stream: independent of how many samples are
    drawn and in which order."""
    key = np.array([seed % 2**64, index % 2**64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class Dataset:
    """Paired (source, measurement) samples with their generating metadata."""

    sources: np.ndarray       # (count, N)
    measurements: np.ndarray  # (count, M)
    seed: int
    sparsity: int
    noise_variance: float

    def __post_init__(self):
        self.sources = np.asarray(self.sources, dtype=np.float64)
        self.measurements = np.asarray(self.measurements, dtype=np.float64)
        if self.sources.shape[0] != self.measurements.shape[0]:
            raise ConfigurationError("sources and measurements must pair up")

    @property
    def count(self) -> int:
        return self.sources.shape[0]

    @property
    def n_dim(self) -> int:
        return self.sources.shape[1]

    @property
    def m_dim(self) -> int:
        return self.measurements.shape[1]

    def save(self, path) -> None:
        """Binary container: fixed header then row-major float64 LE payload
        (sources first, measurements second)."""
        header = _HEADER.pack(
            _DATASET_MAGIC,
            _DATASET_VERSION,
            self.n_dim,
            self.m_dim,
            self.sparsity,
            self.noise_variance,
            self.count,
            self.seed % 2**64,
        )
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(self.sources, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(self.measurements, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path, "rb") as f:
            raw = f.read(_HEADER.size)
            if len(raw) != _HEADER.size:
                raise ProtocolError("dataset file too short for header")
            magic, version, n, m, s, noise_var, count, seed = _HEADER.unpack(raw)
            if magic != _DATASET_MAGIC:
                raise ProtocolError(f"bad dataset magic {magic!r}")
            if version != _DATASET_VERSION:
                raise ProtocolError(f"unsupported dataset version {version}")
            body = np.frombuffer(f.read(), dtype="<f8")
        expected = count * (n + m)
        if body.size != expected:
            raise ProtocolError(
                f"dataset payload has {body.size} floats, expected {expected}"
            )
        sources = body[: count * n].reshape(count, n).copy()
        measurements = body[count * n:].reshape(count, m).copy()
        return cls(sources, measurements, seed, s, noise_var)


def sample_dataset(
    model: MeasurementModel,
    spec: SparseSourceSpec,
    count: int,
    seed: int,
) -> Dataset:
    """Generate ``count`` paired samples, bit-reproducible for a given seed.

    Sample k is drawn entirely from its own counter-based substream keyed by
    (seed, k), so the result is independent of generation order and a prefix
    of a larger dataset with the same seed is identical sample-for-sample.
    """
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    if model.n_dim != spec.n_dim:
        raise ConfigurationError("model and source spec disagree on N")
    sigma = np.sqrt(model.noise_variance)
    sources = np.empty((count, model.n_dim))
    measurements = np.empty((count, model.m_dim))
    for k in range(count):
        rng = sample_rng(seed, k)
        x = sample_source(spec, rng)
        noise = sigma * rng.standard_normal(model.m_dim)
        sources[k] = x
        measurements[k] = model.phi @ x + noise
    return Dataset(sources, measurements, seed, spec.sparsity, model.noise_variance)


def nmse_db(estimates: np.ndarray, truths: np.ndarray) -> float:
    """Normalized MSE in dB: 10*log10(sum ||x - xhat||^2 / sum ||x||^2).

    Exact reconstruction returns the PERFECT_NMSE_DB sentinel (-1e9).
    """
    estimates = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if estimates.shape != truths.shape or truths.size == 0:
        raise ConfigurationError("estimates and truths must be nonempty and paired")
    denom = float(np.sum(truths**2))
    if denom == 0.0:
        raise DomainError("NMSE undefined: all truth vectors are zero")
    num = float(np.sum((truths - estimates) ** 2))
    if num == 0.0:
        return PERFECT_NMSE_DB
    return 10.0 * np.log10(num / denom)


def rate_bits(k_width: int, levels: int, n_dim: int) -> float:
    """Rate in bits per source entry: K * ceil(log2 I) / N under
    independent fixed-length coding of the K quantization indices."""
    if k_width < 1 or levels < 1:
        raise ConfigurationError("k_width and levels must be >= 1")
    return k_width * (levels - 1).bit_length() / n_dim
