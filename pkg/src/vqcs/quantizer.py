"""Hard quantizers: scalar encode/decode semantics, uniform and Lloyd-Max
scalar quantizer design, and Lloyd (k-means) vector quantizer design.

Scalar quantization regions are right-closed half-open intervals
``R_i = (t_{i-1}, t_i]`` with ``R_1 = (-inf, t_1]`` and ``R_I = (t_{I-1}, inf)``;
indices are 1-based. Vector codebook indices are 0-based.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError, ProtocolError, ShapeError

_CODEBOOK_HEADER = struct.Struct("<QQ")


@dataclass
class ScalarQuantizer:
    thresholds_t: np.ndarray  # sorted, length I-1
    levels_g: np.ndarray      # length I

    def __post_init__(self):
        self.thresholds_t = np.asarray(self.thresholds_t, dtype=np.float64).ravel()
        self.levels_g = np.asarray(self.levels_g, dtype=np.float64).ravel()
        if self.levels_g.size != self.thresholds_t.size + 1:
            raise ConfigurationError("need exactly one more level than thresholds")
        if np.any(np.diff(self.thresholds_t) < 0):
            raise ConfigurationError("thresholds must be nondecreasing")

    @property
    def num_levels(self) -> int:
        return self.levels_g.size


def sq_encode(q: ScalarQuantizer, value: float) -> int:
    """Region index in 1..I of ``value`` (right-closed regions)."""
    if not np.isfinite(value):
        raise DomainError(f"cannot quantize non-finite value {value}")
    return int(np.searchsorted(q.thresholds_t, value, side="left")) + 1


def sq_encode_array(q: ScalarQuantizer, values: np.ndarray) -> np.ndarray:
    """Vectorized sq_encode; returns 1-based indices with values' shape."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise DomainError("cannot quantize non-finite values")
    return np.searchsorted(q.thresholds_t, values, side="left") + 1


def sq_decode(q: ScalarQuantizer, index: int) -> float:
    """Reproduction level for a received 1-based index."""
    if not 1 <= index <= q.num_levels:
        raise ProtocolError(f"index {index} outside 1..{q.num_levels}")
    return float(q.levels_g[index - 1])


def sq_decode_array(q: ScalarQuantizer, indices: np.ndarray) -> np.ndarray:
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 1 or indices.max() > q.num_levels):
        raise ProtocolError(f"indices outside 1..{q.num_levels}")
    return q.levels_g[indices - 1]


def uniform_sq(lo: float, hi: float, levels: int) -> ScalarQuantizer:
    """Equal-width cells over [lo, hi] with midpoint reproduction levels."""
    if lo >= hi:
        raise ConfigurationError(f"need lo < hi, got [{lo}, {hi}]")
    if levels < 1:
        raise ConfigurationError("levels must be >= 1")
    step = (hi - lo) / levels
    thresholds = lo + step * np.arange(1, levels)
    midpoints = lo + step * (np.arange(levels) + 0.5)
    return ScalarQuantizer(thresholds, midpoints)


def _reseed_empty(levels: np.ndarray, counts: np.ndarray,
                  samples: np.ndarray, err: np.ndarray) -> np.ndarray:
    """Move unused levels onto the worst-quantized samples."""
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        worst = np.argsort(err)[-empty.size:]
        levels[empty] = samples[worst]
    return levels


def lloyd_max_sq(samples, levels: int, tol: float = 1e-6,
                 max_iters: int = 500, return_history: bool = False):
    """Scalar Lloyd-Max design on empirical samples.

    Alternates midpoint thresholds and cell-mean levels until the relative
    distortion improvement drops below ``tol``. Empty cells are re-seeded at
    the currently worst-quantized sample. Returns the quantizer, plus the
    per-iteration distortion history when ``return_history`` is set.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if tol <= 0:
        raise ConfigurationError("tol must be positive")
    if samples.size < levels:
        raise ConfigurationError("need at least as many samples as levels")
    xs = np.sort(samples)
    cum = np.concatenate([[0.0], np.cumsum(xs)])
    g = np.quantile(xs, (np.arange(levels) + 0.5) / levels)
    history = []
    prev = np.inf
    for _ in range(max_iters):
        g = np.sort(g)
        t = 0.5 * (g[:-1] + g[1:])
        # right-closed cells: split point = first sample strictly above t_i
        edges = np.concatenate([[0], np.searchsorted(xs, t, side="right"), [xs.size]])
        counts = np.diff(edges)
        sums = np.diff(cum[edges])
        nonempty = counts > 0
        g = np.where(nonempty, sums / np.maximum(counts, 1), g)
        assign = np.searchsorted(t, xs, side="left")
        err = (xs - g[assign]) ** 2
        if not np.all(nonempty):
            g = _reseed_empty(g, counts, xs, err)
            g = np.sort(g)
            t = 0.5 * (g[:-1] + g[1:])
            assign = np.searchsorted(t, xs, side="left")
            err = (xs - g[assign]) ** 2
        dist = float(err.mean())
        history.append(dist)
        if prev - dist < tol * max(prev, 1e-300):
            break
        prev = dist
    q = ScalarQuantizer(0.5 * (g[:-1] + g[1:]), g)
    return (q, history) if return_history else q


@dataclass
class VectorCodebook:
    codewords: np.ndarray  # (size, dim)

    def __post_init__(self):
        self.codewords = np.atleast_2d(np.asarray(self.codewords, dtype=np.float64))
        if not np.all(np.isfinite(self.codewords)):
            raise ConfigurationError("codewords must be finite")

    @property
    def size(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]

    def save(self, path) -> None:
        """size/dimension header then row-major float64 LE codewords."""
        with open(path, "wb") as f:
            f.write(_CODEBOOK_HEADER.pack(self.size, self.dim))
            f.write(np.ascontiguousarray(self.codewords, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "VectorCodebook":
        with open(path, "rb") as f:
            raw = f.read(_CODEBOOK_HEADER.size)
            if len(raw) != _CODEBOOK_HEADER.size:
                raise ProtocolError("codebook file too short for header")
            size, dim = _CODEBOOK_HEADER.unpack(raw)
            body = np.frombuffer(f.read(), dtype="<f8")
        if body.size != size * dim:
            raise ProtocolError("codebook payload size mismatch")
        return cls(body.reshape(size, dim).copy())


def _nearest(samples: np.ndarray, centers: np.ndarray):
    """Chunked nearest-codeword assignment; returns (indices, squared dists)."""
    s_norm = np.einsum("ij,ij->i", samples, samples)
    c_norm = np.einsum("ij,ij->i", centers, centers)
    n = samples.shape[0]
    block = max(1, (1 << 24) // max(centers.shape[0], 1))
    idx = np.empty(n, dtype=np.int64)
    d2 = np.empty(n)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        cross = samples[lo:hi] @ centers.T
        dists = s_norm[lo:hi, None] - 2.0 * cross + c_norm[None, :]
        idx[lo:hi] = np.argmin(dists, axis=1)
        d2[lo:hi] = np.take_along_axis(dists, idx[lo:hi, None], axis=1)[:, 0]
    np.maximum(d2, 0.0, out=d2)
    return idx, d2


def _kmeanspp_seed(samples: np.ndarray, size: int, rng: np.random.Generator):
    centers = np.empty((size, samples.shape[1]))
    centers[0] = samples[rng.integers(samples.shape[0])]
    closest = np.sum((samples - centers[0]) ** 2, axis=1)
    for i in range(1, size):
        total = closest.sum()
        if total <= 0:
            pick = rng.integers(samples.shape[0])
        else:
            pick = rng.choice(samples.shape[0], p=closest / total)
        centers[i] = samples[pick]
        closest = np.minimum(closest, np.sum((samples - centers[i]) ** 2, axis=1))
    return centers


def lloyd_vq(samples, size: int, tol: float = 1e-6,
             rng: np.random.Generator | None = None,
             max_iters: int = 500, return_history: bool = False):
    """k-means codebook design with k-means++ seeding.

    Empty cells are re-seeded at the worst-quantized samples; the empirical
    distortion history is non-increasing.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] < size:
        raise ConfigurationError("need at least as many samples as codewords")
    if rng is None:
        rng = np.random.default_rng(0)
    centers = _kmeanspp_seed(samples, size, rng)
    history = []
    prev = np.inf
    for _ in range(max_iters):
        idx, d2 = _nearest(samples, centers)
        counts = np.bincount(idx, minlength=size)
        new_centers = np.empty_like(centers)
        for j in range(samples.shape[1]):
            sums = np.bincount(idx, weights=samples[:, j], minlength=size)
            new_centers[:, j] = np.where(counts > 0, sums / np.maximum(counts, 1),
                                         centers[:, j])
        centers = _reseed_empty(new_centers, counts, samples, d2)
        _, d2 = _nearest(samples, centers)
        dist = float(d2.mean())
        history.append(dist)
        if prev - dist < tol * max(prev, 1e-300):
            break
        prev = dist
    book = VectorCodebook(centers)
    return (book, history) if return_history else book


def vq_quantize(book: VectorCodebook, v: np.ndarray):
    """Index and codeword of the Euclidean-nearest codeword (ties break to
    the lowest index)."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != book.dim:
        raise ShapeError(f"vector has dim {v.size}, codebook has dim {book.dim}")
    d2 = np.sum((book.codewords - v) ** 2, axis=1)
    idx = int(np.argmin(d2))
    return idx, book.codewords[idx].copy()


def vq_quantize_batch(book: VectorCodebook, vectors: np.ndarray):
    """Nearest-codeword indices and codewords for rows of ``vectors``."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if vectors.shape[1] != book.dim:
        raise ShapeError(
            f"vectors have dim {vectors.shape[1]}, codebook has dim {book.dim}"
        )
    idx, _ = _nearest(vectors, book.codewords)
    return idx, book.codewords[idx]
