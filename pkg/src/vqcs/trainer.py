"""End-to-end training of the encoder-DNN / quantizer / decoder-DNN system.

During training the hard quantizer is replaced by the differentiable
soft-to-hard layer; each iteration runs a mini-batch forward pass, the
squared-error output gradient 2*(p - x), backprop through the decoder,
the blended gradient across the quantization layer, backprop through the
encoder, and Adam updates for all weight/bias groups and the level
coefficients. The steepness and blend schedules advance once per iteration.
Periodically the hard quantizer is rebuilt from the soft layer and the
validation NMSE of the fully hard pipeline is recorded; the returned model
carries the validation-best parameters.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    DivergenceError,
    ProtocolError,
    ShapeError,
    StateError,
)
from .nnet import (
    IDENTITY,
    TANH,
    AdamState,
    FeedforwardNet,
    adam_update_arrays,
    backprop,
    forward,
    init_net,
    read_net_segment,
    write_net_segment,
)
from .quantizer import ScalarQuantizer, sq_decode_array, sq_encode_array
from .shq import (
    AnnealSchedule,
    ShqLayer,
    blend_at,
    build_quantizer,
    shifts_at,
    shq_backward,
    shq_forward,
    steepness_at,
)
from .signal_model import Dataset, nmse_db

_CKPT_MAGIC = b"VQCSCKPT"
_CKPT_VERSION = 1


def default_anneal() -> AnnealSchedule:
    # Reference constants; rescale alpha/beta to the iteration budget so the
    # schedules actually complete (see desk_anneal).
    return AnnealSchedule(h_init=5.0, h_max=300.0, alpha=1e-5, beta=1e-7)


def desk_anneal(max_iters: int, h_max: float = 300.0,
                h_frac: float = 1.0, beta_frac: float = 1.0) -> AnnealSchedule:
    """Linear schedules scaled so h saturates after ``h_frac`` of the run and
    the blend reaches the true gradient after ``beta_frac`` of it.

    Slow proportions matter: a fast blend ramp lets the encoder exploit the
    still-soft quantizer slope, which the hard validation then punishes.
    """
    alpha = (h_max - 5.0) / max(1, int(h_frac * max_iters))
    beta = 1.0 / max(1, int(beta_frac * max_iters))
    return AnnealSchedule(h_init=5.0, h_max=h_max, alpha=alpha, beta=beta)


@dataclass
class TrainConfig:
    """Architecture, quantization resolution, and learning hyperparameters.

    ``enc_widths``/``dec_widths`` default to [M, 5K, K] and
    [K, 4N, 4N, 4N, N]. With ``use_encoder=False`` the measurements feed the
    quantization layer directly (so k_width must equal m_dim); this is the
    decoder-only variant.
    """

    n_dim: int
    m_dim: int
    k_width: int
    num_levels: int
    enc_widths: list | None = None
    dec_widths: list | None = None
    use_encoder: bool = True
    batch_size: int = 100
    max_iters: int = 100_000
    anneal: AnnealSchedule = field(default_factory=default_anneal)
    eta_weights: tuple = (1e-2, 1e-4)
    eta_levels: tuple = (5e-5, 5e-7)
    v_init_total: float = 0.8
    validation_period: int = 1000
    patience_checks: int | None = 20
    patience_min_delta_db: float = 0.05
    learn_shifts: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_levels < 2:
            raise ConfigurationError("need at least 2 quantization levels")
        if not self.use_encoder and self.k_width != self.m_dim:
            raise ConfigurationError(
                "without an encoder net the quantizer width must equal m_dim"
            )
        if self.batch_size < 1 or self.max_iters < 1:
            raise ConfigurationError("batch_size and max_iters must be positive")

    def resolved_enc_widths(self) -> list | None:
        if not self.use_encoder:
            return None
        if self.enc_widths is not None:
            widths = list(self.enc_widths)
            if widths[0] != self.m_dim or widths[-1] != self.k_width:
                raise ConfigurationError("enc_widths must run from m_dim to k_width")
            return widths
        return [self.m_dim, 5 * self.k_width, self.k_width]

    def resolved_dec_widths(self) -> list:
        if self.dec_widths is not None:
            widths = list(self.dec_widths)
            if widths[0] != self.k_width or widths[-1] != self.n_dim:
                raise ConfigurationError("dec_widths must run from k_width to n_dim")
            return widths
        return [self.k_width, 4 * self.n_dim, 4 * self.n_dim, 4 * self.n_dim,
                self.n_dim]


def enc_activations(depth: int) -> list:
    # hidden and output layers of the encoder net are tanh
    return [IDENTITY] + [TANH] * (depth - 1)


def dec_activations(depth: int) -> list:
    # last decoder layer is identity (unbounded source estimates)
    return [IDENTITY] + [TANH] * (depth - 2) + [IDENTITY]


@dataclass
class DeepVqcsModel:
    """Encoder net (optional), soft quantization layer, decoder net, and the
    hard quantizer constructed from the trained soft layer."""

    enc_net: FeedforwardNet | None
    shq: ShqLayer
    dec_net: FeedforwardNet
    hard_q: ScalarQuantizer | None = None

    @property
    def k_width(self) -> int:
        return self.dec_net.widths[0]

    @property
    def n_dim(self) -> int:
        return self.dec_net.widths[-1]

    @property
    def m_dim(self) -> int:
        return self.enc_net.widths[0] if self.enc_net is not None else self.k_width


@dataclass
class TrainRecord:
    iteration: int
    steepness_h: float
    blend_beta: float
    train_cost: float
    val_nmse_db: float
    wall_time_s: float


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    best_iteration: int = 0
    best_val_nmse_db: float = float("inf")
    stop_reason: str = ""


def _encode_decode(model: DeepVqcsModel, a: np.ndarray) -> np.ndarray:
    indices = sq_encode_array(model.hard_q, a)
    return sq_decode_array(model.hard_q, indices)


def hard_estimates(model: DeepVqcsModel, measurements: np.ndarray) -> np.ndarray:
    """Source estimates through the hard pipeline: encoder net, scalar
    encode/decode, decoder net."""
    if model.hard_q is None:
        raise StateError("hard quantizer not populated; train or build it first")
    a = measurements
    if model.enc_net is not None:
        a = forward(model.enc_net, measurements).output
    g = _encode_decode(model, a)
    return forward(model.dec_net, g).output


def validate_hard(model: DeepVqcsModel, data: Dataset) -> float:
    """Validation NMSE (dB) with the hard quantizer in the loop."""
    return nmse_db(hard_estimates(model, data.measurements), data.sources)


def compress(model: DeepVqcsModel, y) -> list:
    """One encoder forward pass and K scalar encodes; returns 1-based
    quantization indices."""
    if model.hard_q is None:
        raise StateError("hard quantizer not populated")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (model.m_dim,):
        raise ShapeError(f"expected measurement of shape ({model.m_dim},)")
    a = forward(model.enc_net, y).output if model.enc_net is not None else y
    return [int(i) for i in sq_encode_array(model.hard_q, a)]


def reconstruct(model: DeepVqcsModel, indices) -> np.ndarray:
    """K scalar decodes and one decoder forward pass."""
    if model.hard_q is None:
        raise StateError("hard quantizer not populated")
    indices = np.asarray(indices)
    if indices.shape != (model.k_width,):
        raise ShapeError(f"expected {model.k_width} indices")
    g = sq_decode_array(model.hard_q, indices)
    return forward(model.dec_net, g).output


def _snapshot(enc, dec, layer):
    return (
        enc.copy() if enc is not None else None,
        dec.copy(),
        layer.levels_v.copy(),
        layer.shifts_s.copy(),
        layer.steepness_h,
    )


def _model_from_snapshot(snap) -> DeepVqcsModel:
    enc, dec, v, s, h = snap
    # jointly permuting (v_i, s_i) leaves the soft forward map unchanged and
    # restores the sorted-shifts invariant after shift learning
    order = np.argsort(s, kind="stable")
    layer = ShqLayer(v[order].copy(), s[order].copy(), h)
    model = DeepVqcsModel(enc, layer, dec)
    model.hard_q = build_quantizer(layer)
    return model


def train(config: TrainConfig, train_set: Dataset, val_set: Dataset):
    """Mini-batch SGD training; returns (model, report) with the
    validation-best parameters restored into the model."""
    if train_set.m_dim != config.m_dim or train_set.n_dim != config.n_dim:
        raise ConfigurationError("training data dimensions disagree with config")
    if config.batch_size > train_set.count:
        raise ConfigurationError("batch size exceeds training set size")
    rng = np.random.default_rng(config.seed)
    enc_widths = config.resolved_enc_widths()
    enc = (init_net(enc_widths, enc_activations(len(enc_widths)), rng)
           if enc_widths is not None else None)
    dec_widths = config.resolved_dec_widths()
    dec = init_net(dec_widths, dec_activations(len(dec_widths)), rng)

    levels = config.num_levels
    v = np.full(levels - 1, config.v_init_total / (levels - 1))
    h1 = steepness_at(config.anneal, 1)
    layer = ShqLayer(v, shifts_at(levels, h1), h1)

    adam_enc = (AdamState.for_net(enc, *config.eta_weights)
                if enc is not None else None)
    adam_dec = AdamState.for_net(dec, *config.eta_weights)
    adam_v = AdamState.for_arrays([layer.levels_v], *config.eta_levels)
    adam_s = (AdamState.for_arrays([layer.shifts_s], *config.eta_levels)
              if config.learn_shifts else None)

    report = TrainReport()
    best_snap = None
    patience_best = float("inf")
    stale_checks = 0
    cost_accum = 0.0
    start = time.perf_counter()

    measurements = train_set.measurements
    sources = train_set.sources
    batch = config.batch_size

    for t in range(1, config.max_iters + 1):
        h_t = steepness_at(config.anneal, t)
        beta_t = blend_at(config.anneal, t)
        layer.steepness_h = h_t
        if not config.learn_shifts:
            layer.shifts_s = shifts_at(levels, h_t)

        idx = rng.integers(0, train_set.count, size=batch)
        y = measurements[idx]
        x = sources[idx]

        trace_e = forward(enc, y) if enc is not None else None
        a_out = trace_e.output if enc is not None else y
        z = shq_forward(layer, a_out)
        trace_d = forward(dec, z)
        err = trace_d.output - x
        cost = float(np.sum(err * err)) / batch
        if not np.isfinite(cost):
            raise DivergenceError(
                f"training cost diverged at iteration {t}",
                model=_model_from_snapshot(best_snap) if best_snap else None,
                report=report,
            )
        cost_accum += cost

        try:
            grads_d = backprop(dec, trace_d, 2.0 * err)
            xi, grad_v, grad_s = shq_backward(layer, a_out, grads_d.input_grad,
                                              beta_t)
            adam_update_arrays(adam_dec, dec.weights + dec.biases,
                               grads_d.arrays(), t)
            adam_update_arrays(adam_v, [layer.levels_v], [grad_v], t)
            np.maximum(layer.levels_v, 0.0, out=layer.levels_v)
            if adam_s is not None:
                adam_update_arrays(adam_s, [layer.shifts_s], [grad_s], t)
            if enc is not None:
                grads_e = backprop(enc, trace_e, xi)
                adam_update_arrays(adam_enc, enc.weights + enc.biases,
                                   grads_e.arrays(), t)
        except DivergenceError as exc:
            raise DivergenceError(
                f"{exc} at iteration {t}",
                model=_model_from_snapshot(best_snap) if best_snap else None,
                report=report,
            ) from exc

        if t % config.validation_period == 0 or t == config.max_iters:
            candidate = DeepVqcsModel(enc, layer, dec, build_quantizer(layer))
            val = validate_hard(candidate, val_set)
            window = t % config.validation_period or config.validation_period
            report.records.append(TrainRecord(
                iteration=t,
                steepness_h=h_t,
                blend_beta=beta_t,
                train_cost=cost_accum / window,
                val_nmse_db=val,
                wall_time_s=time.perf_counter() - start,
            ))
            cost_accum = 0.0
            if val < report.best_val_nmse_db:
                report.best_val_nmse_db = val
                report.best_iteration = t
                best_snap = _snapshot(enc, dec, layer)
            if val < patience_best - config.patience_min_delta_db:
                patience_best = val
                stale_checks = 0
            else:
                stale_checks += 1
                if (config.patience_checks is not None
                        and stale_checks >= config.patience_checks):
                    report.stop_reason = (
                        f"no validation improvement > "
                        f"{config.patience_min_delta_db} dB over "
                        f"{config.patience_checks} checks"
                    )
                    break
    if not report.stop_reason:
        report.stop_reason = "max_iters reached"
    if best_snap is None:
        best_snap = _snapshot(enc, dec, layer)
    return _model_from_snapshot(best_snap), report


def save_checkpoint(path, model: DeepVqcsModel, config: TrainConfig | None = None,
                    iteration: int = 0) -> None:
    """Container with both net segments, the soft-layer segment, the
    constructed quantizer, a JSON config echo, and the iteration count."""
    echo = json.dumps(asdict(config) if config is not None else {}).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", _CKPT_VERSION))
        f.write(struct.pack("<Q", len(echo)))
        f.write(echo)
        f.write(struct.pack("<B", model.enc_net is not None))
        if model.enc_net is not None:
            write_net_segment(f, model.enc_net)
        write_net_segment(f, model.dec_net)
        layer = model.shq
        f.write(struct.pack("<Q", layer.num_levels))
        f.write(np.ascontiguousarray(layer.levels_v, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(layer.shifts_s, dtype="<f8").tobytes())
        f.write(struct.pack("<d", layer.steepness_h))
        f.write(struct.pack("<B", model.hard_q is not None))
        if model.hard_q is not None:
            f.write(np.ascontiguousarray(model.hard_q.thresholds_t,
                                         dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(model.hard_q.levels_g,
                                         dtype="<f8").tobytes())
        f.write(struct.pack("<Q", iteration))


def load_checkpoint(path):
    """Returns (model, config_echo_dict, iteration)."""
    with open(path, "rb") as f:
        if f.read(8) != _CKPT_MAGIC:
            raise ProtocolError("bad checkpoint magic")
        (version,) = struct.unpack("<Q", f.read(8))
        if version != _CKPT_VERSION:
            raise ProtocolError(f"unsupported checkpoint version {version}")
        (echo_len,) = struct.unpack("<Q", f.read(8))
        echo = json.loads(f.read(echo_len).decode()) if echo_len else {}
        (has_enc,) = struct.unpack("<B", f.read(1))
        enc = read_net_segment(f) if has_enc else None
        dec = read_net_segment(f)
        (levels,) = struct.unpack("<Q", f.read(8))
        v = np.frombuffer(f.read(8 * (levels - 1)), dtype="<f8").copy()
        s = np.frombuffer(f.read(8 * (levels - 1)), dtype="<f8").copy()
        (h,) = struct.unpack("<d", f.read(8))
        layer = ShqLayer(v, s, h)
        (has_q,) = struct.unpack("<B", f.read(1))
        hard_q = None
        if has_q:
            t = np.frombuffer(f.read(8 * (levels - 1)), dtype="<f8").copy()
            g = np.frombuffer(f.read(8 * levels), dtype="<f8").copy()
            hard_q = ScalarQuantizer(t, g)
        (iteration,) = struct.unpack("<Q", f.read(8))
    return DeepVqcsModel(enc, layer, dec, hard_q), echo, iteration
