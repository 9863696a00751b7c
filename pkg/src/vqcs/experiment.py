"""Configuration-driven experiment runner.

Reads a flat dotted-key config file, generates shared datasets, runs every
enabled method at every requested rate point, and writes one CSV row per
(method, rate) with the NMSE and online-phase timings. Rates are accounted
identically for all methods: K*ceil(log2 I)/N for scalar-quantizer methods
and codebook_bits/N for whole-vector codebooks.

Config schema (values after ``=``; ``#`` starts a comment line)::

    signal.n = 20          # source length N
    signal.m = 10          # measurements M
    signal.s = 2           # sparsity S
    signal.noise_var = 1e-4
    data.train = 100000    # split sizes
    data.val = 10000
    data.test = 10000
    data.seed = 7          # split seeds are seed, seed+1, seed+2
    sweep.rates = 1.0, 2.5
    methods = deep-vqcs, ce-usq-omp, ce-usq-l1
    bench.repeats = 0      # online timing repetitions (0 skips timing)
    out.csv = results.csv
    out.ckpt_dir = .       # where trained checkpoints land

    method.deep-vqcs.k = 10
    method.deep-vqcs.max_iters = 200000
    method.deep-vqcs.batch = 100
    method.deep-vqcs.h_max = 300
    method.deep-vqcs.patience = off

Known methods: deep-vqcs, ce-usq-omp, ce-usq-l1, ce-lloyd-l1, ce-vq-l1,
ce-decnet, ec-vq.
"""

from __future__ import annotations

import csv
import statistics
import time
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import trainer as tr
from .errors import ConfigurationError
from .quantizer import lloyd_vq, sq_encode, vq_quantize
from .signal_model import MeasurementModel, SparseSourceSpec, sample_dataset

CSV_COLUMNS = [
    "method", "n", "m", "s", "rate", "nmse_db",
    "encode_time_s", "decode_time_s", "total_time_s", "seed", "checkpoint",
]

DEEP_VQCS = "deep-vqcs"
CE_USQ_OMP = "ce-usq-omp"
CE_USQ_L1 = "ce-usq-l1"
CE_LLOYD_L1 = "ce-lloyd-l1"
CE_VQ_L1 = "ce-vq-l1"
CE_DECNET = "ce-decnet"
EC_VQ = "ec-vq"
KNOWN_METHODS = (DEEP_VQCS, CE_USQ_OMP, CE_USQ_L1, CE_LLOYD_L1, CE_VQ_L1,
                 CE_DECNET, EC_VQ)


def _parse_scalar(token: str):
    token = token.strip()
    low = token.lower()
    if low in ("true", "on", "yes"):
        return True
    if low in ("false", "off", "no"):
        return False
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        pass
    return token


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno} has no '=': {raw!r}")
        key, _, rhs = line.partition("=")
        rhs = rhs.split("#", 1)[0].strip()
        if "," in rhs:
            values[key.strip()] = [_parse_scalar(tok) for tok in rhs.split(",")]
        else:
            values[key.strip()] = _parse_scalar(rhs)
    return values


@dataclass
class ExperimentConfig:
    """Flat dotted-key config values with typed access."""

    values: dict

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls(parse_config_text(Path(path).read_text()))

    def get(self, key, default=None):
        return self.values.get(key, default)

    def require(self, key):
        if key not in self.values:
            raise ConfigurationError(f"config is missing required key {key!r}")
        return self.values[key]

    def get_list(self, key, default=None):
        val = self.values.get(key, default)
        if val is None:
            return None
        return val if isinstance(val, list) else [val]

    def method_get(self, method: str, param: str, default=None):
        return self.values.get(f"method.{method}.{param}", default)


@dataclass
class ResultRow:
    method: str
    n: int
    m: int
    s: int
    rate: float
    nmse_db: float
    encode_time_s: float
    decode_time_s: float
    total_time_s: float
    seed: int
    checkpoint: str


def write_rows(path, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([getattr(row, f.name) for f in fields(ResultRow)])


def read_rows(path) -> list:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_COLUMNS:
            raise ConfigurationError(f"unexpected CSV columns {reader.fieldnames}")
        for rec in reader:
            rows.append(ResultRow(
                method=rec["method"],
                n=int(rec["n"]), m=int(rec["m"]), s=int(rec["s"]),
                rate=float(rec["rate"]), nmse_db=float(rec["nmse_db"]),
                encode_time_s=float(rec["encode_time_s"]),
                decode_time_s=float(rec["decode_time_s"]),
                total_time_s=float(rec["total_time_s"]),
                seed=int(rec["seed"]), checkpoint=rec["checkpoint"],
            ))
    return rows


def median_time(fn, repeats: int, warmup: int = 10) -> float:
    """Median wall time of ``fn()`` over ``repeats`` runs (monotonic clock)."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bits_for_rate(rate: float, n_dim: int, k_width: int) -> int:
    """Integer bits per quantizer index so that K*bits/N == rate exactly."""
    bits = rate * n_dim / k_width
    if abs(bits - round(bits)) > 1e-9 or round(bits) < 1:
        raise ConfigurationError(
            f"rate {rate} is not achievable with K={k_width}, N={n_dim}: "
            f"needs {bits} bits per index"
        )
    return int(round(bits))


@dataclass
class OnlineTimings:
    encode_s: float = 0.0
    decode_s: float = 0.0
    total_s: float = 0.0


def time_online(encode_fn, decode_fn, total_fn, repeats: int) -> OnlineTimings:
    """Median per-vector wall times; ``decode_fn`` must not re-run encoding."""
    if repeats < 1:
        return OnlineTimings()
    return OnlineTimings(
        encode_s=median_time(encode_fn, repeats),
        decode_s=median_time(decode_fn, repeats),
        total_s=median_time(total_fn, repeats),
    )


def _dnn_timers(model, y_probe):
    idx0 = tr.compress(model, y_probe)
    return (
        lambda: tr.compress(model, y_probe),
        lambda: tr.reconstruct(model, idx0),
        lambda: tr.reconstruct(model, tr.compress(model, y_probe)),
    )


def _ce_timers(spec, model, quantizers, y_probe, sparsity):
    mu = spec.mu_qc
    if mu is None:
        mu = bl.mu_qc_rule(model.noise_variance, spec.levels)

    def encode_one():
        return [sq_encode(q, y_probe[j]) for j, q in enumerate(quantizers)]

    def dequantize(indices):
        return np.array([q.levels_g[i - 1] for q, i in zip(quantizers, indices)])

    def decode_only(y_tilde):
        if spec.decoder_kind == bl.OMP_DECODER:
            return bl.omp(model.phi, y_tilde, sparsity)
        return bl.bpdn(bl.BpdnProblem(model.phi, y_tilde, mu))

    y_tilde0 = dequantize(encode_one())
    return (
        encode_one,
        lambda: decode_only(y_tilde0),
        lambda: decode_only(dequantize(encode_one())),
    )


def _datasets(cfg: ExperimentConfig):
    n = int(cfg.require("signal.n"))
    m = int(cfg.require("signal.m"))
    s = int(cfg.require("signal.s"))
    noise_var = float(cfg.require("signal.noise_var"))
    seed = int(cfg.get("data.seed", 0))
    model = MeasurementModel.dct(n, m, noise_var)
    spec = SparseSourceSpec(n, s)
    train = sample_dataset(model, spec, int(cfg.get("data.train", 10_000)), seed)
    val = sample_dataset(model, spec, int(cfg.get("data.val", 1_000)), seed + 1)
    test = sample_dataset(model, spec, int(cfg.get("data.test", 1_000)), seed + 2)
    return model, train, val, test


def deep_vqcs_train_config(cfg: ExperimentConfig, model: MeasurementModel,
                           rate: float, method: str = DEEP_VQCS,
                           k_override: int | None = None) -> tr.TrainConfig:
    n, m = model.n_dim, model.m_dim
    if method == CE_DECNET:
        k = m
    elif k_override is not None:
        k = int(k_override)
    else:
        k = int(cfg.method_get(method, "k", m))
    bits = bits_for_rate(rate, n, k)
    max_iters = int(cfg.method_get(method, "max_iters", 100_000))
    h_max = float(cfg.method_get(method, "h_max", 300.0))
    alpha = cfg.method_get(method, "alpha")
    beta = cfg.method_get(method, "beta")
    anneal = tr.desk_anneal(max_iters, h_max=h_max)
    if alpha is not None or beta is not None:
        anneal = tr.AnnealSchedule(
            h_init=float(cfg.method_get(method, "h_init", 5.0)),
            h_max=h_max,
            alpha=float(alpha) if alpha is not None else anneal.alpha,
            beta=float(beta) if beta is not None else anneal.beta,
        )
    patience = cfg.method_get(method, "patience", False)
    patience_checks = patience if (isinstance(patience, int)
                                   and not isinstance(patience, bool)) else None
    enc_widths = cfg.get_list(f"method.{method}.enc_widths")
    dec_widths = cfg.get_list(f"method.{method}.dec_widths")
    return tr.TrainConfig(
        n_dim=n,
        m_dim=m,
        k_width=k,
        num_levels=2**bits,
        enc_widths=enc_widths,
        dec_widths=dec_widths,
        use_encoder=(method == DEEP_VQCS),
        batch_size=int(cfg.method_get(method, "batch", 100)),
        max_iters=max_iters,
        anneal=anneal,
        validation_period=int(cfg.method_get(method, "validation_period", 1000)),
        patience_checks=patience_checks,
        seed=int(cfg.get("data.seed", 0)),
    )


def _ce_spec(cfg, method, rate, n, m, seed) -> bl.CePipelineSpec:
    if method == CE_VQ_L1:
        bits = bits_for_rate(rate, n, 1)
        return bl.CePipelineSpec(
            quantizer_kind=bl.LLOYD_VQ, decoder_kind=bl.BPDN_DECODER,
            codebook_bits=bits,
            vq_train_limit=cfg.method_get(method, "vq_train_limit"),
            seed=seed,
        )
    bits = bits_for_rate(rate, n, m)
    kind = bl.LLOYD_SQ if method == CE_LLOYD_L1 else bl.UNIFORM_SQ
    decoder = bl.OMP_DECODER if method == CE_USQ_OMP else bl.BPDN_DECODER
    return bl.CePipelineSpec(quantizer_kind=kind, decoder_kind=decoder,
                             levels=2**bits, seed=seed)


def _run_one(cfg, method, rate, model, train, val, test, ckpt_dir, repeats,
             k_override=None, label=None):
    n, m, s = model.n_dim, model.m_dim, train.sparsity
    seed = int(cfg.get("data.seed", 0))
    y_probe = test.measurements[0]
    checkpoint = ""
    timings = OnlineTimings()
    label = label or method

    if method in (DEEP_VQCS, CE_DECNET):
        config = deep_vqcs_train_config(cfg, model, rate, method, k_override)
        trained, _ = tr.train(config, train, val)
        nmse = tr.validate_hard(trained, test)
        rate_out = rate
        checkpoint = str(Path(ckpt_dir) / f"{label}_r{rate:g}.ckpt")
        tr.save_checkpoint(checkpoint, trained, config, config.max_iters)
        timings = time_online(*_dnn_timers(trained, y_probe), repeats)
    elif method == EC_VQ:
        bits = bits_for_rate(rate, n, 1)
        limit = cfg.method_get(method, "vq_train_limit")
        rate_out, nmse = bl.run_ec_vq(model, train, test, bits,
                                      vq_train_limit=limit,
                                      rng=np.random.default_rng(seed))
        if repeats >= 1 and bits >= 1:
            est = bl.mmse_batch(model, train.measurements[:limit or train.count], s)
            book = lloyd_vq(est, 2**bits, rng=np.random.default_rng(seed))
            timings = time_online(
                lambda: vq_quantize(book, bl.mmse_exhaustive(model, y_probe, s))[0],
                lambda: book.codewords[0],
                lambda: book.codewords[
                    vq_quantize(book, bl.mmse_exhaustive(model, y_probe, s))[0]],
                repeats,
            )
    else:
        spec = _ce_spec(cfg, method, rate, n, m, seed)
        rate_out, nmse = bl.run_ce_baseline(spec, model, test, train)
        if repeats >= 1 and spec.quantizer_kind != bl.LLOYD_VQ:
            quantizers = bl.design_scalar_quantizers(spec, train)
            timings = time_online(*_ce_timers(spec, model, quantizers,
                                              y_probe, s), repeats)
    return ResultRow(label, n, m, s, rate_out, nmse, timings.encode_s,
                     timings.decode_s, timings.total_s, seed, checkpoint)


def run_experiment(cfg: ExperimentConfig) -> list:
    """Run every enabled method at every rate point on shared datasets and
    write the results CSV. A failed method/rate pair produces a row with NaN
    NMSE and the run continues."""
    model, train, val, test = _datasets(cfg)
    methods = [str(x) for x in cfg.get_list("methods", [])]
    for name in methods:
        if name not in KNOWN_METHODS:
            raise ConfigurationError(f"unknown method {name!r}")
    rates = [float(r) for r in cfg.get_list("sweep.rates", [])]
    repeats = int(cfg.get("bench.repeats", 0))
    ckpt_dir = Path(cfg.get("out.ckpt_dir", "."))
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for method in methods:
        k_values = [None]
        if method == DEEP_VQCS:
            k_cfg = cfg.get(f"method.{method}.k")
            if isinstance(k_cfg, list):
                # encoder-width sweep: one row per K at every rate point
                k_values = k_cfg
        for rate in rates:
            for k in k_values:
                label = method if k is None or len(k_values) == 1 \
                    else f"{method}@k{int(k)}"
                jobs.append((method, rate, k, label))
    rows = []
    for method, rate, k, label in jobs:
        try:
            rows.append(_run_one(cfg, method, rate, model, train, val,
                                 test, ckpt_dir, repeats,
                                 k_override=k, label=label))
        except Exception as exc:  # failed row, run continues
            warnings.warn(f"{label} at rate {rate} failed: {exc}")
            rows.append(ResultRow(label, model.n_dim, model.m_dim,
                                  train.sparsity, rate, float("nan"),
                                  float("nan"), float("nan"), float("nan"),
                                  int(cfg.get("data.seed", 0)), ""))
    out_csv = cfg.get("out.csv")
    if out_csv:
        write_rows(out_csv, rows)
    return rows


def bench_runtime(cfg: ExperimentConfig, ckpt_paths: dict) -> list:
    """Online-phase timing table across the configured methods and rates.

    ``ckpt_paths`` maps (method, rate) or method to a trained checkpoint for
    the DNN-based methods; missing artifacts are skipped with a warning.
    Returns dict rows with absolute medians and ratios normalized by the
    deep-vqcs row at the same rate.
    """
    model, train, _, test = _datasets(cfg)
    methods = [str(x) for x in cfg.get_list("methods", [])]
    rates = [float(r) for r in cfg.get_list("sweep.rates", [])]
    repeats = max(100, int(cfg.get("bench.repeats", 100)))
    seed = int(cfg.get("data.seed", 0))
    y_probe = test.measurements[0]
    s = train.sparsity
    entries = []
    for method in methods:
        for rate in rates:
            if method in (DEEP_VQCS, CE_DECNET):
                path = ckpt_paths.get((method, rate), ckpt_paths.get(method))
                if path is None or not Path(path).exists():
                    warnings.warn(f"no checkpoint for {method} at rate {rate}; "
                                  "skipping")
                    continue
                trained, _, _ = tr.load_checkpoint(path)
                timings = time_online(*_dnn_timers(trained, y_probe), repeats)
            elif method == EC_VQ:
                continue
            else:
                spec = _ce_spec(cfg, method, rate, model.n_dim, model.m_dim, seed)
                if spec.quantizer_kind == bl.LLOYD_VQ:
                    continue
                quantizers = bl.design_scalar_quantizers(spec, train)
                timings = time_online(*_ce_timers(spec, model, quantizers,
                                                  y_probe, s), repeats)
            entries.append({"method": method, "rate": rate,
                            "encode_s": timings.encode_s,
                            "decode_s": timings.decode_s,
                            "total_s": timings.total_s})
    by_rate = {e["rate"]: e for e in entries if e["method"] == DEEP_VQCS}
    for e in entries:
        ref = by_rate.get(e["rate"])
        for part in ("encode", "decode", "total"):
            key = f"{part}_s"
            e[f"{part}_ratio"] = (e[key] / ref[key]
                                  if ref and ref[key] > 0 else float("nan"))
    return entries


def write_bench(path, entries) -> None:
    cols = ["method", "rate", "encode_s", "decode_s", "total_s",
            "encode_ratio", "decode_ratio", "total_ratio"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for e in entries:
            writer.writerow([e.get(c, "") for c in cols])
