"""Command line interface for dataset generation, training, evaluation,
baseline runs, rate sweeps, and online-phase timing."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiment as ex
from . import trainer as tr
from .signal_model import Dataset, rate_bits


def _load_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.values["data.seed"] = args.seed
    return cfg


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    _, train, val, test = ex._datasets(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, data in (("train", train), ("val", val), ("test", test)):
        path = out / f"{name}.bin"
        data.save(path)
        print(f"wrote {path} ({data.count} samples)")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    model, train, val, _ = ex._datasets(cfg)
    rates = cfg.get_list("sweep.rates", [1.0])
    rate = args.rate if args.rate is not None else float(rates[0])
    config = ex.deep_vqcs_train_config(cfg, model, rate, args.method)
    trained, report = tr.train(config, train, val)
    tr.save_checkpoint(args.out, trained, config, report.best_iteration)
    print(f"wrote {args.out}: best validation NMSE "
          f"{report.best_val_nmse_db:.2f} dB at iteration "
          f"{report.best_iteration} ({report.stop_reason})")
    return 0


def _cmd_evaluate(args) -> int:
    model, echo, _ = tr.load_checkpoint(args.ckpt)
    data = Dataset.load(args.data)
    nmse = tr.validate_hard(model, data)
    rate = rate_bits(model.k_width, model.hard_q.num_levels, model.n_dim)
    row = ex.ResultRow(
        method=str(echo.get("method", "deep-vqcs" if model.enc_net is not None
                            else "ce-decnet")),
        n=model.n_dim, m=model.m_dim, s=data.sparsity, rate=rate,
        nmse_db=nmse, encode_time_s=0.0, decode_time_s=0.0, total_time_s=0.0,
        seed=data.seed, checkpoint=str(args.ckpt),
    )
    ex.write_rows(args.csv, [row])
    print(f"NMSE {nmse:.2f} dB at rate {rate:g}; wrote {args.csv}")
    return 0


def _cmd_baseline(args) -> int:
    cfg = _load_config(args)
    methods = [m for m in cfg.get_list("methods", [])
               if m not in (ex.DEEP_VQCS, ex.CE_DECNET)]
    cfg.values["methods"] = methods or [ex.CE_USQ_OMP]
    if args.out:
        cfg.values["out.csv"] = args.out
    rows = ex.run_experiment(cfg)
    for row in rows:
        print(f"{row.method} R={row.rate:g}: {row.nmse_db:.2f} dB")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    if args.out:
        cfg.values["out.csv"] = args.out
    rows = ex.run_experiment(cfg)
    for row in rows:
        print(f"{row.method} R={row.rate:g}: {row.nmse_db:.2f} dB")
    return 0


def _cmd_bench_time(args) -> int:
    cfg = _load_config(args)
    ckpt_dir = Path(args.ckpt_dir if args.ckpt_dir else
                    cfg.get("out.ckpt_dir", "."))
    ckpts = {}
    for method in (ex.DEEP_VQCS, ex.CE_DECNET):
        for rate in cfg.get_list("sweep.rates", []):
            path = ckpt_dir / f"{method}_r{float(rate):g}.ckpt"
            if path.exists():
                ckpts[(method, float(rate))] = path
    entries = ex.bench_runtime(cfg, ckpts)
    if args.out:
        ex.write_bench(args.out, entries)
    for e in entries:
        print(f"{e['method']} R={e['rate']:g}: encode {e['encode_s']:.2e}s "
              f"decode {e['decode_s']:.2e}s "
              f"(x{e['decode_ratio']:.1f} vs deep-vqcs)")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vqcs",
        description="Quantized compressed sensing lab: learned vector "
                    "quantization of compressive measurements plus classical "
                    "baselines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/val/test datasets")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train the learned encoder/decoder")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--rate", type=float, help="rate point (default: first of "
                                              "sweep.rates)")
    p.add_argument("--method", default=ex.DEEP_VQCS,
                   choices=[ex.DEEP_VQCS, ex.CE_DECNET])
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("baseline", help="run the classical baselines only")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="results CSV (overrides out.csv)")
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("sweep", help="run every configured method and rate")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="results CSV (overrides out.csv)")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("bench-time", help="time the online phase per method")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="timing CSV")
    p.add_argument("--ckpt-dir", help="directory holding trained checkpoints")
    p.set_defaults(func=_cmd_bench_time)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
