"""Command-line entry point.

Subcommands: train a single run, sweep the rate/accuracy trade-off,
sweep delayed-camera counts, or run the self-check battery. All output
lands as CSV plus a JSON sidecar under --out.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import (ExperimentConfig, config_hash, emit_csv, load_config,
                      run_point, save_config, sweep_delayed_cameras,
                      sweep_rate_vs_moda, write_meta)
from .verify import run_battery, write_battery_csv
from .version import VERSION


def _default_config() -> ExperimentConfig:
    return ExperimentConfig()


def _load(args) -> ExperimentConfig:
    if args.config:
        return load_config(args.config)
    return _default_config()


def cmd_train(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rec = run_point(cfg, args.seed, args.weight_mode, "single", 0.0)
    csv_path = out / "train.csv"
    emit_csv([rec], csv_path)
    write_meta(csv_path, cfg, "train", 1)
    save_config(cfg, out / "config.json")
    print(f"seed {args.seed} moda {rec['moda']:.4f} "
          f"bits/frame {rec['bits_per_frame']:.1f} -> {csv_path}")
    return 0


def cmd_sweep_rate(args) -> int:
    cfg = _load(args)
    records, csv_path = sweep_rate_vs_moda(cfg, args.out)
    save_config(cfg, Path(args.out) / "config.json")
    print(f"{len(records)} runs -> {csv_path} (config {config_hash(cfg)})")
    return 0


def cmd_sweep_delay(args) -> int:
    cfg = _load(args)
    records, csv_path = sweep_delayed_cameras(cfg, args.out)
    save_config(cfg, Path(args.out) / "config.json")
    print(f"{len(records)} runs -> {csv_path} (config {config_hash(cfg)})")
    return 0


def cmd_verify(args) -> int:
    rows, all_pass = run_battery()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "verify.csv"
    write_battery_csv(rows, csv_path)
    for r in rows:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} "
              f"(observed {r.observed}, bound {r.bound})")
    print(f"{sum(r.passed for r in rows)}/{len(rows)} checks passed -> {csv_path}")
    return 0 if all_pass else 2


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="priocam",
        description="Priority-weighted multi-camera compression testbed")
    parser.add_argument("--version", action="version", version=VERSION)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one run and score it")
    p_train.add_argument("--config", help="JSON experiment config")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--out", default="runs/train")
    p_train.add_argument("--weight-mode", choices=("learned", "equal"),
                         default="learned")
    p_train.set_defaults(fn=cmd_train)

    p_rate = sub.add_parser("sweep-rate",
                            help="sweep the rate penalty across seeds")
    p_rate.add_argument("--config", help="JSON experiment config")
    p_rate.add_argument("--out", default="runs/rate")
    p_rate.set_defaults(fn=cmd_sweep_rate)

    p_delay = sub.add_parser("sweep-delay",
                             help="sweep the delayed-camera count across seeds")
    p_delay.add_argument("--config", help="JSON experiment config")
    p_delay.add_argument("--out", default="runs/delay")
    p_delay.set_defaults(fn=cmd_sweep_delay)

    p_verify = sub.add_parser("verify", help="run the self-check battery")
    p_verify.add_argument("--out", default="runs/verify")
    p_verify.set_defaults(fn=cmd_verify)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
