"""Command-line entry point: ``nestfl <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import reports
from .config import ConfigError, PRESETS, default_out_dir, describe, load_config
from .convergence import run_convergence
from .experiments import (
    build_environment,
    codec_bench,
    comparison_rows,
    interior_peak,
    mix_sweep,
    run_mode,
    tail_mean,
)
from .simenv import generate_task, partition, write_dataset

log = logging.getLogger("nestfl")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="INI experiment file")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="built-in config applied before --config")
    parser.add_argument("--seed", type=int, help="override [experiment] seed")
    parser.add_argument("--out", type=Path, help="output directory (default: $NESTFL_OUT or ./out)")
    parser.add_argument("--workers", type=int, help="parallel device threads")
    parser.add_argument("--dry-run", action="store_true", help="validate and print the resolved plan")
    parser.add_argument("-v", "--verbose", action="store_true")


def _resolve(args):
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be positive", source="<command line>")
        cfg = replace(cfg, protocol=replace(cfg.protocol, workers=args.workers))
    out = args.out or default_out_dir()
    return cfg, out


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _assignment_rows(assignments):
    for u in sorted(assignments):
        a = assignments[u]
        yield {
            "device_id": u,
            "depth": a.spec.depth,
            "width": a.spec.width,
            "q": a.q,
            "drop": a.predicted_utility_drop,
            "time_s": a.predicted_train_time_s,
        }


def _save_model(path: Path, model) -> None:
    arch = model.arch
    np.savez(
        path,
        params=model.params,
        input_dim=arch.input_dim,
        output_dim=arch.output_dim,
        num_blocks=arch.num_blocks,
        max_depth_per_block=arch.max_depth_per_block,
        max_width=arch.max_width,
        allowed_depths=np.array(arch.allowed_depths),
        allowed_widths=np.array(arch.allowed_widths),
    )


# --- subcommands -------------------------------------------------------------


def cmd_run(cfg, out: Path, args) -> int:
    env = build_environment(cfg)
    results = {}
    for mode in cfg.modes:
        where = out if len(cfg.modes) == 1 else out / mode.value
        where.mkdir(parents=True, exist_ok=True)
        result = run_mode(cfg, mode, env, rounds_csv=where / "rounds.csv")
        reports.write_rows(where / "assignments.csv", reports.ASSIGNMENT_FIELDS, _assignment_rows(result.assignments))
        _save_model(where / "model.npz", result.state.model)
        results[mode] = result
        print(f"{mode.value}: mean device acc (last {cfg.tail_rounds} rounds) {tail_mean(result, cfg.tail_rounds):.4f}")
        for u, reason in sorted(result.infeasible.items()):
            print(f"  excluded device {u}: {reason}")
    if len(results) > 1:
        reports.write_rows(out / "comparison.csv", reports.COMPARISON_FIELDS, comparison_rows(results))
        print(f"wrote {out / 'comparison.csv'}")
    return 0


def cmd_select(cfg, out: Path, args) -> int:
    env = build_environment(cfg)
    result = run_mode(replace(cfg, protocol=replace(cfg.protocol, rounds=0)), cfg.modes[0], env)
    out.mkdir(parents=True, exist_ok=True)
    reports.write_rows(out / "assignments.csv", reports.ASSIGNMENT_FIELDS, _assignment_rows(result.assignments))
    for row in _assignment_rows(result.assignments):
        print(f"device {row['device_id']:3d}: d{row['depth']}w{row['width']} q={row['q']} drop={row['drop']:.4f}")
    for u, reason in sorted(result.infeasible.items()):
        print(f"device {u:3d}: infeasible ({reason})")
    return 0


def cmd_mix_sweep(cfg, out: Path, args) -> int:
    out.mkdir(parents=True, exist_ok=True)
    writer = reports.RowWriter(out / "mix_sweep.csv", reports.SWEEP_FIELDS)

    def emit(point):
        writer.write(point.row())
        print(f"fraction {point.medium_fraction:.2f}: acc {point.mean_device_acc:.4f}")

    try:
        points = mix_sweep(cfg, on_point=emit)
    finally:
        writer.close()
    peak = interior_peak(points)
    if peak is None:
        print("no interior maximum")
    else:
        print(f"interior maximum at fraction {peak.medium_fraction:.2f} (acc {peak.mean_device_acc:.4f})")
    return 0


def cmd_convergence(cfg, out: Path, args) -> int:
    conv = cfg.convergence
    if args.trials is not None:
        conv = replace(conv, trials=args.trials)
    if args.max_log2_steps is not None:
        conv = replace(conv, max_log2_steps=args.max_log2_steps)
    result = run_convergence(conv)
    out.mkdir(parents=True, exist_ok=True)
    reports.write_rows(out / "convergence.csv", reports.CONVERGENCE_FIELDS, result.rows())
    print(f"fitted slope vs sqrt(T)/log(T): {result.slope:.4f}")
    return 0


def cmd_codec_bench(cfg, out: Path, args) -> int:
    rows = codec_bench(args.n, args.q, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    reports.write_rows(out / "codec_bench.csv", reports.CODEC_FIELDS, rows)
    for r in rows:
        print(f"q={r['q']:2d}: {r['bits_per_coord']:.3f} bits/coord, {r['compression_ratio']:.2f}x vs float32")
    return 0


def cmd_gen_data(cfg, out: Path, args) -> int:
    task = generate_task(cfg.task, cfg.seed)
    part = partition(task, cfg.partition, cfg.protocol.num_devices, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    c = cfg.task.num_classes
    write_dataset(out / "server_train.bin", part.server_train, c)
    write_dataset(out / "server_test.bin", part.server_test, c)
    for u, (train, test) in enumerate(zip(part.device_train, part.device_test)):
        write_dataset(out / f"device{u:03d}_train.bin", train, c)
        write_dataset(out / f"device{u:03d}_test.bin", test, c)
    print(f"wrote {2 + 2 * len(part.device_train)} dataset files to {out}")
    return 0


COMMANDS = {
    "run": cmd_run,
    "select": cmd_select,
    "mix-sweep": cmd_mix_sweep,
    "convergence": cmd_convergence,
    "codec-bench": cmd_codec_bench,
    "gen-data": cmd_gen_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nestfl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "run": "run the federated experiment for each configured mode",
        "select": "pretrain and print per-device sub-network and bit-width",
        "mix-sweep": "accuracy versus share of medium sub-networks",
        "convergence": "empirical convergence rate of the server update",
        "codec-bench": "encoded size of Gaussian weights per bit-width",
        "gen-data": "write the synthetic task in the binary dataset format",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _common(p)
        if name == "mix-sweep":
            p.add_argument("--fractions", type=_float_list, help="comma-separated medium fractions")
        elif name == "convergence":
            p.add_argument("--trials", type=int)
            p.add_argument("--max-log2-steps", type=int)
        elif name == "codec-bench":
            p.add_argument("--n", type=int, default=100_000, help="number of weights")
            p.add_argument("--q", type=_int_list, default=[2, 4, 8, 16, 32], help="comma-separated bit-widths")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, out = _resolve(args)
        if args.command == "mix-sweep" and args.fractions is not None:
            cfg = replace(cfg, sweep=replace(cfg.sweep, fractions=tuple(args.fractions)))
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.dry_run:
        print(f"command: {args.command}\nout: {out}")
        print(describe(cfg))
        return 0
    return COMMANDS[args.command](cfg, out, args)


if __name__ == "__main__":
    sys.exit(main())
