"""End-to-end drivers shared by the command line and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .codec import payload_bits, quantize
from .config import ExperimentConfig
from .nn import init_model
from .protocol import Environment, ExperimentResult, Mode, run_experiment
from .rng import stream
from .selection import Assignment, train_time
from .simenv import build_fleet, generate_task, partition


def build_environment(cfg: ExperimentConfig) -> Environment:
    task = generate_task(cfg.task, cfg.seed)
    n = cfg.protocol.num_devices
    part = partition(task, cfg.partition, n, cfg.seed)
    fleet = build_fleet(cfg.fleet_spec(), n, cfg.seed)
    return Environment(
        cfg.arch(), part.server_train, part.server_test, part.device_train, part.device_test, fleet
    )


def tail_mean(result: ExperimentResult, k: int) -> float:
    """Mean device accuracy over the last ``k`` rounds."""
    values = [r.mean_device_acc for r in result.reports[-k:]]
    return float(np.mean(values)) if values else float("nan")


def run_mode(cfg: ExperimentConfig, mode: Mode, env: Environment | None = None, rounds_csv=None, assignments=None):
    env = env or build_environment(cfg)
    config = replace(cfg.protocol, mode=mode)
    model = init_model(env.arch, cfg.seed)
    return run_experiment(config, env, model, assignments=assignments, rounds_csv=rounds_csv)


def comparison_rows(results: dict[Mode, ExperimentResult]):
    for mode, result in results.items():
        for r in result.reports:
            yield {
                "round": r.round,
                "mode": mode.value,
                "mean_device_acc": r.mean_device_acc,
                "global_acc": r.global_acc,
            }


# --- sub-network mix sweep ---------------------------------------------------


@dataclass
class SweepPoint:
    medium_fraction: float
    num_medium: int
    mean_device_acc: float
    global_acc: float

    def row(self) -> dict:
        return dict(vars(self))


def mix_assignments(cfg: ExperimentConfig, env: Environment, fraction: float) -> dict[int, Assignment]:
    """Give ``round(fraction * N)`` devices (seeded choice) the medium spec, the rest the small one."""
    sweep, arch = cfg.sweep, env.arch
    arch.validate(sweep.medium)
    arch.validate(sweep.small)
    n = len(env.fleet)
    k = int(round(fraction * n))
    order = stream(cfg.seed, "mix").permutation(n)
    out = {}
    for rank, u in enumerate(order):
        spec, q = (sweep.medium, sweep.medium_q) if rank < k else (sweep.small, sweep.small_q)
        profile = env.fleet[int(u)]
        t = train_time(arch, spec, profile, len(env.device_train[int(u)]), cfg.protocol.local_epochs)
        out[int(u)] = Assignment(int(u), spec, q, float("nan"), t)
    return out


def mix_sweep(cfg: ExperimentConfig, fractions=None, on_point=None) -> list[SweepPoint]:
    """Device accuracy as the share of medium sub-networks varies."""
    env = build_environment(cfg)
    points = []
    for f in fractions if fractions is not None else cfg.sweep.fractions:
        assignments = mix_assignments(cfg, env, f)
        result = run_mode(cfg, Mode.FEDX, env, assignments=assignments)
        point = SweepPoint(
            medium_fraction=float(f),
            num_medium=int(round(f * len(env.fleet))),
            mean_device_acc=tail_mean(result, cfg.sweep.tail_rounds),
            global_acc=result.reports[-1].global_acc if result.reports else float("nan"),
        )
        points.append(point)
        if on_point:
            on_point(point)
    return points


def interior_peak(points: list[SweepPoint]) -> SweepPoint | None:
    """The best point if it is strictly better than both endpoints, else ``None``."""
    if len(points) < 3:
        return None
    best = max(points[1:-1], key=lambda p: p.mean_device_acc)
    if best.mean_device_acc > max(points[0].mean_device_acc, points[-1].mean_device_acc):
        return best
    return None


# --- codec benchmark ---------------------------------------------------------


def codec_bench(n: int, qs, seed: int) -> list[dict]:
    """Encoded size of ``n`` standard-normal weights at each ``q`` versus raw float32."""
    theta = stream(seed, "codec-bench").normal(size=n)
    rows = []
    for q in qs:
        bits = payload_bits(quantize(theta, q, stream(seed, "codec-bench", q)))
        rows.append(
            {
                "q": q,
                "n": n,
                "bits": bits,
                "bits_per_coord": bits / n if n else float("nan"),
                "compression_ratio": 32 * n / bits,
            }
        )
    return rows
