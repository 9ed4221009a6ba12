"""Per-device choice of (sub-network, quantization bits).

A device is assigned the candidate with the smallest accuracy drop, measured
on server data, among sub-networks whose modeled training time fits the
device's per-round budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import quantize_dequantize
from .decompose import embed, extract
from .nn import Dataset, ElasticArch, ElasticModel, SubNetworkSpec, accuracy, sub_param_count
from .rng import stream


class InfeasibleDeviceError(RuntimeError):
    """No sub-network trains within the device's time budget."""


@dataclass(frozen=True)
class DeviceProfile:
    """Simulated device resources.  ``id`` doubles as the handle of its local data."""

    id: int
    compute_rate: float  # multiply-accumulates per second
    q_max: int
    bandwidth_bps: float
    mu: float  # local-round time budget in seconds
    category: str = "default"

    def __post_init__(self):
        if min(self.compute_rate, self.bandwidth_bps, self.mu) <= 0:
            raise ValueError("device resources must be positive")
        if self.q_max not in (8, 16, 32):
            raise ValueError(f"q_max must be 8, 16 or 32, got {self.q_max}")


@dataclass(frozen=True)
class Assignment:
    device_id: int
    spec: SubNetworkSpec
    q: int
    predicted_utility_drop: float
    predicted_train_time_s: float
    evaluations: int = 0


def flops_forward(arch: ElasticArch, spec: SubNetworkSpec) -> int:
    """Multiply-accumulates of one forward pass of one sample through ``spec``."""
    w, d = spec.width, spec.depth
    return arch.input_dim * w + arch.num_blocks * d * w * w + w * arch.output_dim


def train_time(
    arch: ElasticArch,
    spec: SubNetworkSpec,
    profile: DeviceProfile,
    samples_per_round: int,
    epochs: int,
) -> float:
    """Modeled seconds for one local round: forward + backward ~ 3 forwards."""
    return 3.0 * flops_forward(arch, spec) * samples_per_round * epochs / profile.compute_rate


def utility_drop(
    model: ElasticModel,
    spec: SubNetworkSpec,
    q: int,
    server_data: Dataset,
    rng: np.random.Generator,
) -> float:
    """Server accuracy of the full model minus that of the quantized ``spec`` slice."""
    full = accuracy(model, model.arch.full_spec, server_data)
    values = quantize_dequantize(extract(model, spec), q, rng)
    quantized = embed(model, spec, values)
    return full - accuracy(quantized, spec, server_data)


def _size_key(arch: ElasticArch, spec: SubNetworkSpec):
    return (sub_param_count(arch, spec), spec.depth, spec.width)


def select(
    model: ElasticModel,
    specs: list[SubNetworkSpec],
    profile: DeviceProfile,
    server_data: Dataset,
    seed: int,
    *,
    samples_per_round: int,
    epochs: int,
    acceptable_drop: float | None = None,
) -> Assignment:
    """Brute-force search over time-feasible specs x q in [1, q_max].

    Ties go to the smaller spec, then to the larger ``q``.  Candidates are
    visited in that preference order, so stopping at the first drop at or
    below ``acceptable_drop`` returns the preferred candidate among those
    seen.  Each candidate is quantized with its own fixed stream derived from
    ``seed``.
    """
    if not specs:
        raise ValueError("empty sub-network family")
    arch = model.arch
    times = {s: train_time(arch, s, profile, samples_per_round, epochs) for s in specs}
    feasible = sorted((s for s in specs if times[s] <= profile.mu), key=lambda s: _size_key(arch, s))
    if not feasible:
        fastest = min(times.values())
        raise InfeasibleDeviceError(
            f"device {profile.id}: fastest sub-network needs {fastest:.3g}s > mu={profile.mu}s"
        )
    best = None
    evaluations = 0
    for spec in feasible:
        for q in range(profile.q_max, 0, -1):
            rng = candidate_stream(seed, spec, q)
            drop = utility_drop(model, spec, q, server_data, rng)
            evaluations += 1
            if best is None or drop < best[0]:
                best = (drop, spec, q)
            if acceptable_drop is not None and drop <= acceptable_drop:
                break
        else:
            continue
        break
    drop, spec, q = best
    return Assignment(profile.id, spec, q, drop, times[spec], evaluations)


def candidate_stream(seed: int, spec: SubNetworkSpec, q: int) -> np.random.Generator:
    return stream(seed, "select", spec.depth, spec.width, q)
