"""Synthetic data, server/device partitioning, device fleets and cost models."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import HEADER_BITS, PrecisionClass
from .nn import Dataset, ElasticArch, SubNetworkSpec
from .rng import stream
from .selection import DeviceProfile, flops_forward


@dataclass(frozen=True)
class TaskConfig:
    num_classes: int = 10
    input_dim: int = 20
    samples_per_class: int = 300
    margin: float = 3.0
    noise: float = 1.0
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be at least 1")
        if not 2 <= self.num_classes <= self.input_dim:
            raise ValueError("need 2 <= num_classes <= input_dim")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")


@dataclass(frozen=True, eq=False)
class SyntheticTask:
    config: TaskConfig
    means: np.ndarray = field(repr=False)
    train: Dataset = field(repr=False)
    test: Dataset = field(repr=False)


def generate_task(cfg: TaskConfig, seed: int) -> SyntheticTask:
    """Gaussian classes centred on the vertices of a scaled, randomly rotated simplex.

    Any two class means are ``margin * sqrt(2)`` apart; noise is isotropic with
    standard deviation ``noise``.
    """
    rng = stream(seed, "task")
    rotation, _ = np.linalg.qr(rng.normal(size=(cfg.input_dim, cfg.input_dim)))
    means = cfg.margin * rotation[: cfg.num_classes]
    per_class = cfg.samples_per_class
    n_test = max(1, int(round(per_class * cfg.test_fraction)))
    if n_test >= per_class:
        raise ValueError("samples_per_class too small for a train/test split")
    train_x, train_y, test_x, test_y = [], [], [], []
    for c in range(cfg.num_classes):
        x = means[c] + cfg.noise * rng.normal(size=(per_class, cfg.input_dim))
        test_x.append(x[:n_test])
        train_x.append(x[n_test:])
        test_y.append(np.full(n_test, c))
        train_y.append(np.full(per_class - n_test, c))
    train = Dataset(np.vstack(train_x), np.concatenate(train_y))
    test = Dataset(np.vstack(test_x), np.concatenate(test_y))
    return SyntheticTask(cfg, means, train, test)


class Scheme(str, enum.Enum):
    IID = "iid"
    DIRICHLET = "dirichlet"


@dataclass(frozen=True)
class PartitionPlan:
    server_classes: tuple[int, ...] = (6, 7, 8, 9)
    device_classes: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    scheme: Scheme = Scheme.IID
    alpha: float = 1.0

    def __post_init__(self):
        if set(self.server_classes) & set(self.device_classes):
            raise ValueError("server and device classes must be disjoint")
        if not self.device_classes:
            raise ValueError("devices need at least one class")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


@dataclass(eq=False)
class Partition:
    server_train: Dataset
    server_test: Dataset
    device_train: list[Dataset]
    device_test: list[Dataset]
    device_indices: list[np.ndarray] = field(repr=False)  # rows of task.train per device
    server_indices: np.ndarray = field(repr=False)


def _split_evenly(idx: np.ndarray, parts: int) -> list[np.ndarray]:
    return [np.sort(chunk) for chunk in np.array_split(idx, parts)]


def _dirichlet_split(labels, classes, num_devices, alpha, rng) -> list[np.ndarray]:
    owners: list[list[int]] = [[] for _ in range(num_devices)]
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        shares = rng.dirichlet(np.full(num_devices, alpha))
        cuts = np.floor(np.cumsum(shares)[:-1] * idx.size).astype(int)
        for u, chunk in enumerate(np.split(idx, cuts)):
            owners[u].extend(chunk.tolist())
    # every device must hold at least one sample: take one from the largest holder
    for u in range(num_devices):
        if not owners[u]:
            donor = max(range(num_devices), key=lambda k: (len(owners[k]), -k))
            owners[u].append(owners[donor].pop())
    return [np.sort(np.array(o, dtype=np.int64)) for o in owners]


def partition(task: SyntheticTask, plan: PartitionPlan, num_devices: int, seed: int) -> Partition:
    """Split training data between the server and ``num_devices`` devices.

    The server keeps every training sample of ``plan.server_classes``;
    ``plan.device_classes`` samples are spread over devices either uniformly
    (IID) or with per-class shares drawn from a symmetric Dirichlet(alpha).
    Test data covers all classes: the server gets the whole test split, each
    device an IID shard of it.
    """
    if num_devices < 1:
        raise ValueError("need at least one device")
    rng = stream(seed, "partition")
    labels = task.train.y
    server_idx = np.flatnonzero(np.isin(labels, plan.server_classes))
    device_pool = np.flatnonzero(np.isin(labels, plan.device_classes))
    if device_pool.size < num_devices:
        raise ValueError("fewer device samples than devices")
    if plan.scheme is Scheme.IID:
        device_idx = _split_evenly(rng.permutation(device_pool), num_devices)
    else:
        device_idx = _dirichlet_split(labels, plan.device_classes, num_devices, plan.alpha, rng)
    test_idx = _split_evenly(rng.permutation(len(task.test)), num_devices)
    return Partition(
        server_train=task.train.subset(server_idx),
        server_test=task.test,
        device_train=[task.train.subset(i) for i in device_idx],
        device_test=[task.test.subset(i) for i in test_idx],
        device_indices=device_idx,
        server_indices=server_idx,
    )


def class_proportions(data: Dataset, classes) -> np.ndarray:
    counts = np.array([(data.y == c).sum() for c in classes], dtype=np.float64)
    return counts / counts.sum()


# --- cost models -------------------------------------------------------------


def comm_time(payload_bits: float, profile: DeviceProfile) -> float:
    """Seconds to move ``payload_bits`` over the device link."""
    return payload_bits / profile.bandwidth_bps


def round_trip_time(bits_down: float, bits_up: float, profile: DeviceProfile) -> float:
    return comm_time(bits_down, profile) + comm_time(bits_up, profile)


def header_time(profile: DeviceProfile) -> float:
    return comm_time(HEADER_BITS, profile)


# Relative inference throughput by container.  Only the Float32 baseline and
# one reduced-precision ratio (~0.16s vs ~0.13s) are anchored in measurement;
# Int8 and Float16 are treated alike.
PRECISION_SPEEDUP = {
    PrecisionClass.FLOAT32: 1.0,
    PrecisionClass.FLOAT16: 0.16 / 0.13,
    PrecisionClass.INT8: 0.16 / 0.13,
}


def inference_time(
    arch: ElasticArch, spec: SubNetworkSpec, profile: DeviceProfile, precision: PrecisionClass
) -> float:
    """Modeled seconds for one forward pass of one sample."""
    return flops_forward(arch, spec) / (profile.compute_rate * PRECISION_SPEEDUP[precision])


# --- fleets ------------------------------------------------------------------


@dataclass(frozen=True)
class DeviceTemplate:
    name: str
    compute_rate: float
    q_max: int
    bandwidth_bps: float
    mu: float


@dataclass(frozen=True)
class FleetSpec:
    tiers: tuple[tuple[DeviceTemplate, float], ...]

    def __post_init__(self):
        if not self.tiers:
            raise ValueError("fleet needs at least one tier")
        total = sum(f for _, f in self.tiers)
        if abs(total - 1.0) > 1e-9 or any(f < 0 for _, f in self.tiers):
            raise ValueError(f"tier fractions must be non-negative and sum to 1, got {total}")


def tier_counts(fractions, n: int) -> list[int]:
    """Largest-remainder apportionment; equal remainders go to the earlier tier."""
    quotas = [f * n for f in fractions]
    counts = [int(np.floor(x)) for x in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def build_fleet(spec: FleetSpec, n: int, seed: int) -> list[DeviceProfile]:
    """``n`` device profiles; tiers are dealt to device ids in a seeded random order."""
    counts = tier_counts([f for _, f in spec.tiers], n)
    tiers = [t for (t, _), c in zip(spec.tiers, counts) for _ in range(c)]
    order = stream(seed, "fleet").permutation(n)
    return [
        DeviceProfile(
            id=int(u),
            compute_rate=tiers[k].compute_rate,
            q_max=tiers[k].q_max,
            bandwidth_bps=tiers[k].bandwidth_bps,
            mu=tiers[k].mu,
            category=tiers[k].name,
        )
        for u, k in enumerate(order)
    ]


# --- dataset files -----------------------------------------------------------

_DS_HEADER = struct.Struct("<III")


def write_dataset(path, data: Dataset, num_classes: int) -> None:
    """Binary format: uint32 n, dim, C; n*dim float32 row-major; n int32 labels (all LE)."""
    n, dim = data.x.shape
    with open(path, "wb") as fh:
        fh.write(_DS_HEADER.pack(n, dim, num_classes))
        fh.write(data.x.astype("<f4").tobytes())
        fh.write(data.y.astype("<i4").tobytes())


def read_dataset(path) -> tuple[Dataset, int]:
    raw = Path(path).read_bytes()
    if len(raw) < _DS_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    n, dim, num_classes = _DS_HEADER.unpack_from(raw)
    expected = _DS_HEADER.size + 4 * n * dim + 4 * n
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = _DS_HEADER.size
    x = np.frombuffer(raw, "<f4", n * dim, off).reshape(n, dim).astype(np.float64)
    y = np.frombuffer(raw, "<i4", n, off + 4 * n * dim).astype(np.int64)
    if n and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"{path}: label out of range")
    return Dataset(x, y), num_classes
