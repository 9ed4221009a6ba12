"""Federated training loop with server-side quantization and fine-tuning.

One round: sample devices, quantize each device's sub-network at the server,
let devices train from the decoded values, average the returned sub-networks
with a per-parameter mask, then fine-tune on server data with a proximal pull
toward that average.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import reports
from .codec import payload_bits, precision_class, quantize, quantize_dequantize, round_to_precision
from .decompose import aggregate, extract, family, live_indices, sub_arch
from .device import train_received
from .nn import (
    Dataset,
    ElasticArch,
    ElasticModel,
    SubNetworkSpec,
    accuracy,
    elastic_loss_and_grad,
    loss,
    sgd_step,
)
from .rng import stream
from .selection import (
    Assignment,
    DeviceProfile,
    InfeasibleDeviceError,
    flops_forward,
    select,
    train_time,
)
from .simenv import round_trip_time

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    FEDX = "fedx"
    QUANTIZED_FEDAVG_UNIFORM = "quantized_fedavg_uniform"
    FEDX_NO_FINETUNE = "fedx_no_finetune"


@dataclass(frozen=True)
class ProtocolConfig:
    rounds: int = 50
    num_devices: int = 20
    devices_per_round: int = 5
    local_epochs: int = 3
    local_lr: float = 0.1
    server_lr: float = 0.1
    gamma: float = 1e-4
    batch_size: int = 32
    server_pretrain_epochs: int = 20
    pretrain_lr: float = 0.05
    finetune_steps: int | None = None
    finetune_samples: int = 320
    mode: Mode = Mode.FEDX
    uniform_depth: int | None = None
    uniform_width: int | None = None
    uniform_q: int = 32
    uplink_q: int | None = None
    selection_eval_fraction: float = 0.2
    acceptable_drop: float | None = None
    pretrain_specs: str = "family"
    finetune_specs: str = "assigned"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if not 1 <= self.devices_per_round <= self.num_devices:
            raise ValueError("need 1 <= devices_per_round <= num_devices")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ValueError("rounds and local_epochs must be non-negative")
        if self.local_lr <= 0 or self.server_lr < 0 or self.pretrain_lr < 0 or self.gamma < 0:
            raise ValueError("need local_lr > 0 and non-negative server_lr, pretrain_lr, gamma")
        if self.batch_size < 1 or self.workers < 1:
            raise ValueError("batch_size and workers must be positive")
        if self.pretrain_specs not in ("full", "family"):
            raise ValueError("pretrain_specs must be 'full' or 'family'")
        if self.finetune_specs not in ("full", "family", "assigned"):
            raise ValueError("finetune_specs must be 'full', 'family' or 'assigned'")
        if not 0 < self.selection_eval_fraction < 1:
            raise ValueError("selection_eval_fraction must be in (0, 1)")

    @property
    def uniform_spec(self) -> SubNetworkSpec | None:
        if self.uniform_depth is None or self.uniform_width is None:
            return None
        return SubNetworkSpec(self.uniform_depth, self.uniform_width)


@dataclass(eq=False)
class Environment:
    arch: ElasticArch
    server_train: Dataset
    server_test: Dataset
    device_train: list[Dataset]
    device_test: list[Dataset]
    fleet: list[DeviceProfile]


@dataclass(frozen=True)
class ProtocolState:
    model: ElasticModel
    round: int = 0


@dataclass
class DeviceRound:
    device_id: int
    spec: SubNetworkSpec
    q: int
    bytes_down: float
    bytes_up: float
    train_time_s: float
    comm_time_s: float
    received_loss: float


@dataclass
class EvalMetrics:
    global_loss: float
    global_acc: float
    mean_device_acc: float
    device_acc: dict[int, float]
    excluded: list[int] = field(default_factory=list)


@dataclass
class RoundReport:
    round: int
    mode: Mode
    global_loss: float
    global_acc: float
    mean_device_acc: float
    devices: list[DeviceRound]
    participants: list[int]
    quantization_proxy: int
    finetune_proxy: float
    finetuned: bool
    aggregate_digest: str
    final_digest: str
    device_acc: dict[int, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def local_loss_sum(self) -> float:
        return math.fsum(d.received_loss for d in self.devices)

    def row(self) -> dict:
        return {
            "round": self.round,
            "mode": self.mode.value,
            "global_loss": self.global_loss,
            "global_acc": self.global_acc,
            "mean_device_acc": self.mean_device_acc,
            "total_bytes_down": math.fsum(d.bytes_down for d in self.devices),
            "total_bytes_up": math.fsum(d.bytes_up for d in self.devices),
            "max_device_train_time_s": max((d.train_time_s for d in self.devices), default=0.0),
            "comm_time_s": max((d.comm_time_s for d in self.devices), default=0.0),
            "finetune_time_proxy": self.finetune_proxy,
            "local_loss_sum": self.local_loss_sum,
        }


def digest(model: ElasticModel) -> str:
    return hashlib.sha256(model.params.tobytes()).hexdigest()[:16]


# --- server-side training ----------------------------------------------------


def _cycled_batches(data: Dataset, batch_size: int, steps: int, rng):
    done = 0
    while done < steps:
        for batch in data.batches(batch_size, rng):
            yield batch
            done += 1
            if done == steps:
                return


def server_pretrain(
    model: ElasticModel,
    server_data: Dataset,
    epochs: int,
    lr: float,
    batch_size: int,
    rng,
    specs=None,
) -> ElasticModel:
    """Minibatch SGD on server data.

    Each step descends the mean loss of ``specs`` (default: the full model
    only), so every listed sub-network is trained on the shared weights.
    """
    if epochs == 0 or lr == 0:
        return model
    specs = list(specs or [model.arch.full_spec])
    for epoch in range(epochs):
        for batch in server_data.batches(batch_size, rng):
            _, grad = elastic_loss_and_grad(model, specs, batch)
            model = sgd_step(model, grad, lr)
        log.debug("pretrain epoch %d done", epoch)
    return model


def proximal_step(theta, grad, anchor, lr: float, gamma: float):
    """``theta - lr*grad - lr*gamma*(theta - anchor)``."""
    return theta - lr * grad - lr * gamma * (theta - anchor)


def finetune(
    aggregated: ElasticModel,
    server_data: Dataset,
    lr: float,
    gamma: float,
    steps: int,
    batch_size: int,
    rng,
    specs=None,
) -> ElasticModel:
    """Minibatch descent on server loss plus ``gamma/2 * ||theta - aggregated||^2``.

    The server loss is the mean over ``specs`` (default: the full model).
    The anchor stays fixed at ``aggregated`` for all ``steps``.
    """
    if steps == 0 or lr == 0:
        return aggregated
    anchor = aggregated.params
    theta = anchor
    arch = aggregated.arch
    specs = list(specs or [arch.full_spec])
    for batch in _cycled_batches(server_data, batch_size, steps, rng):
        _, grad = elastic_loss_and_grad(ElasticModel(arch, theta), specs, batch)
        theta = proximal_step(theta, grad, anchor, lr, gamma)
    return ElasticModel(arch, theta)


def server_specs(which: str, arch: ElasticArch, assignments=None) -> list[SubNetworkSpec]:
    """Sub-networks whose mean loss the server optimizes."""
    if which == "full":
        return [arch.full_spec]
    if which == "family":
        return family(arch)
    specs = sorted({a.spec for a in (assignments or {}).values()}, key=lambda s: (s.depth, s.width))
    return specs or [arch.full_spec]


def finetune_steps(config: ProtocolConfig, server_size: int) -> int:
    if config.finetune_steps is not None:
        return config.finetune_steps
    return math.ceil(min(config.finetune_samples, server_size) / config.batch_size)


# --- evaluation --------------------------------------------------------------


def device_model(model: ElasticModel, assignment: Assignment, seed: int, round_: int) -> ElasticModel:
    """The shrunk, quantized sub-network a device deploys, stored at its precision class."""
    spec, q = assignment.spec, assignment.q
    rng = stream(seed, "eval", round_, assignment.device_id)
    values = quantize_dequantize(extract(model, spec), q, rng)
    values = round_to_precision(values, precision_class(q))
    return ElasticModel(sub_arch(model.arch, spec), values)


def evaluate(
    state: ProtocolState,
    assignments: dict[int, Assignment],
    env: Environment,
    seed: int,
    loss_specs=None,
) -> EvalMetrics:
    """Device accuracies of deployed sub-networks plus server-side metrics.

    ``global_loss`` is the mean server-data loss over ``loss_specs``
    (default: the full model); ``global_acc`` is the full model's accuracy on
    the server test set.
    """
    model = state.model
    full = model.arch.full_spec
    device_acc: dict[int, float] = {}
    excluded = []
    for u, test in enumerate(env.device_test):
        a = assignments.get(u)
        if a is None:
            excluded.append(u)
            continue
        if len(test) == 0:
            log.error("device %d has no test data; excluded from mean accuracy", u)
            excluded.append(u)
            continue
        deployed = device_model(model, a, seed, state.round)
        device_acc[u] = accuracy(deployed, deployed.arch.full_spec, test)
    mean_acc = float(np.mean(list(device_acc.values()))) if device_acc else float("nan")
    return EvalMetrics(
        global_loss=float(np.mean([loss(model, s, env.server_train) for s in (loss_specs or [full])])),
        global_acc=accuracy(model, full, env.server_test),
        mean_device_acc=mean_acc,
        device_acc=device_acc,
        excluded=excluded,
    )


# --- one round ---------------------------------------------------------------


def sample_devices(seed: int, round_: int, num_devices: int, m: int) -> list[int]:
    rng = stream(seed, "sample", round_)
    return sorted(rng.choice(num_devices, size=m, replace=False).tolist())


def _device_work(args):
    (payload, arch, a, data, config, round_) = args
    rng = stream(config.seed, "local", round_, a.device_id)
    return train_received(
        payload, arch, a.spec, data, config.local_epochs, config.local_lr, config.batch_size, rng
    )


def run_round(
    state: ProtocolState,
    config: ProtocolConfig,
    assignments: dict[int, Assignment],
    env: Environment,
    finetune_data: Dataset | None = None,
) -> tuple[ProtocolState, RoundReport]:
    """Advance ``state`` by one round.  ``finetune_data`` defaults to the server training set."""
    round_ = state.round + 1
    seed = config.seed
    model = state.model
    arch = model.arch
    participants = sample_devices(seed, round_, config.num_devices, config.devices_per_round)

    warnings: list[str] = []
    jobs, active = [], []
    for u in participants:
        a = assignments.get(u)
        if a is None:
            warnings.append(f"device {u} skipped: no feasible assignment")
            continue
        payload = quantize(extract(model, a.spec), a.q, stream(seed, "quant", round_, u))
        jobs.append((payload, arch, a, env.device_train[u], config, round_))
        active.append((u, a, payload))

    if config.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(_device_work, jobs))
    else:
        results = [_device_work(job) for job in jobs]

    updates, devices = [], []
    for (u, a, payload), (values, received_loss) in zip(active, results):
        down_bits = payload_bits(payload)
        if config.uplink_q is not None:
            # stands in for device-side quantization of the upload
            values = quantize_dequantize(values, config.uplink_q, stream(seed, "uplink", round_, u))
            up_bits = payload_bits(quantize(values, config.uplink_q, stream(seed, "uplink", round_, u)))
        else:
            up_bits = 32 * values.size
        updates.append((a.spec, values))
        profile = env.fleet[u]
        devices.append(
            DeviceRound(
                device_id=u,
                spec=a.spec,
                q=a.q,
                bytes_down=down_bits / 8,
                bytes_up=up_bits / 8,
                train_time_s=train_time(
                    arch, a.spec, profile, len(env.device_train[u]), config.local_epochs
                ),
                comm_time_s=round_trip_time(down_bits, up_bits, profile),
                received_loss=received_loss,
            )
        )

    aggregated, _ = aggregate(model, updates)
    data = env.server_train if finetune_data is None else finetune_data
    steps = finetune_steps(config, len(data))
    do_finetune = config.mode is Mode.FEDX
    if do_finetune:
        rng = stream(seed, "finetune", round_)
        sample = data.subset(rng.choice(len(data), size=min(config.finetune_samples, len(data)), replace=False))
        new_model = finetune(
            aggregated,
            sample,
            config.server_lr,
            config.gamma,
            steps,
            config.batch_size,
            rng,
            specs=server_specs(config.finetune_specs, arch, assignments),
        )
    else:
        new_model = aggregated
    new_state = ProtocolState(new_model, round_)

    metrics = evaluate(
        new_state, assignments, env, seed, server_specs(config.finetune_specs, arch, assignments)
    )
    report = RoundReport(
        round=round_,
        mode=config.mode,
        global_loss=metrics.global_loss,
        global_acc=metrics.global_acc,
        mean_device_acc=metrics.mean_device_acc,
        devices=devices,
        participants=participants,
        quantization_proxy=sum(live_indices(arch, a.spec).size for _, a, _ in active),
        finetune_proxy=_finetune_macs(arch, steps, config.batch_size) if do_finetune else 0.0,
        finetuned=do_finetune,
        aggregate_digest=digest(aggregated),
        final_digest=digest(new_model),
        device_acc=metrics.device_acc,
        warnings=warnings,
    )
    return new_state, report


def _finetune_macs(arch: ElasticArch, steps: int, batch_size: int) -> float:
    return 3.0 * flops_forward(arch, arch.full_spec) * steps * batch_size


# --- whole experiment --------------------------------------------------------


@dataclass
class ExperimentResult:
    config: ProtocolConfig
    pretrained: ElasticModel
    state: ProtocolState
    assignments: dict[int, Assignment]
    infeasible: dict[int, str]
    reports: list[RoundReport]


def holdout_split(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Fixed ``(training part, held-out part)`` split of server data."""
    order = stream(seed, "holdout").permutation(len(data))
    n_hold = max(1, int(round(fraction * len(data))))
    return data.subset(np.sort(order[n_hold:])), data.subset(np.sort(order[:n_hold]))


def assign_devices(
    model: ElasticModel,
    env: Environment,
    config: ProtocolConfig,
    holdout: Dataset,
) -> tuple[dict[int, Assignment], dict[int, str]]:
    """Assignments for every device, plus the reasons for those left out.

    Devices of one category share a profile, so selection runs once per
    category on its first device and is copied to the rest.
    """
    arch = model.arch
    assignments: dict[int, Assignment] = {}
    infeasible: dict[int, str] = {}
    if config.mode is Mode.QUANTIZED_FEDAVG_UNIFORM:
        spec = config.uniform_spec or arch.full_spec
        arch.validate(spec)
        for p in env.fleet:
            t = train_time(arch, spec, p, len(env.device_train[p.id]), config.local_epochs)
            assignments[p.id] = Assignment(p.id, spec, config.uniform_q, float("nan"), t)
        return assignments, infeasible

    specs = family(arch)
    by_category: dict[str, Assignment | str] = {}
    for p in env.fleet:
        if p.category not in by_category:
            samples = len(env.device_train[p.id])
            try:
                by_category[p.category] = select(
                    model,
                    specs,
                    p,
                    holdout,
                    config.seed,
                    samples_per_round=samples,
                    epochs=config.local_epochs,
                    acceptable_drop=config.acceptable_drop,
                )
            except InfeasibleDeviceError as exc:
                by_category[p.category] = str(exc)
        chosen = by_category[p.category]
        if isinstance(chosen, str):
            infeasible[p.id] = chosen
        else:
            assignments[p.id] = replace(chosen, device_id=p.id)
    return assignments, infeasible


def run_experiment(
    config: ProtocolConfig,
    env: Environment,
    model: ElasticModel,
    assignments: dict[int, Assignment] | None = None,
    rounds_csv=None,
) -> ExperimentResult:
    """Pretrain, assign, then run ``config.rounds`` rounds.

    ``model`` is the initial global model.  Pass ``assignments`` to bypass
    selection (e.g. fixed sub-network mixes).  When ``rounds_csv`` is given,
    one row per round is appended as soon as the round finishes.
    """
    if len(env.fleet) != config.num_devices or len(env.device_train) != config.num_devices:
        raise ValueError("environment size does not match num_devices")
    server_part, holdout = holdout_split(env.server_train, config.selection_eval_fraction, config.seed)
    pretrained = server_pretrain(
        model,
        server_part,
        config.server_pretrain_epochs,
        config.pretrain_lr,
        config.batch_size,
        stream(config.seed, "pretrain"),
        specs=server_specs(config.pretrain_specs, model.arch),
    )
    infeasible: dict[int, str] = {}
    if assignments is None:
        assignments, infeasible = assign_devices(pretrained, env, config, holdout)
    for u, reason in infeasible.items():
        log.warning("device %d excluded: %s", u, reason)

    state = ProtocolState(pretrained, 0)
    history: list[RoundReport] = []
    writer = reports.RowWriter(rounds_csv, reports.ROUND_FIELDS) if rounds_csv else None
    try:
        for _ in range(config.rounds):
            state, report = run_round(state, config, assignments, env, finetune_data=server_part)
            history.append(report)
            if writer:
                writer.write(report.row())
    finally:
        if writer:
            writer.close()
    return ExperimentResult(config, pretrained, state, assignments, infeasible, history)
