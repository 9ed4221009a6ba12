"""Elastic residual MLP with width/depth slicing, manual backprop and SGD.

Architecture (all sizes at full scale)::

    h0 = relu(W_in x + b_in)                      W_in: max_width x input_dim
    h  = h + relu(W h + b)   for each hidden layer  W: max_width x max_width
    logits = W_out h + b_out                      W_out: output_dim x max_width

A sub-network ``(depth, width)`` keeps the first ``depth`` hidden layers of
every block and the leading ``width`` units of every hidden representation.
Skipped layers are residual, so dropping them is the identity.

Parameters live in one flat float64 vector.  The canonical layout is tensor
by tensor in the order ``in.W, in.b, block0.layer0.W, block0.layer0.b, ...,
out.W, out.b``; each matrix is stored row-major.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .rng import stream


class InvalidSpecError(ValueError):
    """A sub-network spec is not part of the architecture's family."""


class NumericOverflowError(FloatingPointError):
    pass


class EmptyDataError(ValueError):
    pass


@dataclass(frozen=True)
class SubNetworkSpec:
    """Coordinates ``(depth, width)`` of one nested sub-network."""

    depth: int
    width: int

    def contained_in(self, other: SubNetworkSpec) -> bool:
        return self.depth <= other.depth and self.width <= other.width

    def __str__(self) -> str:
        return f"d{self.depth}w{self.width}"


@dataclass(frozen=True)
class TensorSlot:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ElasticArch:
    input_dim: int
    output_dim: int
    num_blocks: int
    max_depth_per_block: int
    max_width: int
    allowed_depths: tuple[int, ...] = ()
    allowed_widths: tuple[int, ...] = ()

    def __post_init__(self):
        depths = tuple(self.allowed_depths) or (self.max_depth_per_block,)
        widths = tuple(self.allowed_widths) or (self.max_width,)
        object.__setattr__(self, "allowed_depths", depths)
        object.__setattr__(self, "allowed_widths", widths)
        for name in ("input_dim", "output_dim", "num_blocks", "max_depth_per_block", "max_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name, values, top in (
            ("allowed_depths", depths, self.max_depth_per_block),
            ("allowed_widths", widths, self.max_width),
        ):
            if any(v < 1 for v in values) or any(b <= a for a, b in zip(values, values[1:])):
                raise ValueError(f"{name} must be strictly increasing positive integers")
            if values[-1] != top:
                raise ValueError(f"max of {name} must equal {top}")

    @property
    def full_spec(self) -> SubNetworkSpec:
        return SubNetworkSpec(self.max_depth_per_block, self.max_width)

    @cached_property
    def layout(self) -> tuple[TensorSlot, ...]:
        shapes: list[tuple[str, tuple[int, ...]]] = [
            ("in.W", (self.max_width, self.input_dim)),
            ("in.b", (self.max_width,)),
        ]
        for b in range(self.num_blocks):
            for l in range(self.max_depth_per_block):
                shapes.append((f"block{b}.layer{l}.W", (self.max_width, self.max_width)))
                shapes.append((f"block{b}.layer{l}.b", (self.max_width,)))
        shapes.append(("out.W", (self.output_dim, self.max_width)))
        shapes.append(("out.b", (self.output_dim,)))
        slots, offset = [], 0
        for name, shape in shapes:
            slot = TensorSlot(name, shape, offset)
            slots.append(slot)
            offset += slot.size
        return tuple(slots)

    @property
    def param_count(self) -> int:
        return sub_param_count(self, self.full_spec)

    def validate(self, spec: SubNetworkSpec) -> None:
        if spec.depth not in self.allowed_depths or spec.width not in self.allowed_widths:
            raise InvalidSpecError(
                f"{spec} not in depths {self.allowed_depths} x widths {self.allowed_widths}"
            )


def sub_param_count(arch: ElasticArch, spec: SubNetworkSpec) -> int:
    """Analytic parameter count of the ``spec`` slice."""
    w, d = spec.width, spec.depth
    hidden = arch.num_blocks * d * (w * w + w)
    return w * arch.input_dim + w + hidden + arch.output_dim * w + arch.output_dim


@dataclass(frozen=True, eq=False)
class ElasticModel:
    arch: ElasticArch
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float64)
        if params.shape != (self.arch.param_count,):
            raise ValueError(
                f"params has shape {params.shape}, arch needs ({self.arch.param_count},)"
            )
        object.__setattr__(self, "params", params)

    @property
    def param_count(self) -> int:
        return self.params.size

    def tensors(self) -> dict[str, np.ndarray]:
        return tensor_views(self.arch, self.params)


def tensor_views(arch: ElasticArch, flat: np.ndarray) -> dict[str, np.ndarray]:
    return {
        s.name: flat[s.offset : s.offset + s.size].reshape(s.shape) for s in arch.layout
    }


def init_model(arch: ElasticArch, seed: int) -> ElasticModel:
    """He-normal weights (fan-in at full size), zero biases; one stream per tensor."""
    params = np.zeros(arch.param_count)
    for i, slot in enumerate(arch.layout):
        if slot.name.endswith(".b"):
            continue
        fan_in = slot.shape[1]
        values = stream(seed, "init", i).normal(0.0, np.sqrt(2.0 / fan_in), slot.shape)
        params[slot.offset : slot.offset + slot.size] = values.ravel()
    return ElasticModel(arch, params)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Inputs ``x`` (n x input_dim) and integer labels ``y``; also used as a batch."""

    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"bad dataset shapes x={x.shape} y={y.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.size

    def subset(self, idx) -> Dataset:
        return Dataset(self.x[idx], self.y[idx])

    def concat(self, other: Dataset) -> Dataset:
        return Dataset(np.vstack([self.x, other.x]), np.concatenate([self.y, other.y]))

    def batches(self, batch_size: int, rng: np.random.Generator):
        """One shuffled pass over the data."""
        order = rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield self.subset(order[start : start + batch_size])


Batch = Dataset


def _check_batch(arch: ElasticArch, batch: Dataset) -> None:
    if len(batch) == 0:
        raise EmptyDataError("batch is empty")
    if batch.x.shape[1] != arch.input_dim:
        raise ValueError(f"inputs have dim {batch.x.shape[1]}, arch expects {arch.input_dim}")
    if batch.y.min() < 0 or batch.y.max() >= arch.output_dim:
        raise ValueError("label out of range")


def forward(model: ElasticModel, spec: SubNetworkSpec, batch: Dataset):
    """Return ``(logits, cache)`` for the ``spec`` slice of ``model``."""
    arch = model.arch
    arch.validate(spec)
    _check_batch(arch, batch)
    with np.errstate(over="ignore", invalid="ignore"):
        logits, cache = _forward(arch, model.tensors(), spec, batch.x)
    if not np.all(np.isfinite(logits)):
        raise NumericOverflowError("non-finite activations in forward pass")
    return logits, cache


def _forward(arch, t, spec, x):
    w = spec.width
    z_in = x @ t["in.W"][:w].T + t["in.b"][:w]
    h = np.maximum(z_in, 0.0)
    layers = []
    for b in range(arch.num_blocks):
        for l in range(spec.depth):
            W = t[f"block{b}.layer{l}.W"][:w, :w]
            z = h @ W.T + t[f"block{b}.layer{l}.b"][:w]
            layers.append((b, l, h, z))
            h = h + np.maximum(z, 0.0)
    logits = h @ t["out.W"][:, :w].T + t["out.b"]
    return logits, (spec, x, z_in, layers, h)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_norm[:, None]
    loss = -log_probs[np.arange(labels.size), labels].mean()
    return float(loss), np.exp(log_probs)


def loss(model: ElasticModel, spec: SubNetworkSpec, batch: Dataset) -> float:
    logits, _ = forward(model, spec, batch)
    return _cross_entropy(logits, batch.y)[0]


def loss_and_grad(model: ElasticModel, spec: SubNetworkSpec, batch: Dataset):
    """Mean softmax cross-entropy and its gradient over the full parameter vector.

    Entries of the gradient outside the ``spec`` slice are exactly zero.
    """
    logits, (spec, x, z_in, layers, h) = forward(model, spec, batch)
    value, probs = _cross_entropy(logits, batch.y)
    n = batch.y.size
    dlogits = probs
    dlogits[np.arange(n), batch.y] -= 1.0
    dlogits /= n

    w = spec.width
    t = model.tensors()
    grad = np.zeros_like(model.params)
    g = tensor_views(model.arch, grad)

    g["out.W"][:, :w] = dlogits.T @ h
    g["out.b"][:] = dlogits.sum(axis=0)
    dh = dlogits @ t["out.W"][:, :w]
    for b, l, h_in, z in reversed(layers):
        dz = dh * (z > 0)
        g[f"block{b}.layer{l}.W"][:w, :w] = dz.T @ h_in
        g[f"block{b}.layer{l}.b"][:w] = dz.sum(axis=0)
        dh = dh + dz @ t[f"block{b}.layer{l}.W"][:w, :w]
    dz = dh * (z_in > 0)
    g["in.W"][:w] = dz.T @ x
    g["in.b"][:w] = dz.sum(axis=0)
    if not np.all(np.isfinite(grad)):
        raise NumericOverflowError("non-finite gradient")
    return value, grad


def elastic_loss_and_grad(model: ElasticModel, specs, batch: Dataset):
    """Mean loss and gradient over several sub-networks sharing ``model``'s weights."""
    specs = list(specs)
    total, grad = 0.0, np.zeros_like(model.params)
    for spec in specs:
        value, g = loss_and_grad(model, spec, batch)
        total += value
        grad += g
    return total / len(specs), grad / len(specs)


def sgd_step(model: ElasticModel, grad: np.ndarray, lr: float) -> ElasticModel:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    return ElasticModel(model.arch, model.params - lr * grad)


def predict(model: ElasticModel, spec: SubNetworkSpec, data: Dataset) -> np.ndarray:
    logits, _ = forward(model, spec, data)
    return np.argmax(logits, axis=1)  # first maximum wins ties


def accuracy(model: ElasticModel, spec: SubNetworkSpec, data: Dataset) -> float:
    if len(data) == 0:
        raise EmptyDataError("cannot compute accuracy on an empty dataset")
    return float(np.mean(predict(model, spec, data) == data.y))
