"""Nested sub-network family, extraction/embedding and masked averaging."""

from __future__ import annotations

import csv
import math
from functools import lru_cache

import numpy as np

from .nn import ElasticArch, ElasticModel, InvalidSpecError, SubNetworkSpec, sub_param_count

__all__ = [
    "SubNetworkSpec",
    "InvalidSpecError",
    "family",
    "live_indices",
    "index_mask",
    "sub_arch",
    "extract",
    "embed",
    "shrink",
    "aggregate",
    "write_mask_csv",
]


def family(arch: ElasticArch) -> list[SubNetworkSpec]:
    """Every (depth, width) pair of the architecture, sorted ascending."""
    return [SubNetworkSpec(d, w) for d in arch.allowed_depths for w in arch.allowed_widths]


@lru_cache(maxsize=256)
def _live(arch: ElasticArch, spec: SubNetworkSpec) -> np.ndarray:
    arch.validate(spec)
    w, d = spec.width, spec.depth
    parts = []
    for slot in arch.layout:
        block = np.arange(slot.offset, slot.offset + slot.size).reshape(slot.shape)
        name = slot.name
        if name.startswith("block"):
            layer = int(name.split(".")[1][len("layer"):])
            if layer >= d:
                continue
            block = block[:w, :w] if name.endswith(".W") else block[:w]
        elif name.startswith("in."):
            block = block[:w]
        elif name == "out.W":
            block = block[:, :w]
        parts.append(block.ravel())
    idx = np.concatenate(parts)
    idx.setflags(write=False)
    return idx


def live_indices(arch: ElasticArch, spec: SubNetworkSpec) -> np.ndarray:
    """Global parameter indices used by ``spec``, in canonical (ascending) order."""
    return _live(arch, spec)


def index_mask(arch: ElasticArch, spec: SubNetworkSpec) -> np.ndarray:
    mask = np.zeros(arch.param_count, dtype=bool)
    mask[live_indices(arch, spec)] = True
    return mask


def sub_arch(arch: ElasticArch, spec: SubNetworkSpec) -> ElasticArch:
    """The stand-alone architecture of the ``spec`` slice.

    Its canonical layout lists parameters in the same order as
    :func:`extract`, so ``ElasticModel(sub_arch(a, s), extract(m, s))`` is the
    physically shrunk sub-network.
    """
    arch.validate(spec)
    return ElasticArch(
        input_dim=arch.input_dim,
        output_dim=arch.output_dim,
        num_blocks=arch.num_blocks,
        max_depth_per_block=spec.depth,
        max_width=spec.width,
        allowed_depths=tuple(d for d in arch.allowed_depths if d <= spec.depth),
        allowed_widths=tuple(w for w in arch.allowed_widths if w <= spec.width),
    )


def extract(model: ElasticModel, spec: SubNetworkSpec) -> np.ndarray:
    return model.params[live_indices(model.arch, spec)].copy()


def shrink(model: ElasticModel, spec: SubNetworkSpec) -> ElasticModel:
    return ElasticModel(sub_arch(model.arch, spec), extract(model, spec))


def embed(base: ElasticModel, spec: SubNetworkSpec, values) -> ElasticModel:
    """Copy of ``base`` with the ``spec`` slice overwritten by ``values``."""
    idx = live_indices(base.arch, spec)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != idx.shape:
        raise ValueError(f"{spec} needs {idx.size} values, got {values.shape}")
    params = base.params.copy()
    params[idx] = values
    return ElasticModel(base.arch, params)


def aggregate(global_model: ElasticModel, updates):
    """Masked FedAvg over sub-network updates.

    ``updates`` is a sequence of ``(spec, values)``.  Each parameter becomes
    the mean of the updates that cover it; parameters no update covers keep
    their value.  Sums are exactly rounded (``math.fsum``), so the result does
    not depend on the order of ``updates``.

    Returns ``(model, counts)`` where ``counts`` is the per-parameter number of
    contributing updates.
    """
    arch = global_model.arch
    size = arch.param_count
    counts = np.zeros(size, dtype=np.int64)
    stacked = np.zeros((len(updates), size))
    for k, (spec, values) in enumerate(updates):
        idx = live_indices(arch, spec)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != idx.shape:
            raise ValueError(
                f"update {k} for {spec} has {values.size} values, expected {idx.size}"
            )
        stacked[k, idx] = values
        counts[idx] += 1

    params = global_model.params.copy()
    single = counts == 1
    params[single] = stacked[:, single].sum(axis=0)  # one nonzero term per column: exact
    multi = np.flatnonzero(counts > 1)
    if multi.size:
        sums = np.array([math.fsum(col) for col in stacked[:, multi].T.tolist()])
        params[multi] = sums / counts[multi]
    return ElasticModel(arch, params), counts


def write_mask_csv(path, arch: ElasticArch, counts) -> None:
    """Dump an aggregation mask as ``index,tensor,row,col,count`` rows."""
    counts = np.asarray(counts)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "tensor", "row", "col", "count"])
        for slot in arch.layout:
            for local in range(slot.size):
                if len(slot.shape) == 2:
                    row, col = divmod(local, slot.shape[1])
                else:
                    row, col = local, 0
                i = slot.offset + local
                writer.writerow([i, slot.name, row, col, int(counts[i])])


def nested(arch: ElasticArch, small: SubNetworkSpec, large: SubNetworkSpec) -> bool:
    """True when every parameter of ``small`` is also a parameter of ``large``."""
    return bool(np.isin(live_indices(arch, small), live_indices(arch, large)).all())


def sub_count(arch: ElasticArch, spec: SubNetworkSpec) -> int:
    return sub_param_count(arch, spec)
