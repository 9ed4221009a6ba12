"""CSV emission and parsing.

Floats are written with ``repr`` so reading a file back yields the exact
values that were written.
"""

from __future__ import annotations

import csv
from pathlib import Path

ROUND_FIELDS = {
    "round": int,
    "mode": str,
    "global_loss": float,
    "global_acc": float,
    "mean_device_acc": float,
    "total_bytes_down": float,
    "total_bytes_up": float,
    "max_device_train_time_s": float,
    "comm_time_s": float,
    "finetune_time_proxy": float,
    "local_loss_sum": float,
}

ASSIGNMENT_FIELDS = {
    "device_id": int,
    "depth": int,
    "width": int,
    "q": int,
    "drop": float,
    "time_s": float,
}

SWEEP_FIELDS = {
    "medium_fraction": float,
    "num_medium": int,
    "mean_device_acc": float,
    "global_acc": float,
}

COMPARISON_FIELDS = {
    "round": int,
    "mode": str,
    "mean_device_acc": float,
    "global_acc": float,
}

CODEC_FIELDS = {
    "q": int,
    "n": int,
    "bits": int,
    "bits_per_coord": float,
    "compression_ratio": float,
}

CONVERGENCE_FIELDS = {
    "steps": int,
    "mean_gap": float,
    "envelope": float,
}


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RowWriter:
    def __init__(self, path, fields: dict):
        self._fh = open(path, "w", newline="")
        self._fields = list(fields)
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self._fields)

    def write(self, row: dict) -> None:
        self._writer.writerow([_fmt(row[k]) for k in self._fields])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def write_rows(path, fields: dict, rows) -> Path:
    writer = RowWriter(path, fields)
    try:
        for row in rows:
            writer.write(row)
    finally:
        writer.close()
    return Path(path)


def read_rows(path, fields: dict) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(fields):
            raise ValueError(f"{path}: columns {reader.fieldnames} != {list(fields)}")
        return [{k: fields[k](v) for k, v in row.items()} for row in reader]
