"""Per-epoch metrics records and their append-only CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

CSV_FIELDS = ("epoch", "split", "cls_loss", "aux_loss", "total_loss", "accuracy", "flip_rate", "lr", "wall_seconds")


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    cls_loss: float
    aux_loss: float
    total_loss: float
    accuracy: float
    flip_rate: float
    lr: float
    wall_seconds: float
    flip_rate_pretrain: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if not 0.0 <= self.flip_rate <= 1.0:
            raise ValueError(f"flip_rate {self.flip_rate} outside [0, 1]")


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, int):
        return str(value)
    return format(float(value), ".6g")


def write_metrics(record: MetricsRecord, path) -> None:
    """Append one row, writing the header first if the file is new or empty.

    The ``flip_rate_pretrain`` column is only present in files whose first
    record carries it.
    """
    path = Path(path)
    cols = list(CSV_FIELDS)
    new = not path.exists() or path.stat().st_size == 0
    if new:
        if record.flip_rate_pretrain is not None:
            cols.append("flip_rate_pretrain")
    else:
        with open(path, newline="") as f:
            cols = next(csv.reader(f))
    with open(path, "a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(cols)
        w.writerow([_fmt(getattr(record, c)) for c in cols])


def read_metrics(path) -> list[MetricsRecord]:
    types = {f.name: f.type for f in fields(MetricsRecord)}
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            kw = {}
            for k, v in row.items():
                if k == "split":
                    kw[k] = v
                elif k == "epoch":
                    kw[k] = int(v)
                elif k in types:
                    kw[k] = float(v)
            out.append(MetricsRecord(**kw))
    return out
