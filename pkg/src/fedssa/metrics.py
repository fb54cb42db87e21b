"""Accuracy, communication and FLOP accounting, and result files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FedSSAError
from .models import LocalModel, forward

CSV_FIELDS = ("round", "client_id", "accuracy", "mean_accuracy", "uplink_params",
              "downlink_params", "cum_params", "flops", "cum_flops", "wall_ms")

MEAN_ROW_ID = -1


@dataclass
class RoundRecord:
    round: int
    accuracies: list[float | None]
    mean_accuracy: float
    uplink_params: int = 0
    downlink_params: int = 0
    cum_params: int = 0
    flops: int = 0
    cum_flops: int = 0
    wall_ms: int = 0
    sampled: list[int] = field(default_factory=list)
    train_loss: float | None = None
    skipped: list[int] = field(default_factory=list)

    @property
    def params(self) -> int:
        return self.uplink_params + self.downlink_params


def evaluate_client(model: LocalModel, features: np.ndarray, labels: np.ndarray) -> float | None:
    """Argmax accuracy; ``None`` marks an empty split."""
    if len(labels) == 0:
        return None
    _, logits = forward(model, features)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def mean_accuracy(accuracies: Iterable[float | None]) -> float:
    defined = [a for a in accuracies if a is not None]
    if not defined:
        return math.nan
    return sum(defined) / len(defined)


def flops_estimate(model: LocalModel, n_samples: int, epochs: int = 1,
                   mode: str = "train") -> int:
    """Dense-layer FLOPs: 2*in*out per sample forward; training is 3x forward."""
    per_sample = sum(2 * W.shape[0] * W.shape[1] for W, _ in model.layers)
    factor = {"train": 3 * epochs, "infer": 1}[mode]
    return per_sample * n_samples * factor


def fusion_flops(n_scalars: int) -> int:
    return 2 * n_scalars


class TargetTracker:
    """Latches the first round whose mean accuracy reaches ``target``."""

    def __init__(self, target: float):
        self.target = target
        self.round: int | None = None
        self.params: int | None = None
        self.flops: int | None = None

    @property
    def reached(self) -> bool:
        return self.round is not None

    def update(self, record: RoundRecord) -> bool:
        if not self.reached and record.mean_accuracy >= self.target:
            self.round = record.round
            self.params = record.cum_params
            self.flops = record.cum_flops
            return True
        return False


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def record_rows(records: Sequence[RoundRecord]) -> list[dict]:
    rows = []
    for r in records:
        shared = {"mean_accuracy": r.mean_accuracy, "uplink_params": r.uplink_params,
                  "downlink_params": r.downlink_params, "cum_params": r.cum_params,
                  "flops": r.flops, "cum_flops": r.cum_flops, "wall_ms": r.wall_ms}
        for k, acc in enumerate(r.accuracies):
            rows.append({"round": r.round, "client_id": k, "accuracy": acc, **shared})
        rows.append({"round": r.round, "client_id": MEAN_ROW_ID,
                     "accuracy": r.mean_accuracy, **shared})
    return rows


def emit(records: Sequence[RoundRecord], path: str | Path, fmt: str = "csv") -> Path:
    path = Path(path)
    rows = record_rows(records)
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(CSV_FIELDS)
                for row in rows:
                    writer.writerow([_fmt(row[f]) for f in CSV_FIELDS])
        elif fmt == "json":
            path.write_text(json.dumps({"fields": list(CSV_FIELDS), "rows": rows}, indent=1))
        else:
            raise ValueError(f"unknown format {fmt!r}")
    except OSError as exc:
        raise FedSSAError(f"cannot write {path}: {exc}") from exc
    return path


def load_rows(path: str | Path) -> list[dict]:
    """Read back an emitted CSV or JSON file as a list of row dicts."""
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())["rows"]
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for key, val in row.items():
                if val == "":
                    parsed[key] = None
                elif key in ("accuracy", "mean_accuracy"):
                    parsed[key] = float(val)
                else:
                    parsed[key] = int(val)
            out.append(parsed)
    return out


def records_to_json(records: Sequence[RoundRecord]) -> list[dict]:
    return [asdict(r) for r in records]
