"""Round reports and their CSV/JSON serialization.

One CSV row per communication round plus a round-0 row for the warm
start; a JSON summary carries the headline numbers and echoes the full
config so a run can be reproduced from its output directory alone.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import FedConfig
from .errors import ConfigError

# reference size of the full vision backbone the head replaces
FULL_MODEL_PARAMS = 88_800_000


@dataclass
class RoundReport:
    """Everything measured about one communication round."""

    round_index: int
    participants: list[int]
    accuracy: float
    per_class: np.ndarray
    loss: float
    bytes_up: int
    bytes_down: int
    wall_time: float = 0.0

    def __post_init__(self) -> None:
        self.per_class = np.asarray(self.per_class, dtype=np.float64)
        if self.per_class.size and (self.per_class.min() < 0.0
                                    or self.per_class.max() > 1.0):
            raise ConfigError("per-class accuracies must lie in [0, 1]")


@dataclass
class PulseEvent:
    """A server fine-tune pulse: accuracy right before and right after."""

    round_index: int
    acc_before: float
    acc_after: float


def _csv_header(n_classes: int) -> list[str]:
    return (["round", "participants", "accuracy", "loss",
             "bytes_up", "bytes_down"]
            + [f"acc_class_{c}" for c in range(n_classes)])


def write_metrics_csv(reports: Sequence[RoundReport], path: str | Path,
                      n_classes: int) -> None:
    """One row per report; class columns are sized to the final registry.

    Rows recorded before a classifier expansion have fewer per-class
    entries than the final model; the missing trailing cells stay empty.
    """
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_csv_header(n_classes))
        for r in reports:
            cells = [str(r.round_index),
                     "|".join(str(c) for c in r.participants),
                     f"{r.accuracy:.6f}",
                     f"{r.loss:.6f}",
                     str(r.bytes_up),
                     str(r.bytes_down)]
            cells += [f"{a:.6f}" for a in r.per_class]
            cells += [""] * (n_classes - r.per_class.size)
            writer.writerow(cells)


def read_metrics_csv(path: str | Path) -> list[dict]:
    """Parse a metrics CSV back into one dict per round."""
    rows = []
    with open(path, newline="") as f:
        for raw in csv.DictReader(f):
            class_cols = sorted(
                (k for k in raw if k.startswith("acc_class_")),
                key=lambda k: int(k.rsplit("_", 1)[1]))
            rows.append({
                "round": int(raw["round"]),
                "participants": [int(c) for c in raw["participants"].split("|")
                                 if c != ""],
                "accuracy": float(raw["accuracy"]),
                "loss": float(raw["loss"]),
                "bytes_up": int(raw["bytes_up"]),
                "bytes_down": int(raw["bytes_down"]),
                "per_class": [float(raw[k]) for k in class_cols
                              if raw[k] != ""],
            })
    return rows


def summarize(reports: Sequence[RoundReport], cfg: FedConfig,
              param_count: int, pulses: Sequence[PulseEvent] = (),
              join: dict | None = None) -> dict:
    accuracies = [r.accuracy for r in reports]
    summary = {
        "final_accuracy": accuracies[-1] if accuracies else 0.0,
        "best_accuracy": max(accuracies) if accuracies else 0.0,
        "total_bytes": int(sum(r.bytes_up + r.bytes_down for r in reports)),
        "param_count": int(param_count),
        "head_fraction_of_full_model": param_count / FULL_MODEL_PARAMS,
        "rounds_reported": len(reports),
        "config": cfg.to_dict(),
    }
    if pulses:
        summary["pulses"] = [
            {"round": p.round_index, "acc_before": p.acc_before,
             "acc_after": p.acc_after}
            for p in pulses
        ]
    if join is not None:
        summary["join"] = join
    return summary


def emit_metrics(reports: Sequence[RoundReport], out_dir: str | Path,
                 cfg: FedConfig, param_count: int, n_classes: int,
                 pulses: Sequence[PulseEvent] = (),
                 join: dict | None = None) -> tuple[Path, Path]:
    """Write metrics.csv and summary.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    json_path = out / "summary.json"
    write_metrics_csv(reports, csv_path, n_classes)
    summary = summarize(reports, cfg, param_count, pulses=pulses, join=join)
    json_path.write_text(json.dumps(summary, indent=2) + "\n")
    return csv_path, json_path
