"""Append-only metrics log with a fixed CSV schema."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

CSV_HEADER = ["iteration", "split", "metric", "mean", "ci95", "seconds"]


@dataclass
class MetricRow:
    iteration: int
    split: str
    metric: str
    mean: float
    ci95: float
    seconds: float


class MetricsLog:
    """Per-iteration rows; iterations must not decrease within a split."""

    def __init__(self):
        self.rows: list[MetricRow] = []
        self._last_iter: dict[str, int] = {}

    def append(self, iteration: int, split: str, metric: str, mean: float,
               ci95: float, seconds: float) -> None:
        last = self._last_iter.get(split)
        if last is not None and iteration < last:
            raise ValueError(f"iteration {iteration} < {last} within split '{split}'")
        self._last_iter[split] = iteration
        self.rows.append(MetricRow(iteration, split, metric, float(mean), float(ci95), float(seconds)))

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for r in self.rows:
                writer.writerow([r.iteration, r.split, r.metric,
                                 repr(r.mean), repr(r.ci95), f"{r.seconds:.3f}"])

    @staticmethod
    def read_csv(path: str) -> "MetricsLog":
        log = MetricsLog()
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != CSV_HEADER:
                raise ValueError(f"unexpected CSV header {header}")
            for row in reader:
                log.append(int(row[0]), row[1], row[2], float(row[3]), float(row[4]), float(row[5]))
        return log


def mean_ci95(values) -> tuple[float, float]:
    """Sample mean and 1.96 * sample stddev / sqrt(n)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        return float(arr.mean()) if arr.size else float("nan"), 0.0
    return float(arr.mean()), float(1.96 * arr.std(ddof=1) / np.sqrt(arr.size))
