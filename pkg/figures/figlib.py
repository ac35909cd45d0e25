"""Shared plotting helpers for the analysis figures.

These scripts only aggregate rows already logged by the training harness
(CSV schema: iteration,split,metric,mean,ci95,seconds); nothing is ever
recomputed from model state.  Shaded bands are 95% confidence intervals
over per-seed values, recomputed here from the raw per-seed rows.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

CSV_HEADER = ["iteration", "split", "metric", "mean", "ci95", "seconds"]


@dataclass
class FigureSpec:
    csv_paths: list[str]
    split: str
    metric: str
    out_path: str
    xlabel: str = "meta-iteration"
    ylabel: str = ""
    title: str = ""
    labels: list[str] = field(default_factory=list)  # one per csv, optional


def read_metrics(path: str) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: expected header {CSV_HEADER}, got {header}")
        rows = []
        for raw in reader:
            rows.append(
                {
                    "iteration": int(raw[0]),
                    "split": raw[1],
                    "metric": raw[2],
                    "mean": float(raw[3]),
                    "ci95": float(raw[4]),
                    "seconds": float(raw[5]),
                }
            )
    return rows


def sibling_config(csv_path: str) -> dict[str, str]:
    """key=value pairs from the config.txt the harness writes next to its
    metrics file; empty when absent."""
    path = os.path.join(os.path.dirname(csv_path), "config.txt")
    if not os.path.exists(path):
        return {}
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if "=" in line:
                k, v = (p.strip() for p in line.split("=", 1))
                out[k] = v
    return out


def split_label(arg: str) -> tuple[str | None, str]:
    """Parse 'label=path' (label may be omitted)."""
    if "=" in arg and not os.path.exists(arg):
        label, path = arg.split("=", 1)
        return label, path
    return None, arg


def curve(rows: list[dict], split: str, metric: str) -> tuple[np.ndarray, np.ndarray]:
    pts = [(r["iteration"], r["mean"]) for r in rows if r["split"] == split and r["metric"] == metric]
    if not pts:
        raise ValueError(f"no rows for split='{split}' metric='{metric}'")
    pts.sort()
    xs, ys = zip(*pts)
    return np.asarray(xs), np.asarray(ys)


def band_stats(per_seed: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Mean and 95% CI half-width across seeds, per x position."""
    stacked = np.stack(per_seed)
    mean = stacked.mean(axis=0)
    n = stacked.shape[0]
    if n < 2:
        return mean, np.zeros_like(mean)
    hw = 1.96 * stacked.std(axis=0, ddof=1) / np.sqrt(n)
    return mean, hw


def draw_band(ax, x, mean, hw, label: str, color=None):
    (line,) = ax.plot(x, mean, label=label, color=color)
    ax.fill_between(x, mean - hw, mean + hw, alpha=0.25, color=line.get_color(), linewidth=0)
    return line


def plot_metric(spec: FigureSpec) -> str:
    """One group of per-seed CSVs: mean line, shaded 95% band, faint
    per-seed curves.  Deterministic for fixed inputs."""
    if not spec.csv_paths:
        raise ValueError("no input CSVs")
    per_seed = []
    xs_ref = None
    for path in spec.csv_paths:
        xs, ys = curve(read_metrics(path), spec.split, spec.metric)
        if xs_ref is None:
            xs_ref = xs
        elif not np.array_equal(xs, xs_ref):
            raise ValueError(f"{path}: iteration grid differs from the first CSV")
        per_seed.append(ys)
    mean, hw = band_stats(per_seed)

    fig, ax = plt.subplots(figsize=(6, 4))
    for i, ys in enumerate(per_seed):
        label = spec.labels[i] if i < len(spec.labels) else f"seed {i}"
        ax.plot(xs_ref, ys, alpha=0.4, linewidth=0.8, label=label)
    draw_band(ax, xs_ref, mean, hw, label="mean")
    ax.set_xlabel(spec.xlabel)
    ax.set_ylabel(spec.ylabel or spec.metric)
    if spec.title:
        ax.set_title(spec.title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(spec.out_path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return spec.out_path
