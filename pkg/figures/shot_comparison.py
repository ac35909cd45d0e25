#!/usr/bin/env python3
"""Final test performance versus support-set size, one line per ingestion
mode, with 95% bands over the per-seed run means.

Each input CSV is the metrics file of one finished run.  Grouping keys
(ingestion mode and shot count) come from the config.txt the harness leaves
next to each metrics file, or from an explicit 'mode:shots=path' label.

Usage:
    figures/shot_comparison.py --csv runs/seq_k5_s*/metrics.csv \
        runs/batch_k5_s*/metrics.csv ... --metric mse --out shots.png
"""

import argparse
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from figlib import band_stats, draw_band, read_metrics, sibling_config, split_label


def final_test_value(path: str, metric: str) -> float:
    rows = [r for r in read_metrics(path) if r["split"] == "test" and r["metric"] == metric]
    if not rows:
        raise ValueError(f"{path}: no test rows for metric '{metric}'")
    return rows[-1]["mean"]


def group_of(arg: str) -> tuple[str, int, str]:
    label, path = split_label(arg)
    if label is not None:
        mode, shots = label.split(":", 1)
        return mode, int(shots), path
    cfg = sibling_config(path)
    if "ingestion" not in cfg or "shots" not in cfg:
        raise ValueError(f"{path}: no config.txt nearby; pass an explicit mode:shots=path label")
    return cfg["ingestion"], int(cfg["shots"]), path


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--csv", nargs="+", required=True)
    ap.add_argument("--metric", default="mse")
    ap.add_argument("--out", required=True)
    ap.add_argument("--title", default="")
    args = ap.parse_args(argv)

    groups: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for arg in args.csv:
        mode, shots, path = group_of(arg)
        groups[mode][shots].append(final_test_value(path, args.metric))

    fig, ax = plt.subplots(figsize=(6, 4))
    for mode in sorted(groups):
        shots = sorted(groups[mode])
        means, hws = [], []
        for k in shots:
            m, hw = band_stats([np.asarray([v]) for v in groups[mode][k]])
            means.append(float(m[0]))
            hws.append(float(hw[0]))
        draw_band(ax, np.asarray(shots), np.asarray(means), np.asarray(hws), label=mode)
    ax.set_xlabel("support examples per task")
    ax.set_ylabel(args.metric)
    ax.set_xticks(sorted({k for g in groups.values() for k in g}))
    if args.title:
        ax.set_title(args.title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120, metadata={"Software": None})
    plt.close(fig)
    print(args.out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
