#!/usr/bin/env python3
"""Validation learning curves across seeds: per-seed lines plus the mean
with a shaded 95% band recomputed from the per-seed rows.

Usage:
    figures/learning_curves.py --csv runs/s0/metrics.csv runs/s1/metrics.csv \
        --metric mse --out curves.png
"""

import argparse

from figlib import FigureSpec, plot_metric, sibling_config, split_label


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--csv", nargs="+", required=True, help="per-seed metrics CSVs (label=path allowed)")
    ap.add_argument("--split", default="val")
    ap.add_argument("--metric", default="mse")
    ap.add_argument("--out", required=True)
    ap.add_argument("--title", default="")
    args = ap.parse_args(argv)

    labels, paths = [], []
    for arg in args.csv:
        label, path = split_label(arg)
        if label is None:
            seed = sibling_config(path).get("seed")
            label = f"seed {seed}" if seed is not None else path
        labels.append(label)
        paths.append(path)

    out = plot_metric(
        FigureSpec(
            csv_paths=paths,
            split=args.split,
            metric=args.metric,
            out_path=args.out,
            ylabel=args.metric,
            title=args.title,
            labels=labels,
        )
    )
    print(out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
