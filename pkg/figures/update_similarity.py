#!/usr/bin/env python3
"""Cosine similarity (and Euclidean distance) between the learned output-layer
update direction and gradient-descent / prototype directions over training
time, averaged across seeds with shaded 95% bands.

Input CSVs are runs trained with analyze_updates=true, which log the
comparison under split 'analysis'.

Usage:
    figures/update_similarity.py --csv runs/s0/metrics.csv runs/s1/metrics.csv \
        --kind cosine --out similarity.png
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from figlib import band_stats, curve, draw_band, read_metrics, split_label

KINDS = {
    "cosine": ("cos_op_gd", "cos_op_proto", "cosine similarity"),
    "euclid": ("euclid_op_gd", "euclid_op_proto", "Euclidean distance"),
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--csv", nargs="+", required=True)
    ap.add_argument("--kind", choices=sorted(KINDS), default="cosine")
    ap.add_argument("--out", required=True)
    ap.add_argument("--title", default="")
    args = ap.parse_args(argv)

    metric_gd, metric_proto, ylabel = KINDS[args.kind]
    fig, ax = plt.subplots(figsize=(6, 4))
    for metric, label in ((metric_gd, "vs gradient descent"), (metric_proto, "vs prototypes")):
        xs_ref, per_seed = None, []
        for arg in args.csv:
            _, path = split_label(arg)
            xs, ys = curve(read_metrics(path), "analysis", metric)
            if xs_ref is None:
                xs_ref = xs
            elif not np.array_equal(xs, xs_ref):
                raise ValueError(f"{path}: analysis grid differs between seeds")
            per_seed.append(ys)
        mean, hw = band_stats(per_seed)
        draw_band(ax, xs_ref, mean, hw, label=label)
    ax.set_xlabel("meta-iteration")
    ax.set_ylabel(ylabel)
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
