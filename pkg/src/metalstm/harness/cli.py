"""Command-line front end: train, eval, analyze-updates, sweep."""

from __future__ import annotations

import argparse
import itertools
import os
import sys

import numpy as np

from metalstm.harness import checkpoint as ckpt
from metalstm.harness.analysis import update_direction_analysis
from metalstm.harness.config import load_config, parse_config_text
from metalstm.harness.metrics import MetricsLog
from metalstm.harness.train import evaluate_checkpoint, load_run, meta_train


def _train(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    cfg = load_config(args.config, overrides)
    result = meta_train(cfg, resume_from=args.resume, force_resume=args.force)
    print(f"best {cfg.eval_metric} = {result.best_metric:.5f} "
          f"(iteration {result.best_iteration})")
    for name, (mean, ci) in sorted(result.test_metrics.items()):
        print(f"test {name} = {mean:.5f} +- {ci:.5f}")
    print(f"metrics: {result.metrics_csv}")
    return 0


def _eval(args) -> int:
    metrics = evaluate_checkpoint(args.checkpoint, args.tasks, seed=args.seed)
    for name, (mean, ci) in sorted(metrics.items()):
        print(f"{name} = {mean:.5f} +- {ci:.5f}")
    return 0


def _analyze(args) -> int:
    cfg, learner, source, params = load_run(args.checkpoint)
    seed = args.seed if args.seed is not None else cfg.seed
    rng = np.random.default_rng([seed, 9])
    task_list = [source.sample(rng) for _ in range(args.tasks)]
    summary, _ = update_direction_analysis(
        params, cfg, task_list, gd_lr=args.gd_lr,
        gd_steps=args.gd_steps if args.gd_steps else None,
    )
    sections = ckpt.checkpoint_load(args.checkpoint)
    iteration = int(sections["meta/iteration"])
    for name, (mean, ci) in sorted(summary.items()):
        print(f"{name} = {mean:.5f} +- {ci:.5f}")
    if args.out:
        log = MetricsLog()
        for name, (mean, ci) in sorted(summary.items()):
            log.append(iteration, "analysis", name, mean, ci, 0.0)
        log.write_csv(args.out)
        print(f"wrote {args.out}")
    return 0


def _parse_grid(path: str):
    """Grid files look like configs, but every value may list alternatives
    separated by '|'; a 'base' key points at the starting config."""
    base = None
    axes: list[tuple[str, list[str]]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, raw = (p.strip() for p in line.split("=", 1))
            if key == "base":
                base = raw
            else:
                axes.append((key, [alt.strip() for alt in raw.split("|")]))
    if base is None:
        raise ValueError("grid file needs a 'base = <config path>' line")
    return base, axes


def _sweep(args) -> int:
    base_path, axes = _parse_grid(args.grid)
    with open(base_path, encoding="utf-8") as fh:
        base_text = fh.read()
    out_root = args.out or "runs/sweep"
    names = [k for k, _ in axes]
    rows = []
    for idx, combo in enumerate(itertools.product(*(alts for _, alts in axes))):
        text = base_text + "\n" + "\n".join(f"{k} = {v}" for k, v in zip(names, combo))
        run_out = os.path.join(out_root, f"run_{idx:03d}")
        cfg = parse_config_text(text, {"out": run_out})
        print(f"sweep run {idx}: " + ", ".join(f"{k}={v}" for k, v in zip(names, combo)))
        result = meta_train(cfg)
        score = result.test_metrics[cfg.eval_metric][0]
        rows.append((idx, dict(zip(names, combo)), cfg.eval_metric, score))
    os.makedirs(out_root, exist_ok=True)
    summary = os.path.join(out_root, "sweep_summary.csv")
    with open(summary, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("run," + ",".join(names) + ",metric,score\n")
        for idx, combo, metric, score in rows:
            fh.write(f"run_{idx:03d}," + ",".join(combo[k] for k in names)
                     + f",{metric},{score!r}\n")
    print(f"wrote {summary}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="metalstm",
        description="Meta-learning engine: LSTM meta-learners, baselines, and analysis",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="meta-train a learner from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--out", default=None, help="override the output directory")
    p_train.add_argument("--resume", default=None, help="checkpoint to continue from")
    p_train.add_argument("--force", action="store_true",
                         help="resume even if the checkpoint config hash differs")
    p_train.set_defaults(fn=_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on fresh tasks")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--tasks", type=int, required=True)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.set_defaults(fn=_eval)

    p_ana = sub.add_parser("analyze-updates",
                           help="compare learned update directions with GD and prototypes")
    p_ana.add_argument("--checkpoint", required=True)
    p_ana.add_argument("--tasks", type=int, default=50)
    p_ana.add_argument("--gd-lr", type=float, default=0.01)
    p_ana.add_argument("--gd-steps", type=int, default=0, help="0 uses the run's unroll steps")
    p_ana.add_argument("--seed", type=int, default=None)
    p_ana.add_argument("--out", default=None, help="also write the summary as CSV")
    p_ana.set_defaults(fn=_analyze)

    p_sweep = sub.add_parser("sweep", help="grid sweep over '|'-separated alternatives")
    p_sweep.add_argument("--grid", required=True)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(fn=_sweep)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
