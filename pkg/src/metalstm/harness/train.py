"""Outer training loop shared by every learner: sample a meta-batch, average
the per-task query-loss gradients, take one Adam step, validate periodically,
and finish by testing the best validated parameters."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from metalstm.harness import checkpoint as ckpt
from metalstm.harness.config import RunConfig, canonical_text, config_hash, parse_config_text
from metalstm.harness.learners import TaskSource, build_learner
from metalstm.harness.metrics import MetricsLog, mean_ci95
from metalstm.ndtensor import Tape, adam_init, adam_step, AdamState

# seed-stream tags so that validation/test tasks never collide with training
_STREAM_TRAIN, _STREAM_INIT, _STREAM_VAL, _STREAM_TEST = 0, 1, 2, 3


@dataclass
class TrainResult:
    config: RunConfig
    log: MetricsLog
    final_params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    best_metric: float
    best_iteration: int
    test_metrics: dict[str, tuple[float, float]]
    best_checkpoint: str
    last_checkpoint: str
    metrics_csv: str


def evaluate(learner, arrays, task_list) -> dict[str, tuple[float, float]]:
    """Mean and 95% CI half-width of every per-task metric."""
    if not task_list:
        raise ValueError("no tasks to evaluate")
    collected: dict[str, list[float]] = {}
    for task in task_list:
        _, metrics = learner.objective(Tape(), arrays, task)
        for k, v in metrics.items():
            collected.setdefault(k, []).append(v)
    return {k: mean_ci95(v) for k, v in collected.items()}


def _sample_tasks(source, rng, n):
    return [source.sample(rng) for _ in range(n)]


def _better(cfg: RunConfig, candidate: float, incumbent: float | None) -> bool:
    if incumbent is None:
        return True
    return candidate > incumbent if cfg.higher_is_better else candidate < incumbent


def meta_train(
    cfg: RunConfig,
    resume_from: str | None = None,
    quiet: bool = False,
    stop_after: int | None = None,
    force_resume: bool = False,
) -> TrainResult:
    """Run the outer loop to completion; returns parameters, logs, and test
    scores of the best validated model.

    `stop_after` halts the loop at that iteration (after checkpointing),
    simulating an interrupted run that `resume_from` can continue.
    `force_resume` overrides the config-hash check when continuing from a
    checkpoint trained under different settings.
    """
    os.makedirs(cfg.out, exist_ok=True)
    source = TaskSource(cfg)
    learner = build_learner(cfg, source)
    cfg_text = canonical_text(cfg)
    cfg_hash = config_hash(cfg)
    log = MetricsLog()
    start_time = time.perf_counter()

    if resume_from is not None:
        sections = ckpt.checkpoint_load(resume_from)
        stored = sections["meta/config"].decode("utf-8")
        if config_hash(parse_config_text(stored)) != cfg_hash and not force_resume:
            raise ckpt.CheckpointError(
                "checkpoint was trained with a different config; refusing to resume "
                "(pass force to override)"
            )
        arrays = ckpt.unpack_group(sections, "p")
        adam_m = ckpt.unpack_group(sections, "m")
        adam = AdamState(adam_m, ckpt.unpack_group(sections, "v"),
                         int(sections["meta/adam_step"])) if adam_m else None
        task_rng = np.random.default_rng([cfg.seed, _STREAM_TRAIN])
        task_rng.bit_generator.state = ckpt.unpack_rng(sections)
        start_iter = int(sections["meta/iteration"])
        best_params = ckpt.unpack_group(sections, "best") or {k: v.copy() for k, v in arrays.items()}
        best_metric = float(sections["meta/best_metric"]) if "meta/best_metric" in sections else None
        best_iteration = int(sections.get("meta/best_iteration", 0))
    else:
        init_rng = np.random.default_rng([cfg.seed, _STREAM_INIT])
        arrays = learner.init_arrays(init_rng)
        adam = None  # initialized lazily from the first gradient's key set
        task_rng = np.random.default_rng([cfg.seed, _STREAM_TRAIN])
        start_iter = 0
        best_params = {k: v.copy() for k, v in arrays.items()}
        best_metric = None
        best_iteration = 0

    window_losses: list[float] = []
    last_path = os.path.join(cfg.out, "ckpt_last.bin")
    best_path = os.path.join(cfg.out, "ckpt_best.bin")

    def elapsed():
        return time.perf_counter() - start_time

    def save_state(path: str, iteration: int) -> None:
        ckpt.checkpoint_save(
            path,
            ckpt.pack_state(
                cfg_text,
                iteration,
                arrays,
                adam_m=adam.m if adam else {},
                adam_v=adam.v if adam else {},
                adam_step_count=adam.step if adam else 0,
                rng_state=task_rng.bit_generator.state,
                best=best_params,
                best_metric=best_metric,
                best_iteration=best_iteration,
            ),
        )

    for iteration in range(start_iter + 1, cfg.meta_iterations + 1):
        grad_buffer: dict[str, np.ndarray] = {}
        batch_losses = []
        for _ in range(cfg.meta_batch):
            task = source.sample(task_rng)
            tape = Tape()
            loss, _ = learner.objective(tape, arrays, task)
            if not np.isfinite(loss.item()):
                raise RuntimeError(
                    f"non-finite loss ({loss.item()}) at iteration {iteration}; "
                    f"learner={cfg.learner} seed={cfg.seed}"
                )
            batch_losses.append(loss.item())
            grads = tape.backward(loss)
            scale = 1.0 / cfg.meta_batch
            for name, tensor in tape.named_parameters.items():
                g = grads[tensor] * scale
                if name in grad_buffer:
                    grad_buffer[name] = grad_buffer[name] + g
                else:
                    grad_buffer[name] = g

        if adam is None:
            adam = adam_init({k: arrays[k] for k in grad_buffer})
        trainable = {k: arrays[k] for k in grad_buffer}
        updated, adam = adam_step(trainable, grad_buffer, adam, lr=cfg.outer_lr)
        arrays = {**arrays, **updated}

        window_losses.extend(batch_losses)
        if iteration % cfg.log_every == 0:
            mean, ci = mean_ci95(window_losses)
            log.append(iteration, "train", "loss", mean, ci, elapsed())
            window_losses = []

        if iteration % cfg.val_every == 0:
            # fixed held-out validation set: the same tasks at every
            # validation point, so model selection is consistent and a
            # zero-lr run logs a flat trajectory
            val_rng = np.random.default_rng([cfg.seed, _STREAM_VAL])
            val_metrics = evaluate(learner, arrays, _sample_tasks(source, val_rng, cfg.val_tasks))
            for name, (mean, ci) in sorted(val_metrics.items()):
                log.append(iteration, "val", name, mean, ci, elapsed())
            score = val_metrics[cfg.eval_metric][0]
            if _better(cfg, score, best_metric):
                best_metric = score
                best_iteration = iteration
                best_params = {k: v.copy() for k, v in arrays.items()}
                ckpt.checkpoint_save(
                    best_path,
                    ckpt.pack_state(cfg_text, iteration, best_params,
                                    best_metric=best_metric, best_iteration=iteration),
                )
            if cfg.analyze_updates and cfg.learner == "op_lstm" and not cfg.is_regression:
                from metalstm.harness.analysis import update_direction_analysis

                ana_rng = np.random.default_rng([cfg.seed, _STREAM_VAL, iteration, 7])
                summary, _ = update_direction_analysis(
                    arrays, cfg, _sample_tasks(source, ana_rng, cfg.analysis_tasks),
                    gd_lr=cfg.gd_lr,
                )
                for name, (mean, ci) in sorted(summary.items()):
                    log.append(iteration, "analysis", name, mean, ci, elapsed())
            save_state(last_path, iteration)
            if not quiet:
                print(f"[{cfg.learner}] iter {iteration}: val "
                      + " ".join(f"{k}={m:.4f}" for k, (m, _) in sorted(val_metrics.items())))

        if stop_after is not None and iteration >= stop_after:
            save_state(last_path, iteration)
            return TrainResult(cfg, log, arrays, best_params,
                               best_metric if best_metric is not None else float("nan"),
                               best_iteration, {}, best_path, last_path, "")

    test_rng = np.random.default_rng([cfg.seed, _STREAM_TEST])
    test_metrics = evaluate(learner, best_params, _sample_tasks(source, test_rng, cfg.test_tasks))
    final_iter = cfg.meta_iterations
    for name, (mean, ci) in sorted(test_metrics.items()):
        log.append(final_iter, "test", name, mean, ci, elapsed())

    save_state(last_path, final_iter)
    csv_path = os.path.join(cfg.out, "metrics.csv")
    log.write_csv(csv_path)
    with open(os.path.join(cfg.out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg_text)
    return TrainResult(
        config=cfg,
        log=log,
        final_params=arrays,
        best_params=best_params,
        best_metric=best_metric if best_metric is not None else float("nan"),
        best_iteration=best_iteration,
        test_metrics=test_metrics,
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        metrics_csv=csv_path,
    )


def load_run(checkpoint_path: str, use_best: bool = True):
    """Rebuild (config, learner, source, params) from a checkpoint file."""
    sections = ckpt.checkpoint_load(checkpoint_path)
    cfg = parse_config_text(sections["meta/config"].decode("utf-8"))
    source = TaskSource(cfg)
    learner = build_learner(cfg, source)
    params = ckpt.unpack_group(sections, "best") if use_best else {}
    if not params:
        params = ckpt.unpack_group(sections, "p")
    return cfg, learner, source, params


def evaluate_checkpoint(checkpoint_path: str, n_tasks: int, seed: int | None = None):
    """Evaluate a stored model on freshly sampled tasks."""
    if n_tasks < 1:
        raise ValueError("need at least one task")
    cfg, learner, source, params = load_run(checkpoint_path)
    rng = np.random.default_rng([seed if seed is not None else cfg.seed, _STREAM_TEST])
    return evaluate(learner, params, _sample_tasks(source, rng, n_tasks))
