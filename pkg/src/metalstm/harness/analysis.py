"""How does the learned update rule move the output layer, compared with
plain gradient descent and a nearest-prototype head?

For each task the adapted output matrix is flattened into an update
direction and compared, by cosine similarity and Euclidean distance, with
the directions produced by (a) gradient steps on the support loss of the
output layer and (b) the prototype classifier written as a linear layer.
All three start from the same initialization and share the frozen-body
embeddings."""

from __future__ import annotations

import numpy as np

from metalstm import baselines, oplstm
from metalstm.harness.config import ConfigError, RunConfig
from metalstm.harness.learners import OpLstmLearner, TaskSource
from metalstm.harness.metrics import mean_ci95
from metalstm.ndtensor import Tape, cross_entropy, softmax


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def _gd_head(h0: np.ndarray, bias: np.ndarray, emb: np.ndarray, y: np.ndarray,
             lr: float, steps: int) -> np.ndarray:
    """T gradient steps on the support cross-entropy w.r.t. the head matrix."""
    h = h0.copy()
    for _ in range(steps):
        tape = Tape()
        h_t = tape.parameter(h, name="head")
        probs = softmax(tape.constant(emb) @ h_t.T + tape.constant(bias), axis=-1)
        loss = cross_entropy(probs, tape.constant(y))
        h = h - lr * tape.backward(loss)[h_t]
    return h


def update_direction_analysis(
    arrays: dict[str, np.ndarray],
    cfg: RunConfig,
    task_list,
    gd_lr: float = 0.01,
    gd_steps: int | None = None,
):
    """Per-task cosine/Euclidean comparisons of output-layer update
    directions; returns (aggregate {metric: (mean, ci)}, per-task rows)."""
    if cfg.learner != "op_lstm":
        raise ConfigError("update-direction analysis expects an op_lstm run")
    if cfg.is_regression:
        raise ConfigError("the prototype head needs a classification task")
    if gd_steps is None:
        gd_steps = cfg.unroll_t
    source = TaskSource(cfg)
    learner = OpLstmLearner(cfg, source)
    head_idx = len(learner.layer_dims) - 1
    h0 = arrays[f"H.{head_idx}"]
    bias = arrays[f"b.{head_idx}"]

    rows = []
    for task in task_list:
        tape = Tape()
        arch, state = learner.bind(tape, arrays)
        adapted = oplstm.adapt(state, arch, task.support)
        delta_op = (adapted.H[-1].data - h0).ravel()

        # frozen-body support embeddings from the shared initialization
        emb = oplstm.forward(state, arch, task.support_x).a[-2].data
        y = task.support_y

        h_gd = _gd_head(h0, bias, emb, y, gd_lr, gd_steps)
        delta_gd = (h_gd - h0).ravel()

        proto_tape = Tape()
        protos = baselines.proto_prototypes(
            proto_tape.constant(emb), np.argmax(y, axis=1)
        )
        w_proto, _ = baselines.proto_as_linear(protos)
        delta_proto = (w_proto.data - h0).ravel()

        rows.append(
            {
                "cos_op_gd": _cosine(delta_op, delta_gd),
                "cos_op_proto": _cosine(delta_op, delta_proto),
                "euclid_op_gd": float(np.linalg.norm(delta_op - delta_gd)),
                "euclid_op_proto": float(np.linalg.norm(delta_op - delta_proto)),
            }
        )

    aggregate = {
        key: mean_ci95([r[key] for r in rows]) for key in rows[0]
    } if rows else {}
    return aggregate, rows
