"""Adapters that give the four learners one face: named initial arrays, a
per-task training objective on a fresh tape, and per-task evaluation."""

from __future__ import annotations

import numpy as np

from metalstm import baselines, oplstm, plain_lstm, tasks
from metalstm.harness.config import ConfigError, RunConfig
from metalstm.ndtensor import Tape, cross_entropy, mse
from metalstm.oplstm import Activation


class TaskSource:
    """Episode sampler configured once per run; images load eagerly."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self._dataset = None
        if cfg.task == "sine":
            self.dx, self.dy = 1, 1
        elif cfg.task == "synthetic":
            self.dx, self.dy = cfg.dim, cfg.ways
        else:
            self._dataset = tasks.load_image_dataset(cfg.data_root)
            self.dx = int(np.prod(self._dataset.image_shape))
            self.dy = cfg.ways

    def sample(self, rng: np.random.Generator) -> tasks.Task:
        cfg = self.cfg
        if cfg.task == "sine":
            return tasks.sample_sine_task(rng, cfg.shots, cfg.queries)
        if cfg.task == "synthetic":
            return tasks.sample_synthetic_episode(
                rng, cfg.ways, cfg.shots, cfg.queries, cfg.dim, cfg.spread
            )
        return tasks.sample_image_episode(self._dataset, rng, cfg.ways, cfg.shots, cfg.queries)


def _accuracy(probs: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.argmax(targets, axis=1)))


class PlainLstmLearner:
    def __init__(self, cfg: RunConfig, source: TaskSource):
        self.cfg = cfg
        self.dx, self.dy = source.dx, source.dy
        self.head = "regression" if cfg.is_regression else "classification"
        self.fmt = plain_lstm.InputFormat(cfg.input_format)
        self.ingestion = plain_lstm.Ingestion(cfg.ingestion)

    def init_arrays(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return plain_lstm.plain_lstm_arrays(rng, self.dx, self.dy, self.cfg.hidden, self.fmt)

    def objective(self, tape: Tape, arrays, task):
        model = plain_lstm.bind_plain_lstm(
            tape, arrays, self.fmt, self.ingestion, self.cfg.unroll_t, self.head
        )
        states = plain_lstm.ingest(model, task.support)
        preds = plain_lstm.predict_query_batch(model, states, task.query_x)
        yq = tape.constant(task.query_y)
        if self.head == "regression":
            loss = mse(preds, yq)
            return loss, {"mse": loss.item()}
        loss = cross_entropy(preds, yq)
        return loss, {"loss": loss.item(), "accuracy": _accuracy(preds.data, task.query_y)}


class OpLstmLearner:
    def __init__(self, cfg: RunConfig, source: TaskSource):
        self.cfg = cfg
        self.layer_dims = [source.dx] + list(cfg.hidden) + [source.dy]
        head = Activation.IDENTITY if cfg.is_regression else Activation.SOFTMAX
        self.activations = [Activation.RELU] * len(cfg.hidden) + [head]

    def init_arrays(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return oplstm.oplstm_arrays(
            rng, self.layer_dims, self.activations, self.cfg.cw_hidden, self.cfg.gamma_init
        )

    def bind(self, tape: Tape, arrays):
        return oplstm.bind_oplstm(
            tape,
            arrays,
            self.layer_dims,
            self.activations,
            self.cfg.cw_hidden,
            unroll_T=self.cfg.unroll_t,
            learn_gamma=self.cfg.learn_gamma,
            strict_order=self.cfg.strict_order,
        )

    def objective(self, tape: Tape, arrays, task):
        arch, state = self.bind(tape, arrays)
        adapted = oplstm.adapt(state, arch, task.support)
        preds = oplstm.predict(adapted, arch, task.query_x)
        yq = tape.constant(task.query_y)
        if self.cfg.is_regression:
            loss = mse(preds, yq)
            return loss, {"mse": loss.item()}
        loss = cross_entropy(preds, yq)
        return loss, {"loss": loss.item(), "accuracy": _accuracy(preds.data, task.query_y)}


class MamlLearner:
    def __init__(self, cfg: RunConfig, source: TaskSource):
        self.cfg = cfg
        self.layer_dims = [source.dx] + list(cfg.hidden) + [source.dy]
        head = Activation.IDENTITY if cfg.is_regression else Activation.SOFTMAX
        self.activations = [Activation.RELU] * len(cfg.hidden) + [head]

    def init_arrays(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return baselines.mlp_arrays(rng, self.layer_dims)

    def objective(self, tape: Tape, arrays, task):
        params = baselines.bind_mlp(tape, arrays, self.activations)
        adapted = baselines.maml_adapt(
            params, task.support, self.cfg.inner_steps, self.cfg.inner_lr, self.cfg.first_order
        )
        acts, _ = baselines.mlp_forward(adapted, tape.constant(task.query_x))
        preds = acts[-1]
        yq = tape.constant(task.query_y)
        if self.cfg.is_regression:
            loss = mse(preds, yq)
            return loss, {"mse": loss.item()}
        loss = cross_entropy(preds, yq)
        return loss, {"loss": loss.item(), "accuracy": _accuracy(preds.data, task.query_y)}


class ProtoNetLearner:
    def __init__(self, cfg: RunConfig, source: TaskSource):
        if cfg.is_regression:
            raise ConfigError("protonet needs a classification task")
        self.cfg = cfg
        self.layer_dims = [source.dx] + list(cfg.hidden)
        self.activations = [Activation.RELU] * (len(cfg.hidden) - 1) + [Activation.IDENTITY]

    def init_arrays(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return baselines.mlp_arrays(rng, self.layer_dims)

    def objective(self, tape: Tape, arrays, task):
        embed = baselines.bind_mlp(tape, arrays, self.activations)
        loss, probs = baselines.proto_episode_loss(embed, task)
        return loss, {"loss": loss.item(), "accuracy": _accuracy(probs.data, task.query_y)}


_LEARNERS = {
    "plain_lstm": PlainLstmLearner,
    "op_lstm": OpLstmLearner,
    "maml": MamlLearner,
    "protonet": ProtoNetLearner,
}


def build_learner(cfg: RunConfig, source: TaskSource):
    return _LEARNERS[cfg.learner](cfg, source)
