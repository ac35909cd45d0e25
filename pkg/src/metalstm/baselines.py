"""MAML and prototypical-network baselines over a shared MLP base network.

MAML's inner loop is written out as explicit backpropagation formulas built
from tape primitives, so the support-set gradient is itself differentiable
and the outer gradient is second-order.  The prototypical classifier comes
with its exact reformulation as a linear output layer, which the
update-direction analysis compares against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from metalstm.ndtensor import (
    ShapeError,
    Tape,
    Tensor,
    cross_entropy,
    mse,
    softmax,
)
from metalstm.oplstm import Activation, apply_activation


@dataclass
class MlpParams:
    weights: list[Tensor]  # W[l]: [d_l x d_{l-1}]
    biases: list[Tensor]   # b[l]: [d_l]
    activations: list[Activation]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("per-layer lists disagree in length")
        for w_lo, w_hi in zip(self.weights, self.weights[1:]):
            if w_hi.shape[1] != w_lo.shape[0]:
                raise ShapeError(f"layer shapes do not chain: {w_lo.shape} -> {w_hi.shape}")

    @property
    def tape(self) -> Tape:
        return self.weights[0].tape

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def mlp_arrays(rng: np.random.Generator, layer_dims: list[int]) -> dict[str, np.ndarray]:
    arrays = {}
    for i in range(1, len(layer_dims)):
        bound = 1.0 / np.sqrt(layer_dims[i - 1])
        arrays[f"W.{i}"] = rng.uniform(-bound, bound, size=(layer_dims[i], layer_dims[i - 1]))
        arrays[f"b.{i}"] = np.zeros(layer_dims[i])
    return arrays


def bind_mlp(tape: Tape, arrays: dict[str, np.ndarray], activations: list[Activation]) -> MlpParams:
    n = len(activations)
    return MlpParams(
        weights=[tape.parameter(arrays[f"W.{i}"], name=f"W.{i}") for i in range(1, n + 1)],
        biases=[tape.parameter(arrays[f"b.{i}"], name=f"b.{i}") for i in range(1, n + 1)],
        activations=list(activations),
    )


def mlp_forward(params: MlpParams, x: Tensor) -> tuple[list[Tensor], list[Tensor]]:
    """Row-batched forward pass; returns activations (a[0] = input) and
    pre-activations (z[l] aligned with layer l >= 1)."""
    acts = [x]
    pres: list[Tensor] = [None]  # type: ignore[list-item]
    a = x
    for w, b, kind in zip(params.weights, params.biases, params.activations):
        z = a @ w.T + b
        a = apply_activation(kind, z)
        pres.append(z)
        acts.append(a)
    return acts, pres


def _support_tensors(tape: Tape, examples) -> tuple[Tensor, Tensor]:
    x = tape.constant(np.stack([np.asarray(x) for x, _ in examples]))
    y = tape.constant(np.stack([np.asarray(y) for _, y in examples]))
    return x, y


def batch_loss(params: MlpParams, x: Tensor, y: Tensor) -> Tensor:
    """Cross-entropy under a softmax head, mean squared error otherwise."""
    acts, _ = mlp_forward(params, x)
    if params.activations[-1] is Activation.SOFTMAX:
        return cross_entropy(acts[-1], y)
    return mse(acts[-1], y)


def support_gradients(params: MlpParams, x: Tensor, y: Tensor) -> tuple[list[Tensor], list[Tensor]]:
    """Gradients of the support loss w.r.t. weights and biases, expressed in
    tape primitives so the outer loop can differentiate through them.

    ReLU masks enter as constants, matching the zero-almost-everywhere
    second derivative of the hinge.
    """
    tape = params.tape
    acts, pres = mlp_forward(params, x)
    m = x.shape[0]
    head = params.activations[-1]
    if head is Activation.SOFTMAX:
        dz = (acts[-1] - y) * (1.0 / m)  # softmax + mean cross-entropy
    elif head is Activation.IDENTITY:
        dz = (acts[-1] - y) * (2.0 / acts[-1].size)  # mean squared error
    else:
        raise ValueError(f"unsupported head activation '{head.value}'")

    grads_w: list[Tensor] = [None] * params.n_layers  # type: ignore[list-item]
    grads_b: list[Tensor] = [None] * params.n_layers  # type: ignore[list-item]
    for layer in range(params.n_layers, 0, -1):
        grads_w[layer - 1] = dz.T @ acts[layer - 1]
        grads_b[layer - 1] = dz.sum(axis=0)
        if layer > 1:
            da = dz @ params.weights[layer - 1]
            kind = params.activations[layer - 2]
            if kind is Activation.RELU:
                mask = tape.constant((pres[layer - 1].data > 0).astype(np.float64))
                dz = da * mask
            elif kind is Activation.IDENTITY:
                dz = da
            else:
                raise ValueError(f"unsupported body activation '{kind.value}'")
    return grads_w, grads_b


def maml_adapt(
    init: MlpParams,
    support,
    steps: int,
    inner_lr: float,
    first_order: bool = False,
) -> MlpParams:
    """Full-batch gradient descent on the support loss; every layer's weights
    and biases move.  The updates stay on the tape unless `first_order`."""
    if len(support) == 0:
        raise ValueError("empty support set")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if inner_lr < 0:
        raise ValueError("inner_lr must be nonnegative")
    tape = init.tape
    x, y = _support_tensors(tape, support)
    params = init
    for _ in range(steps):
        gw, gb = support_gradients(params, x, y)
        if first_order:
            gw = [tape.constant(g.data) for g in gw]
            gb = [tape.constant(g.data) for g in gb]
        params = MlpParams(
            weights=[w - inner_lr * g for w, g in zip(params.weights, gw)],
            biases=[b - inner_lr * g for b, g in zip(params.biases, gb)],
            activations=params.activations,
        )
    return params


def maml_meta_loss(
    init: MlpParams,
    task,
    steps: int,
    inner_lr: float,
    first_order: bool = False,
) -> Tensor:
    """Query loss after adapting to the support set (steps=0 skips adaptation)."""
    if len(task.query) == 0:
        raise ValueError("task needs a nonempty query set")
    adapted = init if steps == 0 else maml_adapt(init, task.support, steps, inner_lr, first_order)
    xq, yq = _support_tensors(init.tape, task.query)
    return batch_loss(adapted, xq, yq)


def activation_gradients(params: MlpParams, x, y) -> list[np.ndarray]:
    """Tape-derived dLoss/d(post-activation) per layer for one example,
    using the same per-example loss that drives the inner loop."""
    tape = params.tape
    xt = tape.constant(np.asarray(x).reshape(1, -1))
    yt = tape.constant(np.asarray(y).reshape(1, -1))
    acts, _ = mlp_forward(params, xt)
    if params.activations[-1] is Activation.SOFTMAX:
        loss = cross_entropy(acts[-1], yt)
    else:
        loss = mse(acts[-1], yt)
    grads = tape.backward(loss, wrt=acts[1:])
    return [grads[a][0] for a in acts[1:]]


# -- prototypical network ---------------------------------------------------------


@dataclass
class PrototypeSet:
    prototypes: Tensor  # [classes x embedding dim]

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]


def proto_prototypes(embeddings: Tensor, labels) -> PrototypeSet:
    """Per-class arithmetic mean of the support embeddings."""
    labels = np.asarray(labels, dtype=int)
    if embeddings.ndim != 2 or embeddings.shape[0] != labels.shape[0]:
        raise ShapeError(f"{embeddings.shape} embeddings vs {labels.shape} labels")
    n = int(labels.max()) + 1 if labels.size else 0
    counts = np.bincount(labels, minlength=n)
    if n == 0 or np.any(counts == 0):
        missing = [i for i, c in enumerate(counts) if c == 0]
        raise ValueError(f"classes without support examples: {missing or 'all'}")
    sel = np.zeros((n, labels.shape[0]))
    sel[labels, np.arange(labels.shape[0])] = 1.0 / counts[labels]
    return PrototypeSet(embeddings.tape.constant(sel) @ embeddings)


def proto_predict(protos: PrototypeSet, embedding: Tensor) -> Tensor:
    """Class probabilities: softmax over negated squared Euclidean distances."""
    if embedding.ndim != 1 or embedding.shape[0] != protos.prototypes.shape[1]:
        raise ShapeError(
            f"embedding {embedding.shape} vs prototypes {protos.prototypes.shape}"
        )
    d2 = (protos.prototypes - embedding).square().sum(axis=1)
    return softmax(-d2)


def proto_predict_batch(protos: PrototypeSet, embeddings: Tensor) -> Tensor:
    """Row-batched variant of proto_predict."""
    c = protos.prototypes
    d2 = (
        embeddings.square().sum(axis=1, keepdims=True)
        + c.square().sum(axis=1)
        - 2.0 * (embeddings @ c.T)
    )
    return softmax(-d2, axis=-1)


def proto_as_linear(protos: PrototypeSet) -> tuple[Tensor, Tensor]:
    """The nearest-prototype scorer as a linear head.

    Row n is 2*c_n with bias -|c_n|^2, so softmax(W f + b) equals
    proto_predict exactly (the |f|^2 term is constant across classes and
    cancels inside the softmax).
    """
    if protos.prototypes.shape[0] == 0:
        raise ShapeError("empty prototype set")
    w = protos.prototypes * 2.0
    b = -protos.prototypes.square().sum(axis=1)
    return w, b


def proto_episode_loss(embed: MlpParams, task) -> tuple[Tensor, Tensor]:
    """Episodic training loss: cross-entropy of query probabilities under the
    prototypes built from the support embeddings.  Returns (loss, probs)."""
    tape = embed.tape
    xs, ys = _support_tensors(tape, task.support)
    xq, yq = _support_tensors(tape, task.query)
    support_emb, _ = mlp_forward(embed, xs)
    query_emb, _ = mlp_forward(embed, xq)
    protos = proto_prototypes(support_emb[-1], np.argmax(ys.data, axis=1))
    probs = proto_predict_batch(protos, query_emb[-1])
    return cross_entropy(probs, yq), probs
