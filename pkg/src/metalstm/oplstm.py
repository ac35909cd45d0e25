"""Outer-product LSTM meta-learner.

The base network's weight matrices are 2-D hidden states H that a
coordinate-wise LSTM rewrites while adapting to a task: per support example
the cell emits one scalar per node, and the layer's matrix moves along the
Frobenius-normalized outer product of those node outputs with the layer's
input activations.  Error-like information reaches inner layers through
backward messages (H transposed times the fresh node outputs of the layer
above), so the cell can learn updates akin to gradient descent without ever
being fed gradients.

Per pass over the support set the per-example outer products are accumulated
against the pass-start matrices and applied once, which keeps the adapted
state invariant to the order of the support examples.  A strict sequential
mode that updates H inside the example loop is kept for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from metalstm.cells import (
    LstmParams,
    NodeStates,
    bind_lstm_params,
    coordwise_step,
    lstm_param_arrays,
)
from metalstm.ndtensor import (
    ShapeError,
    Tape,
    Tensor,
    cross_entropy,
    mse,
    relu,
    row_norms,
    softmax,
    stack_last,
)

_NORM_EPS = 1e-12  # guard against zero-norm outer products


class Activation(str, Enum):
    RELU = "relu"
    SOFTMAX = "softmax"
    IDENTITY = "identity"


def apply_activation(kind: Activation, x: Tensor) -> Tensor:
    if kind is Activation.RELU:
        return relu(x)
    if kind is Activation.SOFTMAX:
        return softmax(x, axis=-1)
    return x


class CoordwiseStack:
    """A stack of shared cells applied per node; the last level has width 1,
    so each node contributes one scalar to the layer's hidden vector."""

    def __init__(self, cells: list[LstmParams]):
        if not cells:
            raise ValueError("empty coordinate-wise stack")
        if cells[-1].hidden_size != 1:
            raise ShapeError(
                f"final coordinate-wise width must be 1, got {cells[-1].hidden_size}"
            )
        for lower, upper in zip(cells, cells[1:]):
            if upper.input_size != lower.hidden_size:
                raise ShapeError("coordinate-wise stack widths do not chain")
        self.cells = cells

    @property
    def z_dim(self) -> int:
        return self.cells[0].input_size

    def zero_states(self, tape: Tape, n_nodes: int) -> list[NodeStates]:
        return [
            NodeStates(
                tape.constant(np.zeros((n_nodes, p.hidden_size))),
                tape.constant(np.zeros((n_nodes, p.hidden_size))),
            )
            for p in self.cells
        ]

    def step(self, z: Tensor, states: list[NodeStates]) -> tuple[Tensor, list[NodeStates]]:
        """Run all levels on row-batched node inputs; returns the width-1
        output as a flat vector plus the fresh per-level states."""
        if len(states) != len(self.cells):
            raise ShapeError(f"{len(self.cells)} stack levels but {len(states)} state groups")
        inp = z
        fresh = []
        for params, st in zip(self.cells, states):
            nxt = coordwise_step(params, inp, st)
            fresh.append(nxt)
            inp = nxt.h
        return inp.reshape(inp.shape[0]), fresh


class FnCell:
    """Stateless stand-in for a coordinate-wise stack; maps z rows straight
    to node outputs.  Used to probe the update rule with hand-chosen cells."""

    def __init__(self, fn):
        self.fn = fn

    def zero_states(self, tape: Tape, n_nodes: int) -> list[NodeStates]:
        return []

    def step(self, z: Tensor, states: list[NodeStates]) -> tuple[Tensor, list[NodeStates]]:
        return self.fn(z), []


@dataclass
class OpLstmArch:
    """Static description of the base network and its update machinery."""

    layer_dims: list[int]                 # d0..dL
    activations: list[Activation]         # one per layer 1..L
    gamma: Tensor                         # inner step size (scalar)
    unroll_T: int
    groups: dict[Activation, object]      # activation kind -> cell stack
    strict_order: bool = False

    def __post_init__(self):
        if len(self.activations) != self.n_layers:
            raise ShapeError(f"{self.n_layers} layers need {self.n_layers} activations")
        if self.unroll_T < 1:
            raise ValueError("unroll_T must be >= 1")
        for act in self.activations:
            if act not in self.groups:
                raise ValueError(f"no cell group for activation '{act.value}'")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def group_for(self, layer: int):
        return self.groups[self.activations[layer - 1]]


@dataclass
class OpLstmState:
    """Adaptable task state: layer matrices, fixed biases, node cell states."""

    H: list[Tensor]
    b: list[Tensor]
    node_states: list[list[NodeStates]]  # per layer, per stack level


@dataclass
class ActivationTrace:
    a: list[Tensor]  # a[0] is the raw input


@dataclass
class BackwardMessage:
    z: list[Tensor]  # per layer 1..L, shape [examples, nodes, 2]


# -- construction ---------------------------------------------------------------


def oplstm_arrays(
    rng: np.random.Generator,
    layer_dims: list[int],
    activations: list[Activation],
    cw_widths: list[int],
    gamma_init: float = 1.0,
) -> dict[str, np.ndarray]:
    """Initial arrays for every meta-learned quantity."""
    arrays = {}
    for i in range(1, len(layer_dims)):
        bound = 1.0 / np.sqrt(layer_dims[i - 1])
        arrays[f"H.{i}"] = rng.uniform(-bound, bound, size=(layer_dims[i], layer_dims[i - 1]))
        arrays[f"b.{i}"] = np.zeros(layer_dims[i])
    for act in dict.fromkeys(activations):  # one group per distinct activation
        in_dim = 2
        for lvl, width in enumerate(cw_widths):
            for k, v in lstm_param_arrays(rng, in_dim, width).items():
                arrays[f"cw.{act.value}.{lvl}.{k}"] = v
            in_dim = width
    arrays["gamma"] = np.asarray(gamma_init)
    return arrays


def bind_oplstm(
    tape: Tape,
    arrays: dict[str, np.ndarray],
    layer_dims: list[int],
    activations: list[Activation],
    cw_widths: list[int],
    unroll_T: int,
    learn_gamma: bool = True,
    strict_order: bool = False,
) -> tuple[OpLstmArch, OpLstmState]:
    groups = {}
    for act in dict.fromkeys(activations):
        cells = [
            bind_lstm_params(tape, arrays, prefix=f"cw.{act.value}.{lvl}.")
            for lvl in range(len(cw_widths))
        ]
        groups[act] = CoordwiseStack(cells)
    gamma = (
        tape.parameter(arrays["gamma"], name="gamma")
        if learn_gamma
        else tape.constant(arrays["gamma"])
    )
    arch = OpLstmArch(
        layer_dims=list(layer_dims),
        activations=list(activations),
        gamma=gamma,
        unroll_T=unroll_T,
        groups=groups,
        strict_order=strict_order,
    )
    state = OpLstmState(
        H=[tape.parameter(arrays[f"H.{i}"], name=f"H.{i}") for i in range(1, len(layer_dims))],
        b=[tape.parameter(arrays[f"b.{i}"], name=f"b.{i}") for i in range(1, len(layer_dims))],
        node_states=zero_node_states(tape, arch),
    )
    return arch, state


def zero_node_states(tape: Tape, arch: OpLstmArch) -> list[list[NodeStates]]:
    return [
        arch.group_for(layer).zero_states(tape, arch.layer_dims[layer])
        for layer in range(1, arch.n_layers + 1)
    ]


# -- forward / backward dynamics ------------------------------------------------


def forward(state: OpLstmState, arch: OpLstmArch, x) -> ActivationTrace:
    """Activations of the base network under the current 2-D hidden states.

    Accepts one input vector or a row-batched matrix of inputs.
    """
    tape = state.H[0].tape
    a = x if isinstance(x, Tensor) else tape.constant(x)
    if a.shape[-1] != arch.layer_dims[0]:
        raise ShapeError(f"input width {a.shape[-1]} != d0 {arch.layer_dims[0]}")
    trace = [a]
    for layer in range(1, arch.n_layers + 1):
        h_mat, bias = state.H[layer - 1], state.b[layer - 1]
        pre = (a @ h_mat.T if a.ndim == 2 else h_mat @ a) + bias
        a = apply_activation(arch.activations[layer - 1], pre)
        trace.append(a)
    return ActivationTrace(trace)


def node_state_update(
    state: OpLstmState, arch: OpLstmArch, z: Tensor, layer: int
) -> tuple[Tensor, list[NodeStates]]:
    """Per-node cell step for one layer, conditioned on the pooled states.

    `z` is [nodes x 2] for a single example or [examples x nodes x 2]; rows of
    different examples share the pooled conditioning state.  Returns the node
    outputs (matching the leading shape of `z`) and the fresh per-level
    states, flattened example-major.
    """
    group = arch.group_for(layer)
    d = arch.layer_dims[layer]
    if z.shape[-2] != d:
        raise ShapeError(f"layer {layer} has {d} nodes, z provides {z.shape[-2]}")
    m = 1 if z.ndim == 2 else z.shape[0]
    rows = z.reshape(m * d, z.shape[-1])
    pooled = state.node_states[layer - 1]
    tiled = [NodeStates(s.h.tile_rows(m), s.c.tile_rows(m)) for s in pooled] if m > 1 else pooled
    h_rows, fresh = group.step(rows, tiled)
    h = h_rows.reshape(d) if z.ndim == 2 else h_rows.reshape(m, d)
    return h, fresh


def backward_messages(
    state: OpLstmState, arch: OpLstmArch, trace: ActivationTrace, y
) -> BackwardMessage:
    """Top-down node inputs: predictions paired with targets at the output
    layer, activations paired with backpropagated messages below."""
    z, _, _ = _backward_sweep(state, arch, trace, y)
    return BackwardMessage(z)


def _backward_sweep(state: OpLstmState, arch: OpLstmArch, trace: ActivationTrace, y):
    """Interleaved message passing and node updates, output layer first.

    Messages to layer l use the fresh node outputs of layer l+1 and the
    pre-update matrix H. Returns per-layer z, node outputs, fresh states.
    """
    tape = state.H[0].tape
    L = arch.n_layers
    y_t = y if isinstance(y, Tensor) else tape.constant(y)
    a_top = trace.a[L]
    if y_t.shape != a_top.shape:
        raise ShapeError(f"target shape {y_t.shape} != output shape {a_top.shape}")
    batched = a_top.ndim == 2

    z_by_layer: list[Tensor | None] = [None] * (L + 1)
    h_by_layer: list[Tensor | None] = [None] * (L + 1)
    fresh_by_layer: list[list[NodeStates] | None] = [None] * (L + 1)

    z = stack_last(a_top, y_t)
    for layer in range(L, 0, -1):
        z_by_layer[layer] = z
        h, fresh = node_state_update(state, arch, z, layer)
        h_by_layer[layer] = h
        fresh_by_layer[layer] = fresh
        if layer > 1:
            msg = h @ state.H[layer - 1] if batched else state.H[layer - 1].T @ h
            z = stack_last(trace.a[layer - 1], msg)
    return z_by_layer[1:], h_by_layer[1:], fresh_by_layer[1:]


def pool_node_states(per_example: list[list[NodeStates]]) -> list[NodeStates]:
    """Arithmetic mean of per-example node states, level by level."""
    if not per_example:
        raise ValueError("nothing to pool")
    m = len(per_example)
    pooled = []
    for level in range(len(per_example[0])):
        h = per_example[0][level].h
        c = per_example[0][level].c
        for ex in per_example[1:]:
            h = h + ex[level].h
            c = c + ex[level].c
        pooled.append(NodeStates(h * (1.0 / m), c * (1.0 / m)))
    return pooled


def _pool_flat(fresh: list[NodeStates], m: int, d: int) -> list[NodeStates]:
    """Mean over examples of example-major flattened states [m*d x w]."""
    if m == 1:
        return fresh
    out = []
    for st in fresh:
        w = st.h.shape[1]
        out.append(
            NodeStates(
                st.h.reshape(m, d, w).mean(axis=0),
                st.c.reshape(m, d, w).mean(axis=0),
            )
        )
    return out


def hidden_matrix_update(h_mat: Tensor, h_rows: Tensor, a_prev_rows: Tensor, gamma: Tensor) -> Tensor:
    """Move H along the mean of Frobenius-normalized per-example outer
    products of node outputs with the layer's inputs."""
    if h_rows.ndim != 2 or a_prev_rows.ndim != 2 or h_rows.shape[0] != a_prev_rows.shape[0]:
        raise ShapeError(
            f"per-example rows disagree: {h_rows.shape} vs {a_prev_rows.shape}"
        )
    m = h_rows.shape[0]
    norms = row_norms(h_rows) * row_norms(a_prev_rows)  # |outer(h_i, a_i)|_F
    scaled = h_rows * (1.0 / (norms + _NORM_EPS)).reshape(m, 1)
    delta = scaled.T @ a_prev_rows
    return h_mat + (gamma * (1.0 / m)) * delta


def adapt(
    init: OpLstmState,
    arch: OpLstmArch,
    support,
    record_history: bool = False,
):
    """Run T passes over the support set, rewriting the layer matrices.

    Node cell states start from zero for every task; biases are never
    modified.  With `record_history` the per-pass H values are also returned
    as detached arrays (history[t][layer]).
    """
    if len(support) == 0:
        raise ValueError("empty support set")
    tape = init.H[0].tape
    x_mat = tape.constant(np.stack([np.asarray(x) for x, _ in support]))
    y_mat = tape.constant(np.stack([np.asarray(y) for _, y in support]))
    m = len(support)

    state = OpLstmState(list(init.H), list(init.b), zero_node_states(tape, arch))
    history = [[h.data for h in state.H]]
    for _ in range(arch.unroll_T):
        if arch.strict_order:
            state = _adapt_pass_strict(state, arch, x_mat, y_mat, m)
        else:
            state = _adapt_pass_pooled(state, arch, x_mat, y_mat, m)
        history.append([h.data for h in state.H])
    if record_history:
        return state, history
    return state


def _adapt_pass_pooled(state, arch, x_mat, y_mat, m):
    trace = forward(state, arch, x_mat)
    _, h_layers, fresh_layers = _backward_sweep(state, arch, trace, y_mat)
    new_h = [
        hidden_matrix_update(state.H[layer - 1], h_layers[layer - 1], trace.a[layer - 1], arch.gamma)
        for layer in range(1, arch.n_layers + 1)
    ]
    pooled = [
        _pool_flat(fresh_layers[layer - 1], m, arch.layer_dims[layer])
        for layer in range(1, arch.n_layers + 1)
    ]
    return OpLstmState(new_h, state.b, pooled)


def _adapt_pass_strict(state, arch, x_mat, y_mat, m):
    """Literal example loop: H changes inside the loop, so the result depends
    on the support order.  Node conditioning states stay the pass-start ones."""
    h_current = list(state.H)
    fresh_all = []  # per example, per layer, per level
    for i in range(m):
        work = OpLstmState(h_current, state.b, state.node_states)
        trace = forward(work, arch, x_mat[i : i + 1, :])
        _, h_layers, fresh_layers = _backward_sweep(work, arch, trace, y_mat[i : i + 1, :])
        for layer in range(1, arch.n_layers + 1):
            h_current[layer - 1] = hidden_matrix_update(
                h_current[layer - 1], h_layers[layer - 1], trace.a[layer - 1], arch.gamma
            )
        fresh_all.append(fresh_layers)
    pooled = [
        pool_node_states([fresh_all[i][layer] for i in range(m)])
        for layer in range(arch.n_layers)
    ]
    return OpLstmState(h_current, state.b, pooled)


def predict(adapted: OpLstmState, arch: OpLstmArch, x_query) -> Tensor:
    """Forward pass through the adapted matrices and the fixed biases."""
    return forward(adapted, arch, x_query).a[-1]


def meta_loss(init: OpLstmState, arch: OpLstmArch, task) -> Tensor:
    """Adapt on the task's support set, then mean loss over its query set.

    Cross-entropy under a softmax head, mean squared error otherwise; the
    whole computation stays on the tape so gradients reach every
    meta-parameter through the unrolled adaptation.
    """
    if len(task.support) == 0 or len(task.query) == 0:
        raise ValueError("task needs nonempty support and query")
    tape = init.H[0].tape
    adapted = adapt(init, arch, task.support)
    xq = np.stack([np.asarray(x) for x, _ in task.query])
    yq = np.stack([np.asarray(y) for _, y in task.query])
    preds = predict(adapted, arch, xq)
    if arch.activations[-1] is Activation.SOFTMAX:
        return cross_entropy(preds, tape.constant(yq))
    return mse(preds, tape.constant(yq))
