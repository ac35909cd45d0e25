"""LSTM cells: the gated recurrence, multi-layer stacks, and the
coordinate-wise form where one shared cell drives every node of a layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from metalstm.ndtensor import ShapeError, Tape, Tensor, concat, sigmoid, tanh


@dataclass
class LstmParams:
    """Gate weights [hidden x (hidden + input)] and biases [hidden]."""

    W_f: Tensor
    W_i: Tensor
    W_o: Tensor
    W_c: Tensor
    b_f: Tensor
    b_i: Tensor
    b_o: Tensor
    b_c: Tensor

    def __post_init__(self):
        shape = self.W_f.shape
        for w in (self.W_i, self.W_o, self.W_c):
            if w.shape != shape:
                raise ShapeError(f"gate weight shapes differ: {w.shape} vs {shape}")
        for b in (self.b_f, self.b_i, self.b_o, self.b_c):
            if b.shape != (shape[0],):
                raise ShapeError(f"gate bias shape {b.shape} != ({shape[0]},)")

    @property
    def hidden_size(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_f.shape[1] - self.W_f.shape[0]


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


@dataclass
class GateActivations:
    """Forget/input/output gates in (0,1) and candidate cell in (-1,1)."""

    f: Tensor
    i: Tensor
    o: Tensor
    c_bar: Tensor


@dataclass
class NodeStates:
    """Per-node states of a coordinate-wise cell; row j belongs to node j."""

    h: Tensor
    c: Tensor

    @property
    def n_nodes(self) -> int:
        return self.h.shape[0]


GATE_KEYS = ("W_f", "W_i", "W_o", "W_c", "b_f", "b_i", "b_o", "b_c")


def lstm_param_arrays(rng: np.random.Generator, input_size: int, hidden_size: int) -> dict[str, np.ndarray]:
    """Fresh parameter arrays: uniform +-1/sqrt(fan_in), forget bias pinned to +1."""
    fan_in = hidden_size + input_size
    bound = 1.0 / np.sqrt(fan_in)
    arrays = {}
    for k in GATE_KEYS:
        shape = (hidden_size, fan_in) if k.startswith("W") else (hidden_size,)
        arrays[k] = rng.uniform(-bound, bound, size=shape)
    arrays["b_f"] = np.ones(hidden_size)
    return arrays


def bind_lstm_params(tape: Tape, arrays: dict[str, np.ndarray], prefix: str = "") -> LstmParams:
    return LstmParams(**{k: tape.parameter(arrays[prefix + k], name=prefix + k) for k in GATE_KEYS})


def lstm_cell_step_rows(params: LstmParams, x: Tensor, h: Tensor, c: Tensor):
    """Cell recurrence on row-batched inputs: x [B,in], h/c [B,hidden]."""
    cat = concat([h, x], axis=1)
    f = sigmoid(cat @ params.W_f.T + params.b_f)
    i = sigmoid(cat @ params.W_i.T + params.b_i)
    o = sigmoid(cat @ params.W_o.T + params.b_o)
    c_bar = tanh(cat @ params.W_c.T + params.b_c)
    c_next = f * c + i * c_bar
    h_next = o * tanh(c_next)
    return h_next, c_next, GateActivations(f, i, o, c_bar)


def lstm_cell_step(params: LstmParams, x: Tensor, prev: LstmState) -> tuple[LstmState, GateActivations]:
    """One recurrence step on a single input vector."""
    if x.ndim != 1 or prev.h.ndim != 1:
        raise ShapeError("lstm_cell_step works on vectors; use coordwise_step for batches")
    if x.shape[0] + prev.h.shape[0] != params.W_f.shape[1]:
        raise ShapeError(
            f"input {x.shape[0]} + hidden {prev.h.shape[0]} != weight width {params.W_f.shape[1]}"
        )
    hid = params.hidden_size
    h, c, gates = lstm_cell_step_rows(
        params, x.reshape(1, -1), prev.h.reshape(1, -1), prev.c.reshape(1, -1)
    )
    squeeze = lambda t: t.reshape(hid)
    return (
        LstmState(squeeze(h), squeeze(c)),
        GateActivations(*(squeeze(g) for g in (gates.f, gates.i, gates.o, gates.c_bar))),
    )


def stacked_lstm_step(
    layers: list[LstmParams], x: Tensor, states: list[LstmState]
) -> tuple[Tensor, list[LstmState]]:
    """Feed one input through a stack, each layer consuming the one below."""
    if len(layers) != len(states):
        raise ShapeError(f"{len(layers)} layers but {len(states)} states")
    inp = x
    new_states = []
    for params, state in zip(layers, states):
        state, _ = lstm_cell_step(params, inp, state)
        new_states.append(state)
        inp = state.h
    return inp, new_states


def coordwise_step(params: LstmParams, z: Tensor, states: NodeStates) -> NodeStates:
    """Apply one shared cell independently to every node.

    Row j of `z` is node j's input; the same parameters serve all nodes, so
    the layer width is free to vary without new weights.
    """
    if z.ndim != 2:
        raise ShapeError(f"coordwise_step expects [nodes x z_dim] input, got shape {z.shape}")
    if z.shape[0] != states.n_nodes:
        raise ShapeError(f"{z.shape[0]} input rows but {states.n_nodes} node states")
    if z.shape[1] + params.hidden_size != params.W_f.shape[1]:
        raise ShapeError(
            f"z width {z.shape[1]} + hidden {params.hidden_size} != weight width {params.W_f.shape[1]}"
        )
    h, c, _ = lstm_cell_step_rows(params, z, states.h, states.c)
    return NodeStates(h, c)
