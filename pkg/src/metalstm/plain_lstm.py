"""Plain-LSTM meta-learner: ingest a support set with frozen weights, then
condition query predictions on the resulting recurrent state.

Two ingestion modes exist.  SEQUENTIAL feeds the examples one at a time, so
the final state depends on their order.  BATCHED steps every example
independently from a shared state and mean-pools the per-example states,
which makes the result permutation invariant by construction; one unroll
step corresponds to one full pass over the support set.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from metalstm.cells import (
    LstmParams,
    LstmState,
    bind_lstm_params,
    lstm_cell_step_rows,
    lstm_param_arrays,
)
from metalstm.ndtensor import ShapeError, Tape, Tensor, concat, softmax


class InputFormat(str, Enum):
    XY = "xy"                                  # current input and target
    XY_PREVPRED = "xy_prevpred"                # ... plus previous prediction
    XY_PREVERR = "xy_preverr"                  # ... plus previous error
    XY_PREVPRED_PREVERR = "xy_prevpred_preverr"
    X_PREVY = "x_prevy"                        # temporally offset; sequential only


class Ingestion(str, Enum):
    SEQUENTIAL = "sequential"
    BATCHED = "batched"


#: number of extra target-sized slots fed alongside (x, y)
_AUX_SLOTS = {
    InputFormat.XY: 0,
    InputFormat.XY_PREVPRED: 1,
    InputFormat.XY_PREVERR: 1,
    InputFormat.XY_PREVPRED_PREVERR: 2,
    InputFormat.X_PREVY: 0,
}


def feature_width(fmt: InputFormat, dx: int, dy: int) -> int:
    return dx + dy * (1 + _AUX_SLOTS[fmt])


@dataclass
class PlainLstmModel:
    stack: list[LstmParams]
    readout_w: Tensor  # [dy x top hidden]
    readout_b: Tensor  # [dy]
    input_format: InputFormat
    ingestion: Ingestion
    unroll_T: int
    head: str  # "regression" | "classification"

    def __post_init__(self):
        if self.unroll_T < 1:
            raise ValueError(f"unroll_T must be >= 1, got {self.unroll_T}")
        if self.readout_w.shape[1] != self.stack[-1].hidden_size:
            raise ShapeError(
                f"readout expects {self.readout_w.shape[1]} features, top layer emits "
                f"{self.stack[-1].hidden_size}"
            )
        if self.head not in ("regression", "classification"):
            raise ValueError(f"unknown head '{self.head}'")

    @property
    def tape(self) -> Tape:
        return self.readout_w.tape

    @property
    def out_dim(self) -> int:
        return self.readout_w.shape[0]


def plain_lstm_arrays(
    rng: np.random.Generator,
    dx: int,
    dy: int,
    hidden: list[int],
    input_format: InputFormat,
) -> dict[str, np.ndarray]:
    """Initial arrays for the stack and readout, keyed 'l<i>.<gate>' / 'readout.*'."""
    arrays = {}
    in_dim = feature_width(input_format, dx, dy)
    for i, h in enumerate(hidden):
        for k, v in lstm_param_arrays(rng, in_dim, h).items():
            arrays[f"l{i}.{k}"] = v
        in_dim = h
    bound = 1.0 / np.sqrt(hidden[-1])
    arrays["readout.W"] = rng.uniform(-bound, bound, size=(dy, hidden[-1]))
    arrays["readout.b"] = np.zeros(dy)
    return arrays


def bind_plain_lstm(
    tape: Tape,
    arrays: dict[str, np.ndarray],
    input_format: InputFormat,
    ingestion: Ingestion,
    unroll_T: int,
    head: str,
) -> PlainLstmModel:
    n_layers = len({k.split(".")[0] for k in arrays if k.startswith("l")})
    stack = [bind_lstm_params(tape, arrays, prefix=f"l{i}.") for i in range(n_layers)]
    return PlainLstmModel(
        stack=stack,
        readout_w=tape.parameter(arrays["readout.W"], name="readout.W"),
        readout_b=tape.parameter(arrays["readout.b"], name="readout.b"),
        input_format=input_format,
        ingestion=ingestion,
        unroll_T=unroll_T,
        head=head,
    )


def _readout(model: PlainLstmModel, top_h: Tensor) -> Tensor:
    out = top_h @ model.readout_w.T + model.readout_b
    if model.head == "classification":
        out = softmax(out, axis=-1)
    return out


def _zero_states(model: PlainLstmModel) -> list[LstmState]:
    tape = model.tape
    return [
        LstmState(tape.constant(np.zeros(p.hidden_size)), tape.constant(np.zeros(p.hidden_size)))
        for p in model.stack
    ]


def _stack_step_rows(model: PlainLstmModel, rows: Tensor, states_rows) -> tuple[Tensor, list]:
    """Step row-batched inputs through the stack; states_rows holds [B x hid] pairs."""
    inp = rows
    new_states = []
    for params, (h, c) in zip(model.stack, states_rows):
        h, c, _ = lstm_cell_step_rows(params, inp, h, c)
        new_states.append((h, c))
        inp = h
    return inp, new_states


def _format_rows(model: PlainLstmModel, x: Tensor, y: Tensor, pred: Tensor, err: Tensor) -> Tensor:
    fmt = model.input_format
    parts = [x, y]
    if fmt in (InputFormat.XY_PREVPRED, InputFormat.XY_PREVPRED_PREVERR):
        parts.append(pred)
    if fmt in (InputFormat.XY_PREVERR, InputFormat.XY_PREVPRED_PREVERR):
        parts.append(err)
    return concat(parts, axis=1)


def ingest_sequential(model: PlainLstmModel, support, order) -> list[LstmState]:
    """Feed the support examples one at a time in the given order.

    The model weights stay untouched; only the recurrent state carries what
    was learned.  The result generally depends on `order`.
    """
    if len(support) == 0:
        raise ValueError("empty support set")
    order = list(order)
    if sorted(order) != list(range(len(support))):
        raise ValueError(f"order must be a permutation of 0..{len(support) - 1}")
    tape = model.tape
    dy = model.out_dim
    states = _zero_states(model)

    prev_y = tape.constant(np.zeros(dy))
    prev_pred = tape.constant(np.zeros(dy))
    prev_err = tape.constant(np.zeros(dy))
    for idx in order:
        x_i, y_i = support[idx]
        x_t = tape.constant(np.asarray(x_i).reshape(1, -1))
        if model.input_format is InputFormat.X_PREVY:
            vec = concat([x_t, prev_y.reshape(1, dy)], axis=1)
        else:
            y_t = tape.constant(np.asarray(y_i).reshape(1, -1))
            vec = _format_rows(model, x_t, y_t, prev_pred.reshape(1, dy), prev_err.reshape(1, dy))
        rows = [(s.h.reshape(1, -1), s.c.reshape(1, -1)) for s in states]
        top, new_rows = _stack_step_rows(model, vec, rows)
        states = [
            LstmState(h.reshape(p.hidden_size), c.reshape(p.hidden_size))
            for p, (h, c) in zip(model.stack, new_rows)
        ]
        if _AUX_SLOTS[model.input_format]:
            pred = _readout(model, top).reshape(dy)
            prev_pred = pred
            prev_err = tape.constant(np.asarray(y_i)) - pred
        if model.input_format is InputFormat.X_PREVY:
            prev_y = tape.constant(np.asarray(y_i))
    return states


def ingest_batched(model: PlainLstmModel, support) -> list[LstmState]:
    """Pooled ingestion: every example steps from the shared state, and the
    per-example states are averaged into the next shared state."""
    if len(support) == 0:
        raise ValueError("empty support set")
    if model.input_format is InputFormat.X_PREVY:
        raise ValueError("temporally offset input only makes sense for sequential ingestion")
    tape = model.tape
    m = len(support)
    dy = model.out_dim
    x_mat = tape.constant(np.stack([np.asarray(x) for x, _ in support]))
    y_mat = tape.constant(np.stack([np.asarray(y) for _, y in support]))

    states = _zero_states(model)
    pred = tape.constant(np.zeros((m, dy)))
    err = tape.constant(np.zeros((m, dy)))
    for _ in range(model.unroll_T):
        rows_in = _format_rows(model, x_mat, y_mat, pred, err)
        rows = [(s.h.repeat_rows(m), s.c.repeat_rows(m)) for s in states]
        top, new_rows = _stack_step_rows(model, rows_in, rows)
        states = [LstmState(h.mean(axis=0), c.mean(axis=0)) for h, c in new_rows]
        if _AUX_SLOTS[model.input_format]:
            pred = _readout(model, top)
            err = y_mat - pred
    return states


def ingest(model: PlainLstmModel, support, order=None) -> list[LstmState]:
    if model.ingestion is Ingestion.BATCHED:
        return ingest_batched(model, support)
    return ingest_sequential(model, support, order if order is not None else range(len(support)))


def predict_query_batch(model: PlainLstmModel, states: list[LstmState], x_rows: np.ndarray) -> Tensor:
    """Predictions for a block of queries, each conditioned on the same state.

    The query is formatted with a zero target and zero auxiliary slots; the
    ingested state is reused as-is for every query, never advanced.
    """
    tape = model.tape
    q = x_rows.shape[0]
    dy = model.out_dim
    x_t = tape.constant(x_rows)
    zeros = tape.constant(np.zeros((q, dy)))
    if model.input_format is InputFormat.X_PREVY:
        rows_in = concat([x_t, zeros], axis=1)
    else:
        rows_in = _format_rows(model, x_t, zeros, zeros, zeros)
    rows = [(s.h.repeat_rows(q), s.c.repeat_rows(q)) for s in states]
    top, _ = _stack_step_rows(model, rows_in, rows)
    return _readout(model, top)


def predict_query(model: PlainLstmModel, states: list[LstmState], x_query) -> Tensor:
    return predict_query_batch(model, states, np.asarray(x_query).reshape(1, -1)).reshape(model.out_dim)
