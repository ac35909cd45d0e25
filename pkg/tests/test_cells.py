import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metalstm.cells import (
    GATE_KEYS,
    LstmState,
    NodeStates,
    bind_lstm_params,
    coordwise_step,
    lstm_cell_step,
    lstm_param_arrays,
    stacked_lstm_step,
)
from metalstm.ndtensor import ShapeError, Tape

from .helpers import finite_difference, relative_error


def _zero_arrays(input_size, hidden):
    fan = hidden + input_size
    arrs = {k: np.zeros((hidden, fan)) if k.startswith("W") else np.zeros(hidden) for k in GATE_KEYS}
    return arrs


def _zero_state(tape, hidden):
    return LstmState(tape.constant(np.zeros(hidden)), tape.constant(np.zeros(hidden)))


def _reference_cell(arrs, x, h, c):
    """Straight-line evaluation of the gated recurrence, independent of the tape."""
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    cat = np.concatenate([h, x])
    f = sig(arrs["W_f"] @ cat + arrs["b_f"])
    i = sig(arrs["W_i"] @ cat + arrs["b_i"])
    o = sig(arrs["W_o"] @ cat + arrs["b_o"])
    c_bar = np.tanh(arrs["W_c"] @ cat + arrs["b_c"])
    c_next = f * c + i * c_bar
    h_next = o * np.tanh(c_next)
    return h_next, c_next, (f, i, o, c_bar)


def test_zero_params_give_half_open_gates_and_zero_state():
    tape = Tape()
    params = bind_lstm_params(tape, _zero_arrays(3, 4))
    state, gates = lstm_cell_step(params, tape.constant([1.0, -2.0, 0.5]), _zero_state(tape, 4))
    assert np.allclose(gates.f.data, 0.5)
    assert np.allclose(gates.i.data, 0.5)
    assert np.allclose(gates.o.data, 0.5)
    assert np.allclose(gates.c_bar.data, 0.0)
    assert np.allclose(state.c.data, 0.0)
    assert np.allclose(state.h.data, 0.0)


def test_saturated_gates_preserve_memory():
    tape = Tape()
    arrs = _zero_arrays(2, 3)
    arrs["b_f"] = np.full(3, 50.0)   # forget gate pinned open
    arrs["b_i"] = np.full(3, -50.0)  # input gate pinned shut
    params = bind_lstm_params(tape, arrs)
    c_prev = np.array([0.3, -1.2, 2.0])
    prev = LstmState(tape.constant(np.zeros(3)), tape.constant(c_prev))
    state, _ = lstm_cell_step(params, tape.constant([5.0, -3.0]), prev)
    assert np.allclose(state.c.data, c_prev, atol=1e-12)


def test_random_cell_matches_reference_evaluation():
    rng = np.random.default_rng(7)
    arrs = lstm_param_arrays(rng, input_size=3, hidden_size=2)
    x = rng.normal(size=3)
    h0 = rng.normal(size=2)
    c0 = rng.normal(size=2)

    tape = Tape()
    params = bind_lstm_params(tape, arrs)
    prev = LstmState(tape.constant(h0), tape.constant(c0))
    state, gates = lstm_cell_step(params, tape.constant(x), prev)

    h_ref, c_ref, (f, i, o, cb) = _reference_cell(arrs, x, h0, c0)
    assert np.allclose(state.h.data, h_ref, atol=1e-12)
    assert np.allclose(state.c.data, c_ref, atol=1e-12)
    assert np.allclose(gates.f.data, f, atol=1e-12)
    assert np.allclose(gates.c_bar.data, cb, atol=1e-12)


def test_dimension_mismatch_raises():
    tape = Tape()
    params = bind_lstm_params(tape, _zero_arrays(3, 4))
    with pytest.raises(ShapeError):
        lstm_cell_step(params, tape.constant([1.0, 2.0]), _zero_state(tape, 4))


@given(st.integers(0, 2**32 - 1))
def test_gate_ranges(seed):
    rng = np.random.default_rng(seed)
    arrs = lstm_param_arrays(rng, input_size=2, hidden_size=3)
    tape = Tape()
    params = bind_lstm_params(tape, arrs)
    prev = LstmState(tape.constant(rng.normal(size=3)), tape.constant(rng.normal(size=3)))
    _, gates = lstm_cell_step(params, tape.constant(rng.normal(size=2) * 5), prev)
    for g in (gates.f, gates.i, gates.o):
        assert np.all(g.data > 0.0) and np.all(g.data < 1.0)
    assert np.all(gates.c_bar.data > -1.0) and np.all(gates.c_bar.data < 1.0)


def test_single_layer_stack_equals_cell_step():
    rng = np.random.default_rng(1)
    arrs = lstm_param_arrays(rng, input_size=2, hidden_size=3)
    x = rng.normal(size=2)

    tape = Tape()
    params = bind_lstm_params(tape, arrs)
    out, states = stacked_lstm_step([params], tape.constant(x), [_zero_state(tape, 3)])
    direct, _ = lstm_cell_step(params, tape.constant(x), _zero_state(tape, 3))
    assert np.array_equal(out.data, direct.h.data)
    assert np.array_equal(states[0].c.data, direct.c.data)


def test_zero_stack_outputs_zero():
    tape = Tape()
    layers = [bind_lstm_params(tape, _zero_arrays(3, 4)), bind_lstm_params(tape, _zero_arrays(4, 4))]
    states = [_zero_state(tape, 4), _zero_state(tape, 4)]
    out, _ = stacked_lstm_step(layers, tape.constant([1.0, 2.0, 3.0]), states)
    assert np.allclose(out.data, 0.0)


def test_two_layer_stack_matches_manual_composition():
    rng = np.random.default_rng(3)
    a0 = lstm_param_arrays(rng, input_size=2, hidden_size=3)
    a1 = lstm_param_arrays(rng, input_size=3, hidden_size=2)
    x = rng.normal(size=2)

    tape = Tape()
    l0, l1 = bind_lstm_params(tape, a0), bind_lstm_params(tape, a1)
    out, states = stacked_lstm_step([l0, l1], tape.constant(x), [_zero_state(tape, 3), _zero_state(tape, 2)])

    s0, _ = lstm_cell_step(l0, tape.constant(x), _zero_state(tape, 3))
    s1, _ = lstm_cell_step(l1, s0.h, _zero_state(tape, 2))
    assert np.allclose(out.data, s1.h.data, atol=0)
    assert np.allclose(states[0].h.data, s0.h.data, atol=0)
    assert np.allclose(states[1].c.data, s1.c.data, atol=0)


def test_coordwise_single_node_equals_cell_step():
    rng = np.random.default_rng(5)
    arrs = lstm_param_arrays(rng, input_size=2, hidden_size=1)
    z = rng.normal(size=(1, 2))

    tape = Tape()
    params = bind_lstm_params(tape, arrs)
    states = NodeStates(tape.constant(np.zeros((1, 1))), tape.constant(np.zeros((1, 1))))
    nxt = coordwise_step(params, tape.constant(z), states)

    direct, _ = lstm_cell_step(params, tape.constant(z[0]), _zero_state(tape, 1))
    assert np.allclose(nxt.h.data[0], direct.h.data, atol=0)
    assert np.allclose(nxt.c.data[0], direct.c.data, atol=0)


def test_coordwise_weight_sharing_gives_identical_nodes():
    rng = np.random.default_rng(6)
    arrs = lstm_param_arrays(rng, input_size=2, hidden_size=1)
    row = rng.normal(size=2)

    tape = Tape()
    params = bind_lstm_params(tape, arrs)
    z = tape.constant(np.stack([row, row]))
    states = NodeStates(tape.constant(np.zeros((2, 1))), tape.constant(np.zeros((2, 1))))
    nxt = coordwise_step(params, z, states)
    assert np.array_equal(nxt.h.data[0], nxt.h.data[1])
    assert np.array_equal(nxt.c.data[0], nxt.c.data[1])


def test_coordwise_three_nodes_equal_independent_cell_steps():
    rng = np.random.default_rng(8)
    arrs = lstm_param_arrays(rng, input_size=3, hidden_size=2)
    z = rng.normal(size=(3, 3))
    h0 = rng.normal(size=(3, 2))
    c0 = rng.normal(size=(3, 2))

    tape = Tape()
    params = bind_lstm_params(tape, arrs)
    nxt = coordwise_step(
        params, tape.constant(z), NodeStates(tape.constant(h0), tape.constant(c0))
    )
    for j in range(3):
        prev = LstmState(tape.constant(h0[j]), tape.constant(c0[j]))
        direct, _ = lstm_cell_step(params, tape.constant(z[j]), prev)
        assert np.allclose(nxt.h.data[j], direct.h.data, atol=1e-15)
        assert np.allclose(nxt.c.data[j], direct.c.data, atol=1e-15)


def test_coordwise_commutes_with_node_permutation():
    rng = np.random.default_rng(9)
    arrs = lstm_param_arrays(rng, input_size=2, hidden_size=2)
    z = rng.normal(size=(5, 2))
    h0 = rng.normal(size=(5, 2))
    c0 = rng.normal(size=(5, 2))
    perm = rng.permutation(5)

    tape = Tape()
    params = bind_lstm_params(tape, arrs)
    plain = coordwise_step(params, tape.constant(z), NodeStates(tape.constant(h0), tape.constant(c0)))
    permuted = coordwise_step(
        params, tape.constant(z[perm]), NodeStates(tape.constant(h0[perm]), tape.constant(c0[perm]))
    )
    assert np.array_equal(plain.h.data[perm], permuted.h.data)
    assert np.array_equal(plain.c.data[perm], permuted.c.data)


def test_cell_gradients_match_finite_differences_for_all_blocks():
    rng = np.random.default_rng(11)
    arrays = lstm_param_arrays(rng, input_size=2, hidden_size=2)
    x = rng.normal(size=2)
    h0 = rng.normal(size=2)
    c0 = rng.normal(size=2)

    def run(arrs):
        tape = Tape()
        params = bind_lstm_params(tape, arrs)
        prev = LstmState(tape.constant(h0), tape.constant(c0))
        state, _ = lstm_cell_step(params, tape.constant(x), prev)
        loss = (state.h.square().sum() + state.c.sum()) * 0.7
        return tape, params, loss

    tape, params, loss = run(arrays)
    grads = tape.backward(loss)
    named = {k: grads[getattr(params, k)] for k in GATE_KEYS}
    want = finite_difference(lambda a: run(a)[2].item(), arrays)
    assert relative_error(named, want) < 1e-4
