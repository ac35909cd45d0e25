"""Acceptance gate.

Every quantitative criterion below trains real models at desk scale and
prints one line:

    ACCEPT <criterion>: PASS|FAIL  (measured values)

Training runs are executed once per pytest session (two at a time, in
subprocesses) and shared across criteria.  The property criteria run
directly.  Expect the full module to take tens of minutes.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from metalstm import baselines, oplstm, plain_lstm
from metalstm.harness import checkpoint as ckpt_mod
from metalstm.harness.config import RunConfig
from metalstm.harness.train import meta_train
from metalstm.ndtensor import Tape, softmax
from metalstm.oplstm import Activation, FnCell, OpLstmArch, OpLstmState
from metalstm.tasks import sample_synthetic_episode

from .helpers import finite_difference, relative_error

# -- pinned training configurations ------------------------------------------------
# Hyperparameters live inside the search ranges the original experiments
# sampled from; iteration budgets are desk-scale.

SINE_LSTM_BATCHED = dict(
    learner="plain_lstm", task="sine", ingestion="batched", hidden=[40, 40],
    unroll_t=8, meta_batch=2, outer_lr=0.01, meta_iterations=20000,
    val_every=1000, val_tasks=500, test_tasks=2000, log_every=200,
)
SINE_MAML = dict(
    learner="maml", task="sine", hidden=[40, 40], inner_steps=3, inner_lr=0.01,
    meta_batch=2, outer_lr=0.001, meta_iterations=15000,
    val_every=1000, val_tasks=500, test_tasks=2000, log_every=200,
)
SINE_OPLSTM = dict(
    learner="op_lstm", task="sine", hidden=[40], cw_hidden=[20, 1], unroll_t=5,
    gamma_init=1.0, meta_batch=4, outer_lr=0.001, meta_iterations=12000,
    val_every=1000, val_tasks=300, test_tasks=2000, log_every=200,
)
FIG4_LSTM = dict(
    learner="plain_lstm", task="sine", hidden=[20, 20], unroll_t=4,
    meta_batch=2, outer_lr=0.01, meta_iterations=5000,
    val_every=1000, val_tasks=200, test_tasks=600, log_every=200,
)
SYN_COMMON = dict(
    task="synthetic", ways=5, shots=1, queries=15, dim=16, spread=0.1,
    meta_iterations=5000, val_every=1000, val_tasks=200, test_tasks=600,
    log_every=200, meta_batch=2,
)
SYN_OPLSTM = dict(learner="op_lstm", hidden=[32], cw_hidden=[20, 1], unroll_t=3,
                  gamma_init=1.0, outer_lr=0.002, **SYN_COMMON)
SYN_LSTM = dict(learner="plain_lstm", hidden=[40, 40], unroll_t=3,
                outer_lr=0.003, **SYN_COMMON)
SYN_PROTO = dict(learner="protonet", hidden=[32, 16], outer_lr=0.003,
                 **{**SYN_COMMON, "meta_iterations": 3000})


def _run_specs():
    specs = {
        "lstm5": dict(SINE_LSTM_BATCHED, shots=5, seed=0),
        "maml5": dict(SINE_MAML, shots=5, seed=0),
        "maml10": dict(SINE_MAML, shots=10, seed=0),
        "maml20": dict(SINE_MAML, shots=20, seed=0),
        "op10": dict(SINE_OPLSTM, shots=10, seed=0),
        "op20": dict(SINE_OPLSTM, shots=20, seed=0),
    }
    for seed in range(3):
        for shots in (5, 10, 20):
            for mode in ("sequential", "batched"):
                specs[f"fig4_{mode}_{shots}_{seed}"] = dict(
                    FIG4_LSTM, ingestion=mode, shots=shots, seed=seed
                )
        specs[f"syn_op_{seed}"] = dict(SYN_OPLSTM, seed=seed)
        specs[f"syn_lstm_{seed}"] = dict(SYN_LSTM, seed=seed)
    specs["syn_proto"] = dict(SYN_PROTO, seed=0)
    return specs


_WORKER_SNIPPET = """
import json, sys
from metalstm.harness.config import RunConfig
from metalstm.harness.train import meta_train

spec = json.loads(sys.argv[1])
tag = spec.pop("tag")
out_dir = spec.pop("out_dir")
cfg = RunConfig(out=out_dir, **spec).finalize()
result = meta_train(cfg, quiet=True)
print(json.dumps({
    "tag": tag,
    "test": result.test_metrics,
    "best": result.best_metric,
    "metrics_csv": result.metrics_csv,
    "best_checkpoint": result.best_checkpoint,
}))
"""


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Train every acceptance model once, two subprocesses at a time."""
    root = tmp_path_factory.mktemp("acceptance_runs")
    specs = _run_specs()
    pending = [
        (tag, json.dumps({"tag": tag, "out_dir": str(root / tag), **spec}))
        for tag, spec in specs.items()
    ]
    results: dict[str, dict] = {}
    running: list[tuple[str, subprocess.Popen]] = []
    env = dict(os.environ)
    while pending or running:
        while pending and len(running) < 2:
            tag, arg = pending.pop(0)
            proc = subprocess.Popen(
                [sys.executable, "-c", _WORKER_SNIPPET, arg],
                stdout=subprocess.PIPE, stderr=subprocess.PIPE, env=env, text=True,
            )
            running.append((tag, proc))
        for tag, proc in list(running):
            if proc.poll() is None:
                continue
            running.remove((tag, proc))
            out, err = proc.communicate()
            if proc.returncode != 0:
                raise RuntimeError(f"training run '{tag}' failed:\n{err[-2000:]}")
            results[tag] = json.loads(out.strip().splitlines()[-1])
        import time

        time.sleep(0.5)
    return results


def _report(name: str, ok: bool, detail: str) -> None:
    print(f"\nACCEPT {name}: {'PASS' if ok else 'FAIL'}  ({detail})")
    assert ok, f"{name}: {detail}"


def _mse(results, tag) -> float:
    return results[tag]["test"]["mse"][0]


def _acc(results, tag) -> float:
    return results[tag]["test"]["accuracy"][0]


# -- quantitative criteria ----------------------------------------------------------


def test_batched_lstm_five_shot_sine(trained):
    mse = _mse(trained, "lstm5")
    _report("plain LSTM (batched), 5-shot sine, 20k iterations: test MSE <= 0.08",
            mse <= 0.08, f"mse={mse:.4f}")


def test_maml_five_shot_sine_range_and_ordering(trained):
    maml = _mse(trained, "maml5")
    lstm = _mse(trained, "lstm5")
    ok = 0.08 <= maml <= 0.35 and maml > lstm
    _report("MAML 5-shot sine in [0.08, 0.35] and worse than batched LSTM",
            ok, f"maml={maml:.4f}, lstm={lstm:.4f}")


def test_oplstm_ten_and_twenty_shot_sine(trained):
    op10, op20 = _mse(trained, "op10"), _mse(trained, "op20")
    maml10, maml20 = _mse(trained, "maml10"), _mse(trained, "maml20")
    ok = op10 <= 0.02 and op20 <= 0.01 and op10 < maml10 and op20 < maml20
    _report(
        "OP-LSTM sine: 10-shot <= 0.02, 20-shot <= 0.01, beats MAML at both",
        ok,
        f"op10={op10:.4f} (maml10={maml10:.4f}), op20={op20:.4f} (maml20={maml20:.4f})",
    )


def test_batched_never_worse_than_sequential(trained):
    details = []
    ok = True
    for shots in (5, 10, 20):
        batched = np.mean([_mse(trained, f"fig4_batched_{shots}_{s}") for s in range(3)])
        seq = np.mean([_mse(trained, f"fig4_sequential_{shots}_{s}") for s in range(3)])
        details.append(f"k={shots}: batched={batched:.4f} sequential={seq:.4f}")
        ok = ok and batched <= seq
    _report("batched ingestion <= sequential at every shot count (3 seeds)",
            ok, "; ".join(details))


def test_synthetic_classification_gap(trained):
    op = np.mean([_acc(trained, f"syn_op_{s}") for s in range(3)])
    lstm = np.mean([_acc(trained, f"syn_lstm_{s}") for s in range(3)])
    gap = (op - lstm) * 100.0
    _report("synthetic 5-way 1-shot: OP-LSTM beats plain LSTM by >= 5 points",
            gap >= 5.0, f"op={op*100:.1f}%, lstm={lstm*100:.1f}%, gap={gap:.1f}")


def test_protonet_solves_separable_blobs(trained):
    acc = _acc(trained, "syn_proto")
    _report("protonet exceeds 95% accuracy on near-separable synthetic episodes",
            acc > 0.95, f"accuracy={acc*100:.1f}%")


# -- property criteria ---------------------------------------------------------------


def _random_oplstm(tape, seed, dims=(2, 6, 3), T=2):
    acts = [Activation.RELU] * (len(dims) - 2) + [Activation.SOFTMAX]
    arrays = oplstm.oplstm_arrays(np.random.default_rng(seed), list(dims), acts, [4, 1])
    arch, state = oplstm.bind_oplstm(tape, arrays, list(dims), acts, [4, 1], unroll_T=T)
    return arrays, arch, state


def test_permutation_invariance_witnessed():
    rng = np.random.default_rng(0)
    lstm_arrays = plain_lstm.plain_lstm_arrays(
        np.random.default_rng(1), 2, 3, [8], plain_lstm.InputFormat.XY
    )
    batched_agree = 0
    adapt_agree = 0
    seq_disagree = 0
    n = 100
    for _ in range(n):
        task = sample_synthetic_episode(rng, n_way=3, k=2, q=2, dim=2, spread=0.3)
        perm = rng.permutation(len(task.support))
        shuffled = [task.support[i] for i in perm]

        tape = Tape()
        model = plain_lstm.bind_plain_lstm(
            tape, lstm_arrays, plain_lstm.InputFormat.XY,
            plain_lstm.Ingestion.BATCHED, 3, "classification",
        )
        s1 = plain_lstm.ingest_batched(model, task.support)
        s2 = plain_lstm.ingest_batched(model, shuffled)
        d_batched = max(np.abs(a.h.data - b.h.data).max() for a, b in zip(s1, s2))
        batched_agree += d_batched <= 1e-9

        q1 = plain_lstm.ingest_sequential(model, task.support, range(len(task.support)))
        q2 = plain_lstm.ingest_sequential(model, shuffled, range(len(shuffled)))
        d_seq = max(np.abs(a.h.data - b.h.data).max() for a, b in zip(q1, q2))
        seq_disagree += d_seq > 1e-9

        tape2 = Tape()
        _, arch, state = _random_oplstm(tape2, seed=3)
        a1 = oplstm.adapt(state, arch, task.support)
        a2 = oplstm.adapt(state, arch, shuffled)
        d_adapt = max(np.abs(h1.data - h2.data).max() for h1, h2 in zip(a1.H, a2.H))
        adapt_agree += d_adapt <= 1e-9

    ok = batched_agree == n and adapt_agree == n and seq_disagree >= 95
    _report(
        "permutation invariance: batched ingest and adapt within 1e-9 on 100 tasks; "
        "sequential disagrees on >= 95",
        ok,
        f"batched={batched_agree}/100, adapt={adapt_agree}/100, sequential diff={seq_disagree}/100",
    )


class _Task:
    def __init__(self, support, query):
        self.support = support
        self.query = query


def _relu_kink_margin(tape: Tape) -> float:
    """Distance of the closest recorded relu input to its hinge; finite
    differences are only valid when this is well above the probe step."""
    margin = np.inf
    for idx, node in enumerate(tape.nodes):
        if node.op == "relu":
            vals = np.abs(tape._values[node.parents[0]])
            if vals.size:
                margin = min(margin, float(vals.min()))
    return margin


def test_gradient_fidelity_twenty_seeds():
    worst_op, worst_maml = 0.0, 0.0
    checked = 0
    seed = 0
    while checked < 20:
        seed += 1
        rng = np.random.default_rng(1000 + seed)
        support = [(rng.normal(size=2), rng.normal(size=2)) for _ in range(2)]
        query = [(rng.normal(size=2), rng.normal(size=2)) for _ in range(2)]
        task = _Task(support, query)

        dims = [2, 3, 2]
        acts = [Activation.RELU, Activation.IDENTITY]
        base = oplstm.oplstm_arrays(np.random.default_rng(seed), dims, acts, [2, 1])

        def run_op(arrs):
            tape = Tape()
            arch, state = oplstm.bind_oplstm(tape, arrs, dims, acts, [2, 1], unroll_T=2)
            return tape, oplstm.meta_loss(state, arch, task)

        tape, loss = run_op(base)
        if _relu_kink_margin(tape) < 1e-3:
            # differentiability at the evaluation point is a precondition of
            # the backward contract; resample instead of probing across a hinge
            continue
        checked += 1
        grads = tape.backward(loss)
        got = {n: grads[t] for n, t in tape.named_parameters.items()}
        err_op = relative_error(got, finite_difference(lambda a: run_op(a)[1].item(), base))
        worst_op = max(worst_op, err_op)

        mbase = baselines.mlp_arrays(np.random.default_rng(seed), dims)

        def run_maml(arrs):
            tape = Tape()
            params = baselines.bind_mlp(tape, arrs, acts)
            return tape, baselines.maml_meta_loss(params, task, steps=1, inner_lr=0.05)

        tape, loss = run_maml(mbase)
        grads = tape.backward(loss)
        got = {n: grads[t] for n, t in tape.named_parameters.items()}
        err_maml = relative_error(got, finite_difference(lambda a: run_maml(a)[1].item(), mbase))
        worst_maml = max(worst_maml, err_maml)

    ok = worst_op < 1e-4 and worst_maml < 1e-4
    _report("gradient fidelity vs central finite differences on 20 seeds",
            ok, f"worst op-lstm rel err={worst_op:.2e}, worst maml rel err={worst_maml:.2e}")


def test_protonet_equivalences():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        c = rng.normal(size=(4, 5))
        e = rng.normal(size=5)
        tape = Tape()
        protos = baselines.PrototypeSet(tape.constant(c))
        direct = baselines.proto_predict(protos, tape.constant(e))
        w, b = baselines.proto_as_linear(protos)
        linear = softmax(w @ tape.constant(e) + b)
        worst = max(worst, float(np.abs(direct.data - linear.data).max()))

    # one-pass construction: zero head, label-emitting top cell, inert body
    n, m, dx, hid = 3, 6, 4, 5
    tape = Tape()
    acts = [Activation.RELU, Activation.SOFTMAX]
    arrays = oplstm.oplstm_arrays(np.random.default_rng(3), [dx, hid, n], acts, [3, 1])
    arrays["H.2"] = np.zeros((n, hid))
    arch, state = oplstm.bind_oplstm(tape, arrays, [dx, hid, n], acts, [3, 1], unroll_T=1)
    arch = OpLstmArch(
        [dx, hid, n], acts, tape.constant(1.7), 1,
        {Activation.RELU: FnCell(lambda z: z[:, 0] * 0.0),
         Activation.SOFTMAX: FnCell(lambda z: z[:, 1])},
    )
    state = OpLstmState(state.H, state.b, oplstm.zero_node_states(tape, arch))
    labels = np.array([0, 1, 2, 0, 1, 2])
    support = [(rng.normal(size=dx), np.eye(n)[c]) for c in labels]
    adapted = oplstm.adapt(state, arch, support)
    emb = oplstm.forward(state, arch, np.stack([x for x, _ in support])).a[1].data
    worst_cos = 1.0
    for cls in range(n):
        mean_dir = sum(emb[i] / np.linalg.norm(emb[i]) for i in range(m) if labels[i] == cls)
        row = adapted.H[1].data[cls]
        cos = row @ mean_dir / (np.linalg.norm(row) * np.linalg.norm(mean_dir))
        worst_cos = min(worst_cos, cos)

    ok = worst <= 1e-12 and worst_cos >= 1.0 - 1e-9
    _report("prototype equivalences: linear head exact to 1e-12 on 100 cases; "
            "one-pass construction rows align with class means (cos 1 +- 1e-9)",
            ok, f"max |diff|={worst:.2e}, min row cosine={worst_cos:.12f}")


def test_maml_stub_update_directions():
    rng = np.random.default_rng(4)
    eta = 0.25
    dims = [3, 4, 2]
    acts = [Activation.IDENTITY, Activation.IDENTITY]
    worst = 1.0
    for trial in range(10):
        arrays = oplstm.oplstm_arrays(np.random.default_rng(50 + trial), dims, acts, [2, 1])
        x = rng.normal(size=3)
        y = rng.normal(size=2)

        tape = Tape()
        arch, state = oplstm.bind_oplstm(tape, arrays, dims, acts, [2, 1], unroll_T=1)
        # reference per-layer activation gradients from the baselines module
        mlp = baselines.MlpParams(weights=list(state.H), biases=list(state.b),
                                  activations=acts)
        deltas = baselines.activation_gradients(mlp, x, y)

        trace = oplstm.forward(state, arch, x.reshape(1, -1))
        from metalstm.ndtensor import stack_last

        z2 = stack_last(trace.a[2], tape.constant(y.reshape(1, -1)))
        scale = 2.0 / y.size  # mean-squared-error gradient of the reference
        top = FnCell(lambda z: (z[:, 0] - z[:, 1]) * (-eta * scale))
        h2 = top.step(z2.reshape(2, 2), [])[0].reshape(1, 2)
        msg = h2 @ state.H[1]
        z1 = stack_last(trace.a[1], msg)
        h1 = FnCell(lambda z: z[:, 1]).step(z1.reshape(4, 2), [])[0].reshape(1, 4)

        for layer, h_rows in ((1, h1), (2, h2)):
            before = state.H[layer - 1].data
            after = oplstm.hidden_matrix_update(
                state.H[layer - 1], h_rows, trace.a[layer - 1], arch.gamma
            )
            update = (after.data - before).ravel()
            maml_dir = (-eta * np.outer(deltas[layer - 1], trace.a[layer - 1].data[0])).ravel()
            cos = update @ maml_dir / (np.linalg.norm(update) * np.linalg.norm(maml_dir))
            worst = min(worst, cos)
    _report("gradient-stub cells reproduce per-example MAML update directions "
            "(cosine 1 +- 1e-6)", worst >= 1.0 - 1e-6, f"min cosine={worst:.9f}")


def test_bias_immutability_and_bounded_updates():
    rng = np.random.default_rng(5)
    gamma = 0.8
    dims = [3, 5, 4]
    acts = [Activation.RELU, Activation.SOFTMAX]
    arrays = oplstm.oplstm_arrays(np.random.default_rng(6), dims, acts, [3, 1], gamma_init=gamma)
    tape = Tape()
    arch, state = oplstm.bind_oplstm(tape, arrays, dims, acts, [3, 1], unroll_T=4,
                                     learn_gamma=False)
    support = [
        (rng.normal(size=3), np.eye(4)[rng.integers(4)]) for _ in range(6)
    ]
    before = [b.data.copy() for b in state.b]
    adapted, history = oplstm.adapt(state, arch, support, record_history=True)
    bias_ok = all(np.array_equal(b.data, arr) for b, arr in zip(adapted.b, before))
    max_step = 0.0
    for prev, nxt in zip(history, history[1:]):
        for h0, h1 in zip(prev, nxt):
            max_step = max(max_step, float(np.linalg.norm(h1 - h0)))
    ok = bias_ok and max_step <= gamma + 1e-9
    _report("bias immutability and |dH|_F <= gamma per pass",
            ok, f"bias bit-identical={bias_ok}, max |dH|={max_step:.4f}, gamma={gamma}")


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    sections = ckpt_mod.pack_state(
        "learner = maml\n", 42,
        {"W.1": rng.normal(size=(4, 3)), "b.1": rng.normal(size=4)},
        adam_m={"W.1": rng.normal(size=(4, 3)), "b.1": rng.normal(size=4)},
        adam_v={"W.1": rng.normal(size=(4, 3)) ** 2, "b.1": rng.normal(size=4) ** 2},
        adam_step_count=17,
        rng_state=np.random.default_rng(0).bit_generator.state,
        best={"W.1": rng.normal(size=(4, 3)), "b.1": rng.normal(size=4)},
        best_metric=0.123456789,
        best_iteration=21,
    )
    path = str(tmp_path / "c.bin")
    ckpt_mod.checkpoint_save(path, sections)
    loaded = ckpt_mod.checkpoint_load(path)
    ok = set(loaded) == set(sections)
    for k, v in sections.items():
        if isinstance(v, bytes):
            ok = ok and loaded[k] == v
        else:
            ok = ok and loaded[k].tobytes() == np.asarray(v, dtype=np.float64).tobytes()
    _report("checkpoint round-trip is bit-exact", ok, f"{len(sections)} sections compared")


def test_fixed_seed_determinism(tmp_path):
    cfg_kw = dict(
        learner="op_lstm", task="sine", shots=3, queries=5, hidden=[6],
        cw_hidden=[3, 1], unroll_t=2, meta_batch=2, meta_iterations=30,
        val_every=10, val_tasks=5, test_tasks=5, log_every=10, seed=11,
    )
    a = meta_train(RunConfig(out=str(tmp_path / "a"), **cfg_kw).finalize(), quiet=True)
    b = meta_train(RunConfig(out=str(tmp_path / "b"), **cfg_kw).finalize(), quiet=True)
    rows_a = [(r.iteration, r.split, r.metric, r.mean, r.ci95) for r in a.log.rows]
    rows_b = [(r.iteration, r.split, r.metric, r.mean, r.ci95) for r in b.log.rows]
    params_ok = all(np.array_equal(a.final_params[k], b.final_params[k]) for k in a.final_params)
    ok = rows_a == rows_b and params_ok
    _report("fixed-seed determinism in single-context mode (metrics and parameters)",
            ok, f"{len(rows_a)} log rows identical={rows_a == rows_b}, params identical={params_ok}")


# -- secondary component ---------------------------------------------------------


def test_figure_scripts_on_primary_logs(trained, tmp_path):
    figdir = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "figures")

    # hand-computed band on a synthetic 3-seed CSV
    header = "iteration,split,metric,mean,ci95,seconds\n"
    paths = []
    values = [0.9, 1.1, 1.6]
    for s, v in enumerate(values):
        p = tmp_path / f"seed{s}.csv"
        p.write_text(header + f"100,val,mse,{v},0.0,1.0\n")
        paths.append(str(p))
    sys.path.insert(0, figdir)
    try:
        from figlib import band_stats

        mean, hw = band_stats([np.array([v]) for v in values])
        want_hw = 1.96 * np.std(values, ddof=1) / np.sqrt(3)
        band_ok = abs(hw[0] - want_hw) < 1e-12 and abs(mean[0] - np.mean(values)) < 1e-12
    finally:
        sys.path.remove(figdir)

    env = dict(os.environ)
    out1 = str(tmp_path / "band.png")
    r1 = subprocess.run(
        [sys.executable, os.path.join(figdir, "learning_curves.py"),
         "--csv", *paths, "--metric", "mse", "--out", out1],
        capture_output=True, text=True, env=env,
    )

    # end-to-end on the real logs of the sequential-vs-batched comparison runs
    csv_args = []
    for shots in (5, 10, 20):
        for mode in ("sequential", "batched"):
            for s in range(3):
                csv_args.append(trained[f"fig4_{mode}_{shots}_{s}"]["metrics_csv"])
    out2 = str(tmp_path / "shots.png")
    r2 = subprocess.run(
        [sys.executable, os.path.join(figdir, "shot_comparison.py"),
         "--csv", *csv_args, "--metric", "mse", "--out", out2],
        capture_output=True, text=True, env=env,
    )
    ok = (band_ok and r1.returncode == 0 and os.path.getsize(out1) > 0
          and r2.returncode == 0 and os.path.getsize(out2) > 0)
    _report("figure scripts: hand-computed CI band and end-to-end on real logs",
            ok, f"band_ok={band_ok}, curves rc={r1.returncode}, shots rc={r2.returncode}")
