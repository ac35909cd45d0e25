"""Run several short calibration configs, two at a time, and rank them."""

import json
import subprocess
import sys

PROBES = {
    # plain LSTM 5-shot sine variants
    "L_lr3_T5": {"learner": "plain_lstm", "task": "sine", "shots": 5, "hidden": [40, 40],
                 "unroll_t": 5, "meta_batch": 2, "outer_lr": 0.003},
    "L_lr10_T8": {"learner": "plain_lstm", "task": "sine", "shots": 5, "hidden": [40, 40],
                  "unroll_t": 8, "meta_batch": 2, "outer_lr": 0.01},
    "L_lr10_T3_h40": {"learner": "plain_lstm", "task": "sine", "shots": 5, "hidden": [40],
                      "unroll_t": 3, "meta_batch": 2, "outer_lr": 0.01},
    "L_lr30_T5": {"learner": "plain_lstm", "task": "sine", "shots": 5, "hidden": [40, 40],
                  "unroll_t": 5, "meta_batch": 2, "outer_lr": 0.03},
    # OP-LSTM 10-shot sine variants
    "O_g2_lr5_T5": {"learner": "op_lstm", "task": "sine", "shots": 10, "hidden": [40, 40],
                    "cw_hidden": [20, 1], "unroll_t": 5, "meta_batch": 2, "outer_lr": 0.005,
                    "gamma_init": 2.0},
    "O_g1_lr10_T3": {"learner": "op_lstm", "task": "sine", "shots": 10, "hidden": [20, 20],
                     "cw_hidden": [20, 1], "unroll_t": 3, "meta_batch": 2, "outer_lr": 0.01,
                     "gamma_init": 1.0},
    "O_g5_lr5_T3": {"learner": "op_lstm", "task": "sine", "shots": 10, "hidden": [20, 20],
                    "cw_hidden": [20, 1], "unroll_t": 3, "meta_batch": 2, "outer_lr": 0.005,
                    "gamma_init": 5.0},
    "O_g2_lr10_T5_small": {"learner": "op_lstm", "task": "sine", "shots": 10, "hidden": [20],
                           "cw_hidden": [20, 1], "unroll_t": 5, "meta_batch": 2,
                           "outer_lr": 0.01, "gamma_init": 2.0},
}

COMMON = {"val_every": 400, "val_tasks": 150, "test_tasks": 300, "seed": 0,
          "meta_iterations": 2000, "log_every": 400}


def main():
    jobs = []
    for tag, spec in PROBES.items():
        full = {"tag": tag, **COMMON, **spec}
        jobs.append((tag, json.dumps(full)))
    procs = []
    results = {}
    pending = list(jobs)
    running = []
    while pending or running:
        while pending and len(running) < 2:
            tag, arg = pending.pop(0)
            p = subprocess.Popen([sys.executable, "calib.py", arg],
                                 stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
            running.append((tag, p))
        for tag, p in list(running):
            if p.poll() is not None:
                running.remove((tag, p))
                try:
                    results[tag] = json.load(open(f"/tmp/calib/{tag}.json"))
                except FileNotFoundError:
                    results[tag] = {"error": "missing"}
        import time

        time.sleep(1)
    for tag, r in sorted(results.items(), key=lambda kv: kv[1].get("best", 9e9)):
        print(tag, json.dumps(r))


if __name__ == "__main__":
    main()
