"""Calibration driver: train one config, print the val trajectory and test score."""

import json
import sys
import time

from metalstm.harness.config import RunConfig
from metalstm.harness.train import meta_train


def run(tag: str, **kw):
    t0 = time.time()
    cfg = RunConfig(out=f"/tmp/calib/{tag}", **kw).finalize()
    result = meta_train(cfg, quiet=False)
    out = {
        "tag": tag,
        "minutes": (time.time() - t0) / 60.0,
        "best": result.best_metric,
        "best_iter": result.best_iteration,
        "test": {k: v for k, v in result.test_metrics.items()},
    }
    print(json.dumps(out))
    with open(f"/tmp/calib/{tag}.json", "w") as fh:
        json.dump(out, fh)


if __name__ == "__main__":
    spec = json.loads(sys.argv[1])
    run(**spec)
