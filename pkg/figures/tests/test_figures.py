import numpy as np
import pytest

import learning_curves
import shot_comparison
import update_similarity
from figlib import FigureSpec, band_stats, curve, plot_metric, read_metrics

HEADER = "iteration,split,metric,mean,ci95,seconds\n"


def _write_csv(path, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write(HEADER)
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")


def _seed_csv(path, values, split="val", metric="mse", test_value=None):
    rows = [(it, split, metric, v, 0.0, 1.0) for it, v in values]
    if test_value is not None:
        last = max(it for it, _ in values)
        rows.append((last, "test", metric, test_value, 0.0, 2.0))
    _write_csv(path, rows)


def test_band_stats_single_seed_has_zero_width():
    mean, hw = band_stats([np.array([1.0, 2.0, 3.0])])
    assert np.array_equal(mean, [1.0, 2.0, 3.0])
    assert np.array_equal(hw, [0.0, 0.0, 0.0])


def test_band_stats_identical_seeds_have_zero_width():
    ys = np.array([0.5, 0.25])
    _, hw = band_stats([ys, ys.copy()])
    assert np.array_equal(hw, [0.0, 0.0])


def test_band_stats_three_seeds_match_hand_computation():
    a = np.array([1.0])
    b = np.array([2.0])
    c = np.array([4.0])
    mean, hw = band_stats([a, b, c])
    sigma = np.std([1.0, 2.0, 4.0], ddof=1)
    assert mean[0] == pytest.approx(7.0 / 3.0)
    assert hw[0] == pytest.approx(1.96 * sigma / np.sqrt(3.0))


def test_read_metrics_validates_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        read_metrics(str(p))


def test_curve_missing_metric_raises(tmp_path):
    p = tmp_path / "m.csv"
    _seed_csv(str(p), [(10, 0.5)])
    rows = read_metrics(str(p))
    with pytest.raises(ValueError):
        curve(rows, "val", "accuracy")


def test_plot_metric_writes_deterministic_png(tmp_path):
    paths = []
    for s in range(3):
        p = tmp_path / f"s{s}.csv"
        _seed_csv(str(p), [(10, 1.0 + s), (20, 0.5 + 0.1 * s)])
        paths.append(str(p))
    spec = FigureSpec(csv_paths=paths, split="val", metric="mse",
                      out_path=str(tmp_path / "o1.png"))
    out1 = plot_metric(spec)
    spec2 = FigureSpec(csv_paths=paths, split="val", metric="mse",
                       out_path=str(tmp_path / "o2.png"))
    out2 = plot_metric(spec2)
    b1 = open(out1, "rb").read()
    b2 = open(out2, "rb").read()
    assert b1 and b1 == b2


def test_plot_metric_rejects_mismatched_grids(tmp_path):
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    _seed_csv(str(p1), [(10, 1.0)])
    _seed_csv(str(p2), [(20, 1.0)])
    with pytest.raises(ValueError):
        plot_metric(FigureSpec([str(p1), str(p2)], "val", "mse", str(tmp_path / "o.png")))


def test_learning_curves_cli(tmp_path):
    paths = []
    for s in range(2):
        p = tmp_path / f"s{s}.csv"
        _seed_csv(str(p), [(5, 2.0 - s * 0.5), (10, 1.0)])
        paths.append(str(p))
    out = tmp_path / "curves.png"
    assert learning_curves.main(["--csv", *paths, "--metric", "mse", "--out", str(out)]) == 0
    assert out.stat().st_size > 0


def test_shot_comparison_cli_with_labels(tmp_path):
    args = []
    for mode in ("sequential", "batched"):
        for k in (5, 10):
            for s in range(3):
                p = tmp_path / f"{mode}_{k}_{s}.csv"
                value = (0.3 if mode == "batched" else 0.5) + 0.01 * s + 0.001 * k
                _seed_csv(str(p), [(10, 1.0)], test_value=value)
                args.append(f"{mode}:{k}={p}")
    out = tmp_path / "shots.png"
    assert shot_comparison.main(["--csv", *args, "--metric", "mse", "--out", str(out)]) == 0
    assert out.stat().st_size > 0


def test_shot_comparison_reads_sibling_config(tmp_path):
    run = tmp_path / "run0"
    run.mkdir()
    _seed_csv(str(run / "metrics.csv"), [(10, 1.0)], test_value=0.25)
    (run / "config.txt").write_text("ingestion = batched\nshots = 5\nseed = 0\n")
    out = tmp_path / "s.png"
    assert shot_comparison.main(["--csv", str(run / "metrics.csv"), "--out", str(out)]) == 0


def test_update_similarity_cli(tmp_path):
    paths = []
    for s in range(3):
        rows = []
        for it in (10, 20):
            rows.append((it, "analysis", "cos_op_gd", 0.5 + 0.01 * s, 0.0, 1.0))
            rows.append((it, "analysis", "cos_op_proto", 0.4 - 0.01 * s, 0.0, 1.0))
        p = tmp_path / f"s{s}.csv"
        _write_csv(str(p), rows)
        paths.append(str(p))
    out = tmp_path / "sim.png"
    assert update_similarity.main(["--csv", *paths, "--kind", "cosine", "--out", str(out)]) == 0
    assert out.stat().st_size > 0
