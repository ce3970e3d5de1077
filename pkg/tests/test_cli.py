import csv
import json
import subprocess
import sys

import pytest

from confsets.cli import main
from confsets.storage import read_embeddings, read_model


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--seed", "7", "--points-per-class", "300", "--out", str(out)]) == 0
    return out / "seed7"


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_simulate_default_size(tmp_path):
    assert main(["simulate", "--seed", "0", "--out", str(tmp_path)]) == 0
    assert read_embeddings(tmp_path / "seed0" / "all.csv").n == 25_000
    meta = json.loads((tmp_path / "seed0" / "meta.json").read_text())
    assert meta["sim_config"]["points_per_class"] == 5000 and meta["sim_config"]["z_amplitude"] == 0.5
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["subcommand"] == "simulate" and man["seeds"] == [0]
    assert set(man["outputs"]) >= {str(tmp_path / "seed0" / n) for n in ("train.csv", "cal.csv", "test.csv")}


def test_simulate_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["simulate", "--seed", "7", "--points-per-class", "100", "--out", str(tmp_path / d)]) == 0
    for name in ("all.csv", "train.csv", "cal.csv", "test.csv", "meta.json"):
        assert (tmp_path / "a" / "seed7" / name).read_bytes() == (tmp_path / "b" / "seed7" / name).read_bytes()


def test_usage_error_exit_code(tmp_path, capsys):
    assert main(["simulate", "--classes", "0", "--out", str(tmp_path / "x")]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "UsageError" and err["exit_code"] == 2
    assert json.loads((tmp_path / "x" / "error.json").read_text())["exit_code"] == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "confsets", "train", "--out", str(tmp_path / "m.json")],
                       capture_output=True, text=True)
    assert r.returncode == 2 and json.loads(r.stderr.strip())["error"] == "UsageError"


def test_train_single_neg_30_epochs(sim, tmp_path):
    m = tmp_path / "m.json"
    assert main(["train", "--train", str(sim), "--method", "single", "--objective", "neg", "--k", "20",
                 "--out", str(m)]) == 0
    hist = _rows(str(m) + ".history.csv")
    assert [int(r[0]) for r in hist[1:]] == list(range(31))
    assert read_model(m).kind == "single" and read_model(m).q_hat is None


def test_train_zero_epochs_passthrough(sim, tmp_path):
    m = tmp_path / "m.json"
    assert main(["train", "--train", str(sim), "--epochs", "0", "--k", "10", "--out", str(m)]) == 0
    mf = read_model(m)
    assert mf.params.m.tolist() == [1.0, 1.0, 1.0] and mf.params.p.tolist() == [2.0, 2.0, 2.0]


def test_train_vol_positive_only(sim, tmp_path):
    m = tmp_path / "m.json"
    assert main(["train", "--train", str(sim), "--method", "generalized", "--objective", "vol", "--epochs", "2",
                 "--k", "10", "--out", str(m)]) == 0
    man = json.loads((tmp_path / "m.json.manifest.json").read_text())
    assert man["selection"] == "log_volume"


def test_train_rejects_negative_objective_without_negatives(sim, tmp_path):
    assert main(["train", "--train", str(sim), "--objective", "neg", "--no-negatives",
                 "--out", str(tmp_path / "m.json")]) == 2


def test_calibrate_evaluate_ood(sim, tmp_path):
    m, c = tmp_path / "m.json", tmp_path / "c.json"
    assert main(["train", "--train", str(sim), "--epochs", "1", "--k", "10", "--out", str(m)]) == 0
    assert main(["calibrate", "--model", str(m), "--cal", str(sim), "--out", str(c)]) == 0
    assert read_model(c).q_hat > 0 and read_model(c).n_cal == 150
    ev = tmp_path / "ev.json"
    assert main(["evaluate", "--model", str(c), "--test", str(sim), "--cal", str(sim), "--k", "20",
                 "--out", str(ev)]) == 0
    rep = json.loads(ev.read_text())
    assert 0.8 < rep["coverage"]["mean"] <= 1.0
    assert _rows(str(ev) + ".csv")[0][0] == "method"
    ood = tmp_path / "ood"
    assert main(["simulate", "--seed", "8", "--points-per-class", "300", "--shift", "10", "--collapse",
                 "--out", str(ood)]) == 0
    o = tmp_path / "o.json"
    assert main(["ood", "--model", str(c), "--id", str(sim), "--ood", str(ood / "seed8"), "--k", "20",
                 "--out", str(o)]) == 0
    res = json.loads(o.read_text())
    assert 0.0 <= res["auroc"] <= 1.0 and 0.0 <= res["fpr95"] <= 1.0


def test_baseline_calibration(sim, tmp_path):
    for method in ("l2", "mahalanobis"):
        out = tmp_path / f"{method}.json"
        assert main(["calibrate", "--method", method, "--cal", str(sim), "--out", str(out)]) == 0
        assert read_model(out).kind == method


def test_split_overlap_refused(sim, tmp_path, capsys):
    c = tmp_path / "c.json"
    assert main(["calibrate", "--method", "l2", "--cal", str(sim), "--out", str(c)]) == 0
    rc = main(["evaluate", "--model", str(c), "--test", str(sim / "cal.csv"), "--cal", str(sim / "cal.csv"),
               "--k", "20", "--out", str(tmp_path / "e.json")])
    assert rc == 1
    assert "overlap" in json.loads((tmp_path / "e.json.error.json").read_text())["message"]


def test_uncalibrated_evaluate_fails(sim, tmp_path):
    m = tmp_path / "m.json"
    main(["train", "--train", str(sim), "--epochs", "0", "--out", str(m)])
    assert main(["evaluate", "--model", str(m), "--test", str(sim), "--out", str(tmp_path / "e.json")]) == 1
    assert "uncalibrated" in (tmp_path / "e.json.error.json").read_text()


def test_missing_input(tmp_path):
    assert main(["calibrate", "--method", "l2", "--cal", str(tmp_path / "nope.csv"),
                 "--out", str(tmp_path / "c.json")]) == 1


def test_sweep_and_pipeline_are_reproducible(tmp_path):
    args = ["--seeds", "0-1", "--epochs", "1", "--k", "10", "--points-per-class", "150"]
    for r in ("a", "b"):
        assert main(["pipeline", *args, "--eval-k", "10", "--methods", "l2,mahalanobis,generalized-neg",
                     "--out", str(tmp_path / r)]) == 0
    a, b = (tmp_path / "a" / "table.csv").read_bytes(), (tmp_path / "b" / "table.csv").read_bytes()
    assert a == b and len(a.splitlines()) == 4
    sw = tmp_path / "sw.csv"
    assert main(["sweep", *args, "--param", "alpha", "--values", "0.1,0.2", "--objective", "neg",
                 "--out", str(sw)]) == 0
    rows = _rows(sw)
    assert rows[0][0] == "alpha" and [r[0] for r in rows[1:]] == ["0.1", "0.2"]


def test_pipeline_unknown_method(tmp_path):
    assert main(["pipeline", "--methods", "l3", "--out", str(tmp_path / "p")]) == 2


def test_bench_small_grid(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench", "--dims", "4,8", "--n", "200", "--repeats", "1", "--backends", "numpy",
                 "--out", str(out)]) == 0
    rows = _rows(out)
    assert rows[0] == ["backend", "metric", "d", "n", "seconds"] and len(rows) == 5
    assert set(json.loads((tmp_path / "b.csv.slopes.json").read_text())) == {"numpy/generalized", "numpy/single"}
