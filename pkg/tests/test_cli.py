from datetime import datetime, timedelta

import numpy as np
import pytest

from fairride.cli import main
from fairride.experiment import read_table
from fairride.ingest import RawTrip, Timeline, write_trip_records

TINY = ["--nodes=8", "--n_pairs=6", "--mean_rate=1.0", "--drivers=3", "--hist_days=3", "--eval_days=1", "--lag=4",
        "--hidden=4", "--forecast_epochs=3", "--episodes=6", "--n_seeds=1", "--horizons=1", "--shift_day=2"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_usage_error_exit_1(capsys):
    assert run(capsys, "bogus")[0] == 1
    assert run(capsys, "table", "--episodes=x")[0] == 1
    assert run(capsys, "table", "stray")[0] == 1
    assert run(capsys, "eval", "--policy=laf", *TINY)[0] == 1


def test_config_file_errors(capsys, tmp_path):
    bad = tmp_path / "c.txt"
    bad.write_text("drivers = 0\n")
    code, _, err = run(capsys, "table", f"--config={bad}")
    assert code == 1 and "drivers" in err


def test_runtime_failure_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "forecast", "--requests", str(tmp_path / "missing.csv"), "--out", str(tmp_path))
    assert code == 2 and "error" in err


def test_synth_then_eval_from_files(capsys, tmp_path):
    assert run(capsys, "synth", "--out", str(tmp_path / "city"), *TINY)[0] == 0
    tl = Timeline.load(tmp_path / "city" / "requests.csv")
    assert len(tl) > 0 and (tmp_path / "city" / "graph.txt").exists()
    code, out, _ = run(capsys, "eval", "--policy=matching", "--source=files",
                       f"--graph_file={tmp_path / 'city' / 'graph.txt'}",
                       f"--requests_file={tmp_path / 'city' / 'requests.csv'}", "--out", str(tmp_path / "r"), *TINY)
    assert code == 0 and "matching" in out
    assert [r["method"] for r in read_table(tmp_path / "r" / "metrics.csv")] == ["matching"]


def test_table_and_ablation(capsys, tmp_path):
    code, out, _ = run(capsys, "table", "--out", str(tmp_path / "t"), *TINY)
    assert code == 0
    head = (tmp_path / "t" / "table1.txt").read_text().splitlines()
    assert [ln.split()[0] for ln in head] == ["method", "greedy", "matching", "momaql"]
    assert run(capsys, "ablation", "--out", str(tmp_path / "a"), *TINY)[0] == 0
    rows = read_table(tmp_path / "a" / "metrics.csv")
    assert [r["method"] for r in rows] == ["momaql", "momaql_no_pred", "momaql_no_fair"]


def test_horizon_prints_series(capsys, tmp_path):
    code, out, _ = run(capsys, "horizon", "--policies=greedy", "--out", str(tmp_path), *TINY)
    assert code == 0 and "fairness by horizon" in out
    assert len(read_table(tmp_path / "horizon.csv")) == 1


def test_train_then_eval_checkpoint(capsys, tmp_path):
    assert run(capsys, "train", "--policy=momaql", "--out", str(tmp_path), *TINY)[0] == 0
    ckpt = tmp_path / "qtables_momaql_seed0.txt"
    assert ckpt.exists() and (tmp_path / "curve_momaql_seed0.csv").exists()
    code, _, _ = run(capsys, "eval", "--policy=momaql", "--qtables", str(tmp_path / "qtables_momaql_seed{seed}.txt"),
                     "--out", str(tmp_path / "e"), *TINY)
    assert code == 0
    # evaluating the checkpoint reproduces the in-process train+eval arm
    assert run(capsys, "eval", "--policy=momaql", "--out", str(tmp_path / "f"), *TINY)[0] == 0
    assert read_table(tmp_path / "e" / "metrics.csv") == read_table(tmp_path / "f" / "metrics.csv")


def test_train_rejects_baseline(capsys, tmp_path):
    assert run(capsys, "train", "--policy=greedy", "--out", str(tmp_path), *TINY)[0] == 1


def test_ingest_and_forecast(capsys, tmp_path):
    rng = np.random.default_rng(0)
    t0 = datetime(2016, 3, 1)
    spots = [(-73.98, 40.75), (-73.95, 40.78), (-73.99, 40.72)]
    trips = []
    for k in range(600):
        a, b = rng.choice(3, 2, replace=False)
        trips.append(RawTrip(t0 + timedelta(minutes=int(rng.integers(0, 4 * 24 * 60))),
                             *spots[a], *spots[b], float(rng.integers(300, 900))))
    trips.sort(key=lambda r: r.pickup_time)
    write_trip_records(tmp_path / "trips.csv", trips)
    code, out, _ = run(capsys, "ingest", "--trips", str(tmp_path / "trips.csv"), "--out", str(tmp_path / "d"),
                       "--batch-seconds=3600", "--travel-time-column=travel_time")
    assert code == 0 and "3 nodes" in out
    code, out, _ = run(capsys, "forecast", "--requests", str(tmp_path / "d" / "requests.csv"),
                       "--out", str(tmp_path / "f"), "--lag=6", "--hidden=4", "--epochs=5", "--train-before=72")
    assert code == 0 and "held-out pooled MSE" in out
    lines = (tmp_path / "f" / "predictions.csv").read_text().splitlines()
    assert lines[0] == "s_r,d_r,hour,predicted" and len(lines) > 1
    assert (tmp_path / "f" / "models.json").exists()


@pytest.mark.parametrize("cmd", ["synth", "train", "eval", "table", "horizon", "ablation", "ingest", "forecast"])
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
