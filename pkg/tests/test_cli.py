import json

import numpy as np
import pytest

from pulse_sysid import cli, dataio
from pulse_sysid.forecast import RolloutResult

TINY_TST = ["--context-len", "32", "--horizon", "8", "--patch-len", "8", "--d-model", "8", "--n-heads", "2",
            "--n-layers", "1", "--d-ff", "8", "--max-epochs", "2", "--max-windows-per-epoch", "64",
            "--max-val-windows", "64"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("synth", "--out", d, "--cycles", "0,20,40,60,120", "--repeats", "2") == 0
    return d


def test_synth_is_deterministic(tmp_path, data):
    other = tmp_path / "again"
    assert run("synth", "--out", other, "--cycles", "0,20,40,60,120", "--repeats", "2") == 0
    for f in sorted(data.glob("cycle_*.csv")):
        assert (other / f.name).read_bytes() == f.read_bytes()


def test_synth_layout(tmp_path):
    assert run("synth", "--out", tmp_path, "--cycles", "0") == 0
    s = dataio.load_series(tmp_path / "cycle_000.csv")
    prev = np.r_[0.0, s.i[:-1]]
    starts = np.flatnonzero((s.i > 0) & (prev <= 0))
    assert len(starts) == 20  # pulse plus deep discharge per repeat
    pulses = [k for k in starts if np.all(s.i[k:k + 2] == 10.0) and s.i[k + 2] == 0.0]
    assert len(pulses) == 10
    cfg = json.loads((tmp_path / "synth_config.json").read_text())
    assert cfg["cycles"] == [0] and cfg["repeats"] == 10
    assert json.loads((tmp_path / "ecm_config.json").read_text())["protocol"]["repeats"] == 10


def test_noiseless_synth_ignores_seed(tmp_path):
    for seed in (1, 2):
        assert run("synth", "--out", tmp_path / str(seed), "--cycles", "0", "--repeats", "1",
                   "--noise-std-v", "0", "--seed", seed) == 0
    assert (tmp_path / "1/cycle_000.csv").read_bytes() == (tmp_path / "2/cycle_000.csv").read_bytes()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"cycles": [0], "repeats": 1, "noise_std_v": 0.0}))
    assert run("synth", "--config", cfg, "--out", tmp_path / "o", "--repeats", "2") == 0
    resolved = json.loads((tmp_path / "o/synth_config.json").read_text())
    assert resolved["repeats"] == 2 and resolved["noise_std_v"] == 0.0


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("synth", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_inputs_exit_2(tmp_path, capsys):
    assert run("fit-ocv", "--out", tmp_path, "--data", tmp_path / "nope") == 2
    assert "not found" in capsys.readouterr().err
    assert run("train-tst", "--out", tmp_path, "--data", tmp_path) == 2
    assert "--split" in capsys.readouterr().err
    assert run("eval", "--out", tmp_path, "--rollouts", tmp_path / "none") == 2


def test_full_pipeline(tmp_path, data, capsys):
    split = tmp_path / "split"
    assert run("fit-ocv", "--out", split, "--data", data) == 0
    spec = json.loads((split / "split.json").read_text())
    assert spec["test_files"] == ["cycle_120"]
    assert len((split / "ocv_table.csv").read_text().splitlines()) == 129

    dm = tmp_path / "dmdc"
    assert run("fit-dmdc", "--out", dm, "--data", data, "--m", "16", "--d-u", "4") == 0
    assert json.loads((dm / "dmdc_fit.json").read_text())["file_id"] == "cycle_000"

    tst = tmp_path / "tst"
    assert run("train-tst", "--out", tst, "--data", data, "--split", split, *TINY_TST) == 0
    hist = (tst / "history.csv").read_text().splitlines()
    assert hist[0] == "epoch,train_loss,val_loss,lr" and len(hist) == 3

    ra, rb = tmp_path / "ra", tmp_path / "rb"
    assert run("rollout", "--out", ra, "--data", data, "--model", dm / "dmdc.npz", "--split", split) == 0
    assert run("rollout", "--out", rb, "--data", data, "--model", tst / "tst.npz", "--split", split) == 0
    assert (rb / "cycle_120.tst.csv").is_file()

    assert run("eval", "--out", tmp_path / "ev", "--rollouts", rb) == 0
    assert (tmp_path / "ev/eval_tst.csv").is_file()
    capsys.readouterr()
    assert run("report", "--out", tmp_path / "rep", "--rollouts", f"{ra},{rb}") == 0
    printed = capsys.readouterr().out
    rows = (tmp_path / "rep/report.csv").read_text().splitlines()
    assert rows[0].startswith("model,region") and len(rows) == 1 + 4 * 2
    assert "common-region" in printed and "dmdc" in printed and "tst" in printed


def test_eval_of_perfect_rollout(tmp_path, data):
    s = dataio.load_series(data / "cycle_000.csv")
    r = RolloutResult("cycle_000", 0, s.t, s.v, s.v.copy(), 100, "oracle")
    r.save(tmp_path / "r.csv")
    (tmp_path / "rollouts.json").write_text(json.dumps([{"file_id": "cycle_000", "cycle_index": 0,
        "model_tag": "oracle", "eval_start_idx": 100, "chunk_lengths": [], "csv": "r.csv"}]))
    assert run("eval", "--out", tmp_path / "ev", "--rollouts", tmp_path) == 0
    last = (tmp_path / "ev/eval_oracle.csv").read_text().splitlines()[-1].split(",")
    assert float(last[4]) == 0.0


def test_sweep_and_modes(tmp_path, data, capsys):
    assert run("sweep", "--out", tmp_path, "--data", data, "--m", "16") == 0
    rows = (tmp_path / "sweep_d_u.csv").read_text().splitlines()
    assert rows[0] == "d_u,rss,rmse" and len(rows) == 13
    assert capsys.readouterr().out.startswith("best d_u = ")
    assert run("sweep", "--out", tmp_path, "--data", data, "--param", "x") == 2
    assert run("modes", "--out", tmp_path, "--data", data, "--m", "8", "--d-u", "4") == 0
    dom = (tmp_path / "modes_dominant.csv").read_text().splitlines()
    assert len(dom) == 6
