import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from ssir import cli
from ssir.dataset import DatasetSplit, LabeledSample, Vocabulary, write_container
from ssir.model import ModelConfig, init_params, save_checkpoint

TINY = {"model": {"hidden_dim": 16, "n_heads": 2},
        "train": {"epochs": 1, "batch_size": 16, "beam_width": 1}}


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "config.json").write_text(json.dumps(TINY))
    assert cli.main(["gen", "--out", str(d / "data"), "--participants", "1",
                     "--samples-per-word", "10", "--samples-per-sentence", "10",
                     "--augment-factor", "2"]) == 0
    assert cli.main(["train", "--data", str(d / "data" / "dataset.ssir"), "--out",
                     str(d / "run"), "--config", str(d / "config.json")]) == 0
    return d


def test_gen_and_train_outputs(workdir):
    m = json.loads((workdir / "data" / "gen_manifest.json").read_text())
    assert m["command"] == "gen" and m["seed"] == 0
    assert m["config"]["augment_factor"] == 2
    t = json.loads((workdir / "run" / "train_manifest.json").read_text())
    assert t["config"]["model"]["hidden_dim"] == 16
    assert t["inputs"] == {str(workdir / "data" / "dataset.ssir"):
                           sha(workdir / "data" / "dataset.ssir")}
    log = (workdir / "run" / "train_log.jsonl").read_text().splitlines()
    assert len(log) == 1 and "val_word_accuracy" in json.loads(log[0])


def test_eval_writes_report_and_csvs(workdir):
    data = workdir / "data" / "dataset.ssir"
    before = sha(data)
    out = workdir / "report"
    assert cli.main(["eval", "--data", str(data), "--model", str(workdir / "run" / "model.ssim"),
                     "--report", str(out)]) == 0
    assert sha(data) == before
    rep = json.loads((out / "report.json").read_text())
    assert 0 <= rep["word_accuracy"] <= 1
    assert rep["beam_width"] == 1
    with open(out / "accuracy_by_length.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["group", "mean", "std"]
    assert {r[0] for r in rows[1:]} == set(rep["per_length"])
    assert (out / "eval_manifest.json").exists()


def test_seed_env_overrides_flag(tmp_path, monkeypatch):
    monkeypatch.setenv("SSIR_SEED", "11")
    assert cli.main(["gen", "--out", str(tmp_path), "--participants", "1",
                     "--samples-per-word", "10", "--samples-per-sentence", "0",
                     "--augment-factor", "1", "--seed", "3"]) == 0
    assert json.loads((tmp_path / "gen_manifest.json").read_text())["seed"] == 11


def test_invalid_flags_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["gen"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["ablate", "--data", "x", "--out", "y", "--mode", "sensors"])
    assert e.value.code == 2
    assert cli.main(["gen", "--out", str(tmp_path), "--participants", "0"]) == 2
    (tmp_path / "bad.json").write_text(json.dumps({"train": {"nonsense": 1}}))
    assert cli.main(["train", "--data", "x", "--out", str(tmp_path),
                     "--config", str(tmp_path / "bad.json")]) == 2


def test_missing_file_exit_3(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "none.ssir"),
                     "--out", str(tmp_path)]) == 3


def test_corrupt_container_exit_4(tmp_path):
    p = tmp_path / "bad.ssir"
    p.write_bytes(b"SSIR\x01\x00\x00\x00garbage")
    assert cli.main(["train", "--data", str(p), "--out", str(tmp_path)]) == 4


def test_infeasible_target_exit_5(tmp_path, capsys):
    w = np.random.default_rng(0).normal(size=(8, 6, 6)).astype(np.float32)
    samples = [LabeledSample(f"s{i}", (1, 2, 3, 4, 5), 0, "sentence", w) for i in range(3)]
    split = DatasetSplit(samples[:1], samples[1:2], samples[2:], 0, Vocabulary.default())
    write_container(split, tmp_path / "d.ssir")
    (tmp_path / "c.json").write_text(json.dumps(TINY))
    code = cli.main(["train", "--data", str(tmp_path / "d.ssir"), "--out", str(tmp_path / "o"),
                     "--config", str(tmp_path / "c.json")])
    assert code == 5
    assert "s0" in capsys.readouterr().err


def test_decode_all_blank_model(tmp_path, capsys):
    params = init_params(ModelConfig(hidden_dim=16, n_heads=2), 0)
    params["head_ctc.b"].data[0] = 100.0
    save_checkpoint(tmp_path / "m.ssim", params, Vocabulary.default().tokens)
    np.save(tmp_path / "w.npy", np.random.default_rng(0).normal(size=(80, 6, 6)))
    code = cli.main(["decode", "--model", str(tmp_path / "m.ssim"),
                     "--input", str(tmp_path / "w.npy"), "--out", str(tmp_path / "o")])
    assert code == 0
    assert json.loads((tmp_path / "o" / "decode.json").read_text())["tokens"] == []
    assert capsys.readouterr().out.splitlines()[0] == ""


def test_decode_from_container(workdir, capsys):
    code = cli.main(["decode", "--model", str(workdir / "run" / "model.ssim"),
                     "--input", str(workdir / "data" / "dataset.ssir"), "--index", "0"])
    assert code == 0
    assert "reference" in capsys.readouterr().out


def test_ablate_axes_rows(workdir):
    out = workdir / "ablate"
    assert cli.main(["ablate", "--data", str(workdir / "data" / "dataset.ssir"), "--mode", "axes",
                     "--out", str(out), "--config", str(workdir / "config.json")]) == 0
    with open(out / "ablation_axes.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["group", "mean", "std"]
    assert len(rows) == 1 + 6 + 5
    assert all(0 <= float(r[1]) <= 1 for r in rows[1:])


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "ssir", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen" in r.stdout
    r = subprocess.run([sys.executable, "-m", "ssir", "gen", "--bogus"], capture_output=True)
    assert r.returncode == 2
