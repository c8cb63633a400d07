import csv
import io as _stdio
import json
import subprocess
import sys

import numpy as np
import pytest

from matmamba.cli import main
from matmamba.io import RunConfig, DataConfig, write_image_dataset
from matmamba.training import TrainConfig

from conftest import tiny_lm_config, tiny_vision_config


def _text(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_bytes(b"in the beginning was the word and the word was with god. " * 60)
    return path


def _lm_config(tmp_path, steps=6):
    rc = RunConfig(tiny_lm_config(vocab_size=256),
                   TrainConfig(g=2, total_steps=steps, warmup_steps=2, batch_size=2, seq_len=16, lr=1e-3),
                   DataConfig(text_path=str(_text(tmp_path))))
    path = tmp_path / "lm.json"
    path.write_text(rc.dumps())
    return path


def _vision_config(tmp_path):
    rng = np.random.default_rng(0)
    data = tmp_path / "img.mmimg"
    write_image_dataset(data, rng.integers(0, 256, (40, 8, 8, 1), dtype=np.uint8), rng.integers(0, 5, 40))
    rc = RunConfig(tiny_vision_config(),
                   TrainConfig(g=2, total_steps=4, warmup_steps=1, batch_size=8, lr=1e-3),
                   DataConfig(image_path=str(data), val_fraction=0.25))
    path = tmp_path / "vision.json"
    path.write_text(rc.dumps())
    return path


@pytest.fixture(scope="module")
def lm_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("lm")
    assert main(["train", "--config", str(_lm_config(tmp)), "--seed", "7", "--out", str(tmp / "run")]) == 0
    return tmp


@pytest.fixture(scope="module")
def vision_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("vision")
    cfg = _vision_config(tmp)
    assert main(["train", "--config", str(cfg), "--out", str(tmp / "run")]) == 0
    return tmp, cfg


# ------------------------------------------------------------------- counting

def test_count_params_preset(capsys):
    assert main(["count-params", "--preset", "lm-130m"]) == 0
    assert capsys.readouterr().out.splitlines() == ["embed 38,615,040", "non-embed 90,368,448"]


def test_count_params_block(capsys):
    assert main(["count-params", "--preset", "lm-370m", "--block", "512"]) == 0
    out = capsys.readouterr().out
    assert "weights-only 3,428,640" in out


def test_count_params_granularity(capsys):
    assert main(["count-params", "--preset", "lm-130m", "--granularity", "384"]) == 0
    assert capsys.readouterr().out.startswith("embed 38,615,040")


# --------------------------------------------------------------------- errors

def test_unknown_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["count-params", "--preset", "lm-130m", "--bogus"])
    assert exc.value.code == 2


def test_conflicting_flags(capsys):
    assert main(["count-params", "--preset", "lm-130m", "--granularity", "384", "--dims", "768"]) == 2
    assert "conflicting" in capsys.readouterr().err


def test_mismatched_dims_is_usage_error(lm_run, capsys, tmp_path):
    ckpt = lm_run / "run" / "model.ckpt"
    assert main(["extract", "--ckpt", str(ckpt), "--dims", "32,16,8", "--out", str(tmp_path / "x.ckpt")]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "3 entries" in err
    assert not (tmp_path / "x.ckpt").exists()


def test_invalid_dim_names_layer(lm_run, capsys, tmp_path):
    ckpt = lm_run / "run" / "model.ckpt"
    assert main(["extract", "--ckpt", str(ckpt), "--dims", "32,6", "--out", str(tmp_path / "x.ckpt")]) == 2
    assert "layer 1" in capsys.readouterr().err


def test_missing_checkpoint(capsys, tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "nope.ckpt")]) == 1


def test_config_and_preset_conflict(capsys, tmp_path):
    assert main(["train", "--config", str(_lm_config(tmp_path)), "--preset", "lm-desk", "--out", str(tmp_path)]) == 2


# ------------------------------------------------------------------- training

def test_seeded_train_byte_identical(lm_run, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--config", str(_lm_config(lm_run)), "--seed", "7", "--out", str(again)]) == 0
    for name in ("metrics.jsonl", "model.ckpt", "run.json"):
        assert (again / name).read_bytes() == (lm_run / "run" / name).read_bytes(), name


def test_train_outputs(lm_run):
    run = json.loads((lm_run / "run" / "run.json").read_text())
    assert run["train"]["seed"] == 7
    lines = (lm_run / "run" / "metrics.jsonl").read_text().splitlines()
    assert lines and all(json.loads(x) for x in lines)


# -------------------------------------------------------------- other commands

def test_eval_prints_json(lm_run, capsys):
    assert main(["eval", "--ckpt", str(lm_run / "run" / "model.ckpt"), "--granularity", "16"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["dims"] == [16, 16] and np.isfinite(rec["loss"])


def test_extract_and_generate(lm_run, capsys, tmp_path):
    ckpt = lm_run / "run" / "model.ckpt"
    assert main(["extract", "--ckpt", str(ckpt), "--dims", "8,16", "--out", str(tmp_path / "s.ckpt")]) == 0
    capsys.readouterr()
    assert main(["generate", "--ckpt", str(ckpt), "--dims", "8,16", "--prompt", "in the", "--max-new", "8"]) == 0
    a = capsys.readouterr().out
    assert main(["generate", "--ckpt", str(tmp_path / "s.ckpt"), "--prompt", "in the", "--max-new", "8"]) == 0
    b = capsys.readouterr().out
    assert a == b and a.startswith("in the")


def test_sweep_csv(lm_run, capsys):
    assert main(["sweep", "--ckpt", str(lm_run / "run" / "model.ckpt"), "--ratios", "0.5,0.75",
                 "--samples", "2"]) == 0
    rows = list(csv.DictReader(_stdio.StringIO(capsys.readouterr().out)))
    assert len(rows) == 4 + 4
    assert [float(r["ratio"]) for r in rows] == sorted(float(r["ratio"]) for r in rows)
    assert all(r["error"] == "" for r in rows)


def test_retrieve(vision_run, capsys):
    tmp, cfg = vision_run
    assert main(["retrieve", "--ckpt", str(tmp / "run" / "model.ckpt"), "--config", str(cfg),
                 "--granularity", "16"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["queries"] == 10 and rec["database"] == 30 and 0 <= rec["agreement"] <= 1


def test_vision_eval_has_accuracy(vision_run, capsys):
    tmp, cfg = vision_run
    assert main(["eval", "--ckpt", str(tmp / "run" / "model.ckpt"), "--config", str(cfg)]) == 0
    assert "accuracy" in json.loads(capsys.readouterr().out)


def test_retrieve_rejects_lm(lm_run, capsys):
    assert main(["retrieve", "--ckpt", str(lm_run / "run" / "model.ckpt")]) == 2


def test_bench_csv(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--config", str(_lm_config(tmp_path)), "--seq-lens", "8,16", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 4 * 2 and all(float(r["throughput"]) > 0 for r in rows)


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "matmamba.cli", "count-params", "--preset", "lm-130m"],
                         capture_output=True, text=True, check=True)
    assert "non-embed 90,368,448" in res.stdout
