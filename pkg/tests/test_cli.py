import json
import subprocess
import sys
import time

import pytest

from dt4ecg import cli
from dt4ecg.train import TrainLog


def smoke_config(tmp_path, **overrides):
    cfg = {
        "out_dir": str(tmp_path / "run"),
        "seed": 3,
        "dataset": {"n_subjects": 2, "seconds": 30.0},
        "model": {"n_subjects": 2},
        "train": {"epochs": 2},
        "ablate": {"epochs": 1},
    }
    cfg.update(overrides)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_init_writes_complete_defaults(tmp_path):
    assert run("init", tmp_path / "c.json") == 0
    d = json.loads((tmp_path / "c.json").read_text())
    assert set(d) == {"out_dir", "seed", "dataset", "dsp", "model", "train", "ablate"}
    assert d["dsp"]["notch_hz"] == 40.0 and d["train"]["batch_size"] == 16
    assert cli.RunConfig.from_dict(d).to_dict() == d


def test_unknown_key_rejected(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"train": {"epoch": 3}}))
    assert run("gen", "--config", p) == 2
    assert "epoch" in capsys.readouterr().err


def test_unknown_top_level_key(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"optimizer": "sgd"}))
    assert run("gen", "--config", p) == 2
    assert "optimizer" in capsys.readouterr().err


def test_invalid_json_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "seed": 1,\n  oops\n}')
    assert run("gen", "--config", p) == 2
    assert "line 3" in capsys.readouterr().err


def test_missing_config(tmp_path):
    assert run("gen", "--config", tmp_path / "nope.json") == 2


def test_bad_argument():
    assert run("frobnicate") == 2


def test_train_without_dataset(tmp_path, capsys):
    assert run("train", "--config", smoke_config(tmp_path)) == 2
    assert "dataset file not found" in capsys.readouterr().err


def test_seed_overrides_every_stage(tmp_path):
    cfg = cli.load_config(smoke_config(tmp_path))
    assert cfg.dataset.seed == cfg.model.seed == cfg.train.seed == 3
    cfg.apply_seed(9)
    assert cfg.dataset.seed == cfg.model.seed == cfg.train.seed == 9


def test_mismatched_sections(tmp_path):
    p = smoke_config(tmp_path, model={"n_subjects": 5})
    assert run("gen", "--config", p) == 2


def test_gen_deterministic(tmp_path):
    p = smoke_config(tmp_path)
    assert run("gen", "--config", p) == 0
    first = (tmp_path / "run" / cli.DATASET_FILE).read_bytes()
    assert run("gen", "--config", p) == 0
    assert (tmp_path / "run" / cli.DATASET_FILE).read_bytes() == first
    assert run("gen", "--config", p, "--seed", 4, "--out", tmp_path / "other") == 0
    assert (tmp_path / "other" / cli.DATASET_FILE).read_bytes() != first


def test_gen_default_size(tmp_path):
    assert run("gen", "--out", tmp_path) == 0
    man = json.loads((tmp_path / cli.MANIFEST_FILE).read_text())
    assert man["segments"] == 2700


def test_smoke_pipeline(tmp_path, capsys):
    p = smoke_config(tmp_path)
    out = tmp_path / "run"
    assert run("gen", "--config", p) == 0
    t0 = time.perf_counter()
    assert run("train", "--config", p) == 0
    assert time.perf_counter() - t0 < 60
    log = TrainLog.read_csv(out / cli.TRAINLOG_FILE)
    assert len(log.rows) == 2

    assert run("eval", "--config", p) == 0
    metrics = json.loads((out / cli.METRICS_FILE).read_text())
    for task in ("id", "activity"):
        assert {"accuracy", "precision", "recall", "f1"} <= set(metrics[task])
    assert metrics["id"]["accuracy"] == log.rows[-1]["acc_id_test"]
    assert metrics["activity"]["accuracy"] == log.rows[-1]["acc_act_test"]

    ckpt = (out / cli.CHECKPOINT_FILE).read_bytes()
    assert run("train", "--config", p) == 0
    assert (out / cli.CHECKPOINT_FILE).read_bytes() == ckpt


def test_eval_explicit_checkpoint_errors(tmp_path):
    p = smoke_config(tmp_path)
    assert run("gen", "--config", p) == 0
    assert run("eval", "--config", p, "--checkpoint", tmp_path / "missing.dt4e") == 2
    (tmp_path / "junk.dt4e").write_bytes(b"JUNKJUNK")
    assert run("eval", "--config", p, "--checkpoint", tmp_path / "junk.dt4e") == 2


def test_eval_rejects_mismatched_checkpoint(tmp_path, capsys):
    from dt4ecg.model import Dt4EcgModel, ModelConfig, save_checkpoint

    p = smoke_config(tmp_path)
    assert run("gen", "--config", p) == 0
    save_checkpoint(Dt4EcgModel(ModelConfig(n_subjects=1)), tmp_path / "one.dt4e")
    assert run("eval", "--config", p, "--checkpoint", tmp_path / "one.dt4e") == 2
    assert "subject" in capsys.readouterr().err


def test_ablate_rows(tmp_path):
    p = smoke_config(tmp_path)
    assert run("gen", "--config", p) == 0
    rows = cli.cmd_ablate(cli.load_config(p))
    assert len(rows) == 4
    assert (tmp_path / "run" / cli.ABLATION_FILE).read_text().count("\n") == 5


def test_ablate_reports_divergence(tmp_path, monkeypatch):
    p = smoke_config(tmp_path)
    assert run("gen", "--config", p) == 0
    monkeypatch.setattr(cli, "runs_match", lambda a, b: False)
    assert run("ablate", "--config", p) == 1


def test_gradcheck_inventory_complete():
    names = {n for n, _, _ in cli.op_inventory()}
    assert names == {"conv1d", "batchnorm", "relu", "sigmoid", "linear", "avg_pool_time", "avg_pool_channel",
                     "global_avg_pool", "softmax", "softmax_cross_entropy", "residual_block", "sca"}


def test_gradcheck_command_single_seed():
    rows = cli.cmd_gradcheck(seeds=range(1))
    assert all(r["passed"] for r in rows)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dt4ecg", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "gradcheck" in res.stdout
