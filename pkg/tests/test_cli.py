from __future__ import annotations

import json

import numpy as np
import pytest

from xdssl.cli import env_overrides, layered, main
from xdssl.data.records import Manifest
from xdssl.errors import ConfigError
from xdssl.evaluation import load_probability, save_probability


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def _error(err: str) -> dict:
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture()
def dataset(tmp_path, capsys):
    code, _, _ = _run(capsys, "phantom", "--out", str(tmp_path / "ph"), "--seed", "1", "--n-patients", "4",
                      "--frames", "4", "--image-size", "32")
    assert code == 0
    manifest = tmp_path / "ph" / "manifest.json"
    code, out, _ = _run(capsys, "split", "--manifest", str(manifest), "--fractions", "train=0.5,val=0.25,test=0.25")
    assert code == 0 and json.loads(out)["patients_per_split"] == {"test": 2, "train": 4, "val": 2}
    return manifest


def test_unknown_flag_is_config_error(capsys):
    code, _, err = _run(capsys, "reproduce", "--bogus")
    assert code == 2
    rec = _error(err)
    assert rec["error"] == "usage" and rec["exit_code"] == 2


def test_missing_file_is_data_error(tmp_path, capsys):
    code, _, err = _run(capsys, "pretrain-mim", "--manifest", str(tmp_path / "nope.json"))
    assert code == 3 and "nope.json" in _error(err)["message"]


def test_schema_violation(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 1\nnot_a_key: 3\n")
    code, _, err = _run(capsys, "reproduce", "--config", str(cfg), "--out", str(tmp_path / "r"))
    assert code == 2 and "not_a_key" in _error(err)["message"]
    cfg.write_text("- just\n- a list\n")
    assert _run(capsys, "reproduce", "--config", str(cfg))[0] == 2


def test_corrupt_checkpoint_is_integrity_error(tmp_path, capsys, dataset):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XDSSLCK1" + b"\x00" * 50)
    code, _, err = _run(capsys, "infer", "--manifest", str(dataset), "--checkpoint", str(bad), "--out", str(tmp_path / "p"))
    assert code == 4 and _error(err)["exit_code"] == 4


def test_layering_precedence():
    keys = ["seed", "epochs"]
    env = {"XDSSL_SEED": "5", "XDSSL_EPOCHS": "2"}
    assert env_overrides(keys, env) == {"seed": 5, "epochs": 2}
    merged = layered({"seed": 1, "epochs": 9}, keys, {"seed": 7, "epochs": None}, env)
    assert merged == {"seed": 7, "epochs": 2}
    with pytest.raises(ConfigError):
        layered({"zzz": 1}, keys, {}, {})


def test_stage_commands_end_to_end(tmp_path, capsys, dataset, monkeypatch):
    monkeypatch.setenv("XDSSL_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(
        "backbone: {image_size: 32, encoder_depth: 1, encoder_dim: 32, encoder_heads: 2, decoder_channels: [16, 16, 8]}\n"
        "epochs: 1\nbatch_size: 4\n"
    )
    m = str(dataset)
    assert _run(capsys, "pretrain-mim", "--config", str(cfg), "--manifest", m)[0] == 0
    pre = tmp_path / "root" / "pretrain_mim" / "final.ckpt"
    assert pre.is_file()
    code, out, _ = _run(capsys, "finetune", "--config", str(cfg), "--manifest", m, "--init-checkpoint", str(pre),
                        "--out", str(tmp_path / "ft"))
    assert code == 0 and json.loads(out)["transfer_groups"] == ["embedding", "encoder"]
    code, _, _ = _run(capsys, "infer", "--manifest", m, "--checkpoint", str(tmp_path / "ft" / "best.ckpt"),
                      "--out", str(tmp_path / "pa"))
    assert code == 0
    code, _, _ = _run(capsys, "fuse", "--manifest", m, "--pred-a", str(tmp_path / "pa"), "--pred-b",
                      str(tmp_path / "pa"), "--strategy", "average", "--out", str(tmp_path / "fz"))
    assert code == 0
    # averaging a branch with itself returns it unchanged
    for rec in Manifest.load(m).select(domain="target", split="test"):
        np.testing.assert_allclose(load_probability(tmp_path / "fz", rec), load_probability(tmp_path / "pa", rec),
                                   atol=1e-7)
    code, out, _ = _run(capsys, "evaluate", "--manifest", m, "--pred", str(tmp_path / "fz"), "--name", "fused",
                        "--out", str(tmp_path / "fused.csv"))
    assert code == 0 and 0 <= json.loads(out)["mean_dsc"] <= 1
    code, _, _ = _run(capsys, "evaluate", "--manifest", m, "--pred", str(tmp_path / "pa"), "--name", "a",
                      "--out", str(tmp_path / "a.csv"))
    code, out, err = _run(capsys, "report", "--scores", f"fused={tmp_path / 'fused.csv'}", f"a={tmp_path / 'a.csv'}",
                          "--out", str(tmp_path / "rep"))
    assert code == 0 and set(json.loads(out)["runs"]) == {"fused", "a"}


def test_evaluate_missing_prediction_lists_image(tmp_path, capsys, dataset):
    recs = Manifest.load(dataset).select(domain="target", split="test", labeled=True)
    save_probability(tmp_path / "pred", recs[0], np.zeros((32, 32), np.float32))
    code, _, err = _run(capsys, "evaluate", "--manifest", str(dataset), "--pred", str(tmp_path / "pred"))
    assert code == 3 and recs[1].image_id in _error(err)["message"]


def test_reproduce_smoke_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, _, _ = _run(capsys, "reproduce", "--smoke", "--seed", "7", "--out", str(tmp_path / name))
        assert code == 0
    a = (tmp_path / "a" / "report" / "report.json").read_bytes()
    b = (tmp_path / "b" / "report" / "report.json").read_bytes()
    assert a == b
