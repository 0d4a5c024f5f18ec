import json

import numpy as np
import pytest

from flattenet.cli import main
from flattenet.head import read_config_json
from flattenet.tensor import read_flt1


def _write_config(path, **layer0):
    data = read_config_json("table1")
    data["layers"][0].update(layer0)
    path.write_text(json.dumps(data))
    return str(path)


def test_describe_text(capsys):
    assert main(["describe", "table1"]) == 0
    out = capsys.readouterr().out
    assert "229,376" in out and "pw1" in out


def test_describe_json_with_backbone(capsys):
    assert main(["describe", "table1", "--backbone", "resnet50", "--format", "json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert abs(rep["total"]["params"] / 1e6 - 23.77) <= 0.2377
    assert rep["sections"]["head"]["params"] == 229_376


def test_describe_toy_backbone(capsys):
    assert main(["describe", "toy_sub5", "--backbone", "toy", "--input", "128x128",
                 "--widths", "16,32,64,128,256", "--no-predictor", "--format", "json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert "predictor" not in rep["sections"]


def test_gradcheck_all(capsys):
    assert main(["gradcheck", "--all", "--dtype", "f64"]) == 0
    out = capsys.readouterr().out
    assert "max relative error per op" in out
    assert "dwsg_conv" in out and "rearrange_inv" in out


def test_gradcheck_json(capsys):
    assert main(["gradcheck", "--op", "conv2d", "--op", "softmax_ce_block", "--format", "json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["passed"] and set(rep["max_rel_error"]) == {"conv2d", "softmax_ce_block"}
    assert all(v <= 1e-4 for v in rep["max_rel_error"].values())


def test_gradcheck_usage_errors(capsys):
    assert main(["gradcheck", "--all", "--dtype", "f32"]) == 2
    assert main(["gradcheck", "--op", "no_such_op"]) == 2
    assert main(["gradcheck"]) == 2
    assert "f64" in capsys.readouterr().err


def test_selftest_clean(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "0 failed" in out
    assert "equivalence table7 (ce)" in out


def test_selftest_config_error(tmp_path, capsys):
    assert main(["selftest", "--config", _write_config(tmp_path / "bad.json", g3=3)]) == 2
    err = capsys.readouterr().err
    assert "g3=3" in err


def test_selftest_names_non_dense_config(tmp_path, capsys):
    path = _write_config(tmp_path / "tampered.json", g2=1)
    assert main(["selftest", "--config", path]) == 1
    out = capsys.readouterr().out
    assert "FAILED: density" in out and "tampered.json" in out and "g2=1" in out


def test_unknown_flag_rejected(capsys):
    assert main(["describe", "table1", "--bogus"]) == 2
    assert "unrecognized" in capsys.readouterr().err


def test_train_requires_seed(capsys):
    assert main(["train", "--epochs", "1"]) == 2
    assert "--seed" in capsys.readouterr().err


def test_train_geometry_mismatch(capsys):
    assert main(["train", "--seed", "0", "--image-size", "48"]) == 2


@pytest.mark.slow
def test_train_twice_identical_history(tmp_path, capsys):
    paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
    for p in paths:
        assert main(["train", "--task", "keypoints", "--seed", "1", "--epochs", "5", "--history", str(p)]) == 0
    first = paths[0].read_bytes()
    assert first == paths[1].read_bytes()
    assert len(first.splitlines()) == 6


def test_train_checkpoint_and_eval(tmp_path, capsys):
    ck = tmp_path / "ck"
    args = ["train", "--seed", "2", "--epochs", "1", "--steps-per-epoch", "2", "--batch-size", "4",
            "--eval-size", "8", "--dtype", "f32", "--checkpoint", str(ck), "--format", "json"]
    assert main(args) == 0
    hist = json.loads(capsys.readouterr().out)["history"]
    assert main(["eval", "--checkpoint", str(ck), "--format", "json"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["loss"] == pytest.approx(hist[-1]["eval_loss"], rel=1e-6)
    assert main(["eval", "--checkpoint", str(tmp_path)]) == 2


def test_train_segmentation(capsys):
    assert main(["train", "--seed", "0", "--task", "segmentation", "--epochs", "1", "--steps-per-epoch", "1",
                 "--batch-size", "2", "--eval-size", "4"]) == 0
    assert "miou" in capsys.readouterr().out


def test_dump_load_round_trip(tmp_path, capsys):
    a, b = tmp_path / "a.flt1", tmp_path / "b.flt1"
    assert main(["dump", str(a), "--shape", "2,3,4,5", "--seed", "7", "--dtype", "f32"]) == 0
    assert main(["load", str(a), "--out", str(b), "--format", "json"]) == 0
    out = capsys.readouterr().out
    info = json.loads(out[out.index("{"):])
    assert info["shape"] == [2, 3, 4, 5] and info["dtype"] == "f32"
    assert a.read_bytes() == b.read_bytes()
    x = read_flt1(a)
    assert x.dtype == np.float32 and np.all(np.abs(x) <= 1)


def test_dump_constant(tmp_path):
    path = tmp_path / "c.flt1"
    assert main(["dump", str(path), "--shape", "1,1,2,2", "--fill", "constant", "--value", "2.5"]) == 0
    assert read_flt1(path).ravel().tolist() == [2.5] * 4


def test_load_errors(tmp_path, capsys):
    assert main(["load", str(tmp_path / "missing.flt1")]) == 2
    bad = tmp_path / "bad.flt1"
    bad.write_bytes(b"NOPE" + bytes(17))
    assert main(["load", str(bad)]) == 2


def test_thread_limit_env(monkeypatch, capsys):
    monkeypatch.setenv("FLATTENET_THREADS", "1")
    assert main(["describe", "table1"]) == 0
    monkeypatch.setenv("FLATTENET_THREADS", "many")
    assert main(["describe", "table1"]) == 2
