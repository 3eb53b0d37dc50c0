import json
import struct

import numpy as np
import pytest

from hug import cli
from hug.config import DEFAULTS, ConfigError, RunConfig
from hug.persist import FormatError, dumps, load_dataset, loads, save_dataset
from hug.synthdata import NoiseConfig, WorldConfig, gen_triplets, gen_world

TINY_CFG = """
# small enough for a unit test
world.n_attributes = 3
world.n_values = 3
world.d_img = 8
world.d_txt = 8
data.n_train = 40
data.n_val = 120
model.n_components = 4
model.dim = 4
model.hidden = 8
train.batch_size = 8
train.epochs = 1
"""


def test_container_roundtrip_is_byte_identical():
    t = {"b": np.arange(6.0).reshape(2, 3), "a": np.array(2.5), "c": np.zeros((0, 4))}
    blob = dumps(t, "x = 1\n")
    text, back = loads(blob)
    assert text == "x = 1\n" and list(back) == ["a", "b", "c"]
    for k in t:
        assert back[k].shape == np.shape(t[k]) and np.array_equal(back[k], t[k])
    assert dumps(back, text) == blob


def test_container_errors_name_offsets():
    blob = dumps({"w": np.ones(3)}, "")
    with pytest.raises(FormatError, match="magic at offset 0"):
        loads(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="version 9 at offset 4"):
        loads(blob[:4] + struct.pack("<I", 9) + blob[8:])
    with pytest.raises(FormatError, match="truncated values of 'w' at offset"):
        loads(blob[:-3])
    with pytest.raises(FormatError, match="duplicate"):
        loads(blob + blob[16:])


def test_dataset_roundtrip(tmp_path):
    world = gen_world(WorldConfig(3, 3, 8, 8), 0)
    data = gen_triplets(world, 30, NoiseConfig(0.3, 0.5, 0.2, 0.2), 1)
    save_dataset(tmp_path / "d.hugd", data, "cfg")
    text, back = load_dataset(tmp_path / "d.hugd")
    assert text == "cfg" and back.modified == data.modified
    for k in ("x_r", "x_t", "x_c", "target_index", "gallery_values", "coord_mismatch"):
        a, b = getattr(data, k), getattr(back, k)
        assert a.dtype.kind == b.dtype.kind and np.array_equal(a, b)
    assert [back.label_record(i) for i in range(30)] == [data.label_record(i) for i in range(30)]


def test_config_defaults_roundtrip_and_errors():
    cfg = RunConfig()
    assert RunConfig.from_text(cfg.to_text()).values == cfg.values
    assert all(len(v) == 2 and v[1] for v in DEFAULTS.values())
    c = RunConfig.from_text("train.lr = 0.01\neval.sweep_lambda_cord = 0, 0.1 1.0\n")
    assert c["train.lr"] == 0.01 and c["eval.sweep_lambda_cord"] == [0.0, 0.1, 1.0]
    with pytest.raises(ConfigError, match=r"<config>:2: unknown config key 'train.lrr'"):
        RunConfig.from_text("# c\ntrain.lrr = 1\n")
    with pytest.raises(ConfigError, match=":1: bad value for 'train.epochs'"):
        RunConfig.from_text("train.epochs = many\n")
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        RunConfig.from_text("train.epochs\n")
    with pytest.raises(ConfigError, match="train.mode"):
        RunConfig.from_text("train.mode = 8\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("data.p_img = 2\n")


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY_CFG)
    assert cli.main(["gen-data", "--config", str(root / "tiny.cfg"), "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", str(root / "tiny.cfg"), "--data", str(root / "data"),
                     "--out", str(root / "m.ckpt")]) == 0
    return root


def test_gen_data_and_train_outputs(workspace):
    for name in ("data/train.hugd", "data/val.hugd", "data/train.hugd.labels.jsonl", "data/config.txt",
                 "m.ckpt", "m.ckpt.log.jsonl", "m.ckpt.config.txt"):
        assert (workspace / name).exists(), name
    recs = [json.loads(line) for line in (workspace / "m.ckpt.log.jsonl").read_text().splitlines()]
    steps = [r for r in recs if "total" in r]
    assert len(steps) == 5 and all("L_HC" in r and "mean_weights" in r for r in steps)
    assert RunConfig.from_file(workspace / "m.ckpt.config.txt")["data.n_train"] == 40


def test_eval_with_sweep(workspace, capsys):
    code, out, _ = _run(capsys, "eval", "--checkpoint", workspace / "m.ckpt", "--data", workspace / "data",
                        "--sweep-lambda-cord", "0", "1")
    assert code == 0
    recs = [json.loads(line) for line in out.splitlines()]
    assert recs[0]["event"] == "eval" and "R@1" in recs[0]
    assert [(r["key"], r["value"]) for r in recs[1:]] == [("train.lambda_cord", 0.0), ("train.lambda_cord", 1.0)]


def test_check_bound_and_inspect(workspace, capsys):
    code, out, _ = _run(capsys, "check-bound", "--checkpoint", workspace / "m.ckpt", "--data", workspace / "data")
    assert code == 0 and json.loads(out)["identity_residual"] <= 1e-9
    code, out, _ = _run(capsys, "inspect", "--checkpoint", workspace / "m.ckpt", "--data", workspace / "data",
                        "--count", "3", "--bins", "4")
    assert code == 0
    lines = out.splitlines()
    assert lines[-5] == "x\ty" and sum(int(line.split("\t")[1]) for line in lines[-4:]) == 120
    assert sum('"event": "exemplar"' in line for line in lines) == 6


def test_check_grad(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text(TINY_CFG)
    code, out, _ = _run(capsys, "check-grad", "--config", tmp_path / "c.cfg", "--max-coords", "3")
    assert code == 0
    terms = {json.loads(line)["term"] for line in out.splitlines()}
    assert terms == {"L_HC", "L_FC", "L_Cord", "total", "distance_kernel"}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(tmp_path, workspace, capsys):
    (tmp_path / "bad.cfg").write_text("nonsense.key = 1\n")
    code, _, err = _run(capsys, "gen-data", "--config", tmp_path / "bad.cfg", "--out", tmp_path / "o")
    assert code == 1 and "nonsense.key" in err
    code, _, err = _run(capsys, "eval", "--checkpoint", tmp_path / "missing.ckpt", "--data", workspace / "data")
    assert code == 1
    (tmp_path / "junk.ckpt").write_bytes(b"JUNKJUNK")
    code, _, err = _run(capsys, "eval", "--checkpoint", tmp_path / "junk.ckpt", "--data", workspace / "data")
    assert code == 1 and "offset 0" in err
    (tmp_path / "m0.cfg").write_text(TINY_CFG + "train.mode = 0\n")
    assert cli.main(["train", "--config", str(tmp_path / "m0.cfg"), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "m0.ckpt")]) == 0
    capsys.readouterr()
    code, _, err = _run(capsys, "check-bound", "--checkpoint", tmp_path / "m0.ckpt", "--data", workspace / "data")
    assert code == 1 and "train.mode = 7" in err
    (tmp_path / "div.cfg").write_text(TINY_CFG + "train.lr = 1e30\ntrain.grad_clip = 0\n")
    code, _, err = _run(capsys, "train", "--config", tmp_path / "div.cfg", "--data", workspace / "data",
                        "--out", tmp_path / "div.ckpt")
    assert code == 2
