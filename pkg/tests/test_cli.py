import csv
import json

import numpy as np
import pytest

from conftest import same_rows
from octsqueeze import cli, codec
from octsqueeze.pointcloud import load_cloud, save_cloud
from octsqueeze.synth import SceneSpec, generate_scene


@pytest.fixture
def scenes(tmp_path):
    d = tmp_path / "scenes"
    assert cli.main(["synth", "--count", "3", "--points", "300", "--seed", "4", "--out", str(d)]) == 0
    return d


def test_synth_files(scenes, tmp_path):
    files = sorted(scenes.iterdir())
    assert [f.name for f in files] == ["scene_0000.xyz", "scene_0001.xyz", "scene_0002.xyz"]
    assert len(load_cloud(files[0])) == 300
    again = tmp_path / "again"
    cli.main(["synth", "--count", "1", "--points", "300", "--seed", "4", "--out", str(again)])
    assert (again / "scene_0000.xyz").read_bytes() == files[0].read_bytes()


def test_encode_decode_roundtrip(scenes, tmp_path, capsys):
    src = scenes / "scene_0001.xyz"
    out = tmp_path / "a.ocsq"
    assert cli.main(["encode", str(src), "--depth", "9", "--mode", "early", "--model", "histogram",
                     "--out", str(out)]) == 0
    line = capsys.readouterr().out
    assert line.startswith("bpp=") and " symbols=" in line and " bytes=" in line
    bpp = float(line.split()[0].split("=")[1])
    assert bpp == pytest.approx(8 * out.stat().st_size / 300, abs=1e-6)
    rec = tmp_path / "a.xyz"
    assert cli.main(["decode", str(out), "--out", str(rec)]) == 0
    assert same_rows(load_cloud(rec), np.unique(codec.roundtrip_reference(load_cloud(src), 9), axis=0))


def test_config_file_and_flag_precedence(scenes, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"depth": 5, "model": "uniform", "out": str(tmp_path / "x.ocsq")}))
    src = str(scenes / "scene_0000.xyz")
    cli.main(["encode", src, "--config", str(cfg)])
    header, _, _ = codec.unpack_container((tmp_path / "x.ocsq").read_bytes())
    assert header.depth_k == 5 and header.model_kind == 0
    cli.main(["encode", src, "--config", str(cfg), "--depth", "7"])
    header, _, _ = codec.unpack_container((tmp_path / "x.ocsq").read_bytes())
    assert header.depth_k == 7


def test_exit_codes(scenes, tmp_path, capsys):
    out = tmp_path / "a.ocsq"
    cli.main(["encode", str(scenes / "scene_0000.xyz"), "--depth", "8", "--out", str(out)])
    bad = bytearray(out.read_bytes())
    bad[len(bad) // 2] ^= 1
    (tmp_path / "bad.ocsq").write_bytes(bytes(bad))
    assert cli.main(["decode", str(tmp_path / "bad.ocsq")]) == 3
    assert "E_CRC" in capsys.readouterr().err
    (tmp_path / "short.ocsq").write_bytes(out.read_bytes()[:40])
    assert cli.main(["decode", str(tmp_path / "short.ocsq")]) == 3
    assert "E_TRUNCATED" in capsys.readouterr().err
    assert cli.main(["encode", str(tmp_path / "missing.xyz")]) == 2
    (tmp_path / "nan.xyz").write_text("nan 0 0\n")
    assert cli.main(["encode", str(tmp_path / "nan.xyz")]) == 2


def test_wrong_checkpoint_exit_code(scenes, tmp_path, capsys):
    from octsqueeze.entropy import init_model, save_checkpoint
    save_checkpoint(init_model(K=1, k_max=10, seed=1), tmp_path / "a.ckpt")
    save_checkpoint(init_model(K=1, k_max=10, seed=2), tmp_path / "b.ckpt")
    out = tmp_path / "a.ocsq"
    assert cli.main(["encode", str(scenes / "scene_0000.xyz"), "--depth", "8", "--model", str(tmp_path / "a.ckpt"),
                     "--out", str(out)]) == 0
    assert cli.main(["decode", str(out), "--model", str(tmp_path / "b.ckpt")]) == 2
    assert "E_MODEL_HASH" in capsys.readouterr().err
    assert cli.main(["decode", str(out), "--model", str(tmp_path / "a.ckpt"), "--out", str(tmp_path / "r.xyz")]) == 0
    assert cli.main(["encode", str(scenes / "scene_0000.xyz"), "--depth", "11",
                     "--model", str(tmp_path / "a.ckpt")]) == 2


def test_eval(tmp_path, capsys):
    pts = generate_scene(SceneSpec(seed=1, points=200))
    save_cloud(tmp_path / "a.xyz", pts)
    save_cloud(tmp_path / "b.xyz", pts)
    save_cloud(tmp_path / "c.bin", pts, "bin_f32")
    rows = cli.cmd_eval([(tmp_path / "a.xyz", tmp_path / "b.xyz")])
    assert rows[0]["chamfer"] == 0.0 and rows[0]["iou"] == 1.0
    assert cli.main(["eval", str(tmp_path / "a.xyz"), str(tmp_path / "c.bin")]) == 2
    assert cli.main(["eval", str(tmp_path / "a.xyz"), str(tmp_path / "b.xyz"), "--out", str(tmp_path / "m.csv")]) == 0
    assert "chamfer=0.000000" in capsys.readouterr().out


def test_rd_curve(scenes, tmp_path):
    out = tmp_path / "rd.csv"
    assert cli.main(["rd-curve", str(scenes), "--depths", "5-8", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 4 * 3
    assert list(rows[0]) == cli.RD_FIELDS
    for r in rows:
        assert float(r["max_error"]) <= float(r["error_bound"])


def test_train_writes_checkpoint_and_csv(scenes, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    args = ["train", str(scenes), "--depth", "6", "--steps", "3", "--K", "1", "--out", str(ckpt)]
    assert cli.main(args + ["--seed", "3"]) == 0
    first = ckpt.read_bytes()
    assert cli.main(args + ["--seed", "3"]) == 0
    assert ckpt.read_bytes() == first
    rows = list(csv.reader(open(str(ckpt) + ".loss.csv")))
    assert rows[0] == ["step", "train_nats", "val_bits_per_symbol"] and len(rows) == 4
    assert "val_bits_per_symbol=" in capsys.readouterr().out


def test_train_needs_two_scenes(tmp_path):
    d = tmp_path / "one"
    d.mkdir()
    save_cloud(d / "a.xyz", np.random.default_rng(0).normal(size=(20, 3)))
    assert cli.main(["train", str(d), "--steps", "1"]) == 2


def test_parse_depths():
    assert cli._parse_depths("6-8,10") == [6, 7, 8, 10]
    assert cli._parse_depths([6, 7]) == [6, 7]
