import json

import numpy as np
import pytest

from thama import cli
from thama.config import RunConfig
from thama.data import FrameRecord, FrameSet, read_emb1, write_frm1
from thama.errors import ConfigError

SMALL = {
    "model": {"kind": "thama", "d_f": 4},
    "data": {"synth": {"d1": 16, "d2": 16, "n_train": 48, "n_dev": 24, "n_test": 40}},
    "train": {"epochs": 2, "early_stop_patience": 1},
}


def write_config(tmp_path, doc, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_synth_writes_twelve_files_deterministically(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert cli.main(["synth", cfg, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["synth", cfg, "--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").glob("*.emb"))
    assert len(files) == 12
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    for entry in manifest["files"]:
        assert len(read_emb1(tmp_path / "a" / entry["path"])) == entry["count"] == SMALL["data"]["synth"]["n_" + entry["split"]]


def test_train_then_eval(tmp_path, capsys):
    cfg = write_config(tmp_path, {**SMALL, "output": str(tmp_path / "run")})
    assert cli.main(["train", cfg]) == 0
    run = tmp_path / "run"
    assert {p.name for p in run.iterdir()} == {"config.json", "checkpoint.ckpt", "history.json", "report.json"}
    history = json.loads((run / "history.json").read_text())
    assert 1 <= len(history["epoch"]) <= 2
    assert cli.main(["synth", cfg, "--out", str(tmp_path / "syn")]) == 0
    capsys.readouterr()
    views = [str(tmp_path / "syn" / f"C_test_view{v}.emb") for v in (1, 2)]
    assert cli.main(["eval", str(run / "checkpoint.ckpt"), *views, "--train-domain", "E", "--out", str(tmp_path / "r.json")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["setting"] == "E(TR)-C(TE)" and report["n"] == 40


def test_xdomain_reports_both_directions(tmp_path, capsys):
    cfg = write_config(tmp_path, SMALL)
    assert cli.main(["xdomain", cfg, "--out", str(tmp_path / "x")]) == 0
    settings = [r["setting"] for r in json.loads((tmp_path / "x" / "report.json").read_text())["reports"]]
    assert settings == ["E(TR)-E(TE)", "E(TR)-C(TE)", "C(TR)-C(TE)", "C(TR)-E(TE)"]
    assert (tmp_path / "x" / "train_C" / "report_out.json").exists()


def test_train_from_paths(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    cli.main(["synth", cfg, "--out", str(tmp_path / "syn")])
    syn = tmp_path / "syn"
    paths = {s: [str(syn / f"E_{s}_view1.emb"), str(syn / f"E_{s}_view2.emb")] for s in ("train", "dev", "test")}
    doc = {"model": {"kind": "concat"}, "data": {"paths": {"E": paths}}, "train": {"epochs": 1}, "output": str(tmp_path / "p")}
    assert cli.main(["train", write_config(tmp_path, doc, "p.json")]) == 0
    doc["model"] = {"kind": "concat", "d1": 32}
    assert cli.main(["train", write_config(tmp_path, doc, "q.json")]) == 2


def test_params_prints_count(tmp_path, capsys):
    cfg = write_config(tmp_path, {"model": {"kind": "fcn", "d1": 512}})
    assert cli.main(["params", cfg]) == 0
    assert capsys.readouterr().out.strip() == "73985"
    cfg = write_config(tmp_path, {"model": {"kind": "thama", "d1": 1280, "d2": 1280}})
    cli.main(["params", cfg])
    assert 5.5e6 <= int(capsys.readouterr().out) <= 1e7


def test_gradcheck_exit_codes(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, {"model": {"kind": "cnn", "d1": 16}})
    assert cli.main(["gradcheck", cfg]) == 0
    monkeypatch.setattr(cli, "run_gradcheck", lambda cfg: 0.5)
    assert cli.main(["gradcheck", cfg]) == 4


def test_pool_command(tmp_path):
    frames = FrameSet(2, [FrameRecord(1, 0, 0, np.array([[1.0, 2.0]], np.float32)), FrameRecord(2, 1, 1, np.array([[0.0, 0.0], [2.0, 4.0]], np.float32))])
    write_frm1(frames, tmp_path / "f.frm")
    assert cli.main(["pool", str(tmp_path / "f.frm"), str(tmp_path / "p.emb")]) == 0
    np.testing.assert_array_equal(read_emb1(tmp_path / "p.emb").vectors, [[1, 2], [1, 2]])
    write_frm1(FrameSet(2, []), tmp_path / "e.frm")
    assert cli.main(["pool", str(tmp_path / "e.frm"), str(tmp_path / "e.emb")]) == 0
    assert len(read_emb1(tmp_path / "e.emb")) == 0
    (tmp_path / "t.frm").write_bytes((tmp_path / "f.frm").read_bytes()[:-2])
    assert cli.main(["pool", str(tmp_path / "t.frm"), str(tmp_path / "t.emb")]) == 3


@pytest.mark.parametrize(
    "doc",
    [
        {"model": {"kind": "thama", "extra": 1}},
        {"model": {"kind": "rnn"}},
        {"model": {"kind": "thama"}, "data": {"synth": {"sigma": -1}}},
        {"model": {"kind": "thama"}, "train": {"lr": 0}},
        {"model": {"kind": "cnn", "d1": 4}},
        {"model": {"kind": "thama"}, "surprise": True},
    ],
)
def test_invalid_config_exits_2_without_artifacts(tmp_path, doc):
    out = tmp_path / "never"
    cfg = write_config(tmp_path, {**doc, "output": str(out)})
    assert cli.main(["train", cfg]) == 2
    assert not out.exists()
    with pytest.raises(ConfigError):
        RunConfig.load(cfg)


def test_missing_data_and_corrupt_checkpoint(tmp_path):
    doc = {"model": {"kind": "cnn"}, "data": {"paths": {"E": {"train": ["nope.emb"], "dev": ["nope.emb"]}}}, "output": str(tmp_path / "o")}
    assert cli.main(["train", write_config(tmp_path, doc)]) == 3
    (tmp_path / "bad.ckpt").write_bytes(b"CKPT\x01\x00")
    (tmp_path / "x.emb").write_bytes(b"")
    assert cli.main(["eval", str(tmp_path / "bad.ckpt"), str(tmp_path / "x.emb")]) == 3


def test_seed_override(tmp_path):
    cfg = RunConfig.from_dict(SMALL).with_seed(9)
    assert cfg.model["seed"] == cfg.train["seed"] == cfg.data["synth"]["seed"] == 9
