import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from wdrtone import cli
from wdrtone.config import RunConfig, config_from_dict, load_config, save_config
from wdrtone.image_io import read_pfm, write_radiance_hdr
from wdrtone.networks import ModelWeights, load_weights, save_weights
from wdrtone.training import read_history

TINY = {"n": 3, "patch_out": 16, "patches_per_image": 4, "synth_count": 3, "synth_size": 32,
        "eval_count": 2, "steps_global": 3, "steps_local": 3, "steps_joint": 3,
        "batch_global": 8, "batch_local": 4, "batch_finetune": 2, "seed": 5}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def hdr_file(tmp_path, rng):
    img = np.exp(rng.uniform(-3, 5, (24, 40, 3))).astype(np.float32)
    path = tmp_path / "in.hdr"
    write_radiance_hdr(path, img)
    return path


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- config ------------------------------------------------------------------


def test_config_round_trip_and_defaults(tmp_path):
    cfg = config_from_dict({"lr": 5e-4, "loss": {"gamma": 0.1}, "s": 0.5})
    assert cfg.train.lr == 5e-4 and cfg.train.loss.gamma == 0.1 and cfg.train.loss.alpha == 0.5
    assert cfg.s == 0.5 and cfg.train.batch_local == 8
    save_config(tmp_path / "c.json", cfg)
    assert load_config(tmp_path / "c.json") == cfg
    assert config_from_dict({}) == RunConfig()


@pytest.mark.parametrize("raw", [{"learning_rate": 1e-3}, {"loss": {"delta": 1}}, {"finetune_loss": {"alpha": 1}}])
def test_config_rejects_unknown_keys(raw):
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict(raw)


def test_unknown_key_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"stepz_joint": 3}))
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "w.wdrt")]) == 1
    err = capsys.readouterr().err
    assert "stepz_joint" in err
    assert not (tmp_path / "w.wdrt").exists()


# -- decompose ---------------------------------------------------------------


def test_decompose(tmp_path, hdr_file, capsys):
    out = tmp_path / "bands"
    assert cli.main(["decompose", str(hdr_file), "--n", "3", "--out-dir", str(out)]) == 0
    line = capsys.readouterr().out
    err = float(line.split("max_abs_error=")[1])
    assert err < 1e-3
    assert read_pfm(out / "x_l.pfm").shape == (24, 40, 3)
    assert read_pfm(out / "x_g.pfm").shape == (6, 10, 3)


def test_decompose_default_n_and_rejects_small(hdr_file):
    args = cli.build_parser().parse_args(["decompose", str(hdr_file), "--out-dir", "x"])
    assert args.n == 6
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["decompose", str(hdr_file), "--n", "1", "--out-dir", "x"])


# -- synth -------------------------------------------------------------------


def test_synth(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["synth", "--count", "3", "--size", "32", "--seed", "4", "--out-dir", str(d)]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert len([n for n in names if n.startswith("wdr_")]) == 3
    assert len([n for n in names if n.endswith(".png")]) == 3
    assert all(sha(a / n) == sha(b / n) for n in names)
    manifest = json.loads((a / "manifest.json").read_text())
    for entry in manifest["images"]:
        assert 5e3 <= entry["measured_dyn_range"] <= 2e4


# -- train / tonemap -----------------------------------------------------------


def test_train_outputs(tmp_path, tiny_config, capsys):
    w = tmp_path / "m.wdrt"
    assert cli.main(["train", "--config", str(tiny_config), "--out", str(w)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# config: {")
    echoed = json.loads(out.splitlines()[0][len("# config: "):])
    assert echoed["steps_joint"] == 3 and echoed["lr"] == 1e-3
    hist = read_history(w.with_suffix(".losses.csv"))
    assert len(hist) == 9
    assert [s for _, s, _ in hist] == ["global"] * 3 + ["local"] * 3 + ["joint"] * 3
    weights = load_weights(w)
    assert weights.n == 3 and weights.extra["seed"] == 5


def test_train_from_directory(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["synth", "--count", "4", "--size", "32", "--out-dir", str(data)]) == 0
    cfg = dict(TINY, data_dir=str(data))
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "w.wdrt"),
                     "--losses", str(tmp_path / "l.csv")]) == 0
    assert len(read_history(tmp_path / "l.csv")) == 9


def test_tonemap(tmp_path, hdr_file):
    w = tmp_path / "zero.wdrt"
    save_weights(w, ModelWeights.zeros(n=3))
    outs = []
    for i in range(2):
        out = tmp_path / f"o{i}.png"
        assert cli.main(["tonemap", str(hdr_file), "--weights", str(w), "--out", str(out)]) == 0
        outs.append(out)
    im = Image.open(outs[0])
    assert im.size == (40, 24) and im.mode == "RGB"
    assert sha(outs[0]) == sha(outs[1])
    assert cli.build_parser().parse_args(["tonemap", "x", "--weights", "w", "--out", "o"]).s == 0.6


def test_tonemap_n_mismatch(tmp_path, hdr_file, capsys):
    w = tmp_path / "zero.wdrt"
    save_weights(w, ModelWeights.zeros(n=3))
    code = cli.main(["tonemap", str(hdr_file), "--weights", str(w), "--out", str(tmp_path / "o.png"), "--n", "5"])
    assert code == 1
    assert "n=3" in capsys.readouterr().err


def test_missing_input_exit_code(tmp_path, capsys):
    assert cli.main(["decompose", str(tmp_path / "nope.hdr"), "--out-dir", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


# -- eval / sweep --------------------------------------------------------------


def test_eval(tmp_path, capsys):
    data = tmp_path / "d"
    cli.main(["synth", "--count", "2", "--size", "32", "--out-dir", str(data)])
    pred, ref = tmp_path / "pred", tmp_path / "ref"
    pred.mkdir()
    ref.mkdir()
    for p in data.glob("ldr_*.pfm"):
        (pred / p.name).write_bytes(p.read_bytes())
        (ref / p.name).write_bytes(p.read_bytes())
    assert cli.main(["eval", "--pred", str(pred), "--ref", str(ref), "--out", str(tmp_path / "r.csv")]) == 0
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "id,psnr_db,ssim" and len(lines) == 3
    assert all(l.endswith(",inf,1.0") for l in lines[1:])
    (ref / "ldr_0000.pfm").unlink()
    assert cli.main(["eval", "--pred", str(pred), "--ref", str(ref), "--out", str(tmp_path / "r.csv")]) == 1


def test_n_list_parsing():
    assert cli._n_list("2..5") == [2, 3, 4, 5]
    assert cli._n_list("2,4") == [2, 4]
    with pytest.raises(Exception):
        cli._n_list("1..3")


def test_sweep_n(tmp_path, tiny_config, capsys):
    cfg = json.loads(tiny_config.read_text())
    cfg.update(steps_global=2, steps_local=2, steps_joint=2)
    tiny_config.write_text(json.dumps(cfg))
    out = tmp_path / "sweep.csv"
    assert cli.main(["sweep-n", "--config", str(tiny_config), "--n-list", "2,3", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "n,psnr_db,ssim"
    rows = [l.split(",") for l in lines[1:]]
    assert [int(r[0]) for r in rows] == [2, 3]
    assert all(np.isfinite(float(r[1])) and np.isfinite(float(r[2])) for r in rows)
