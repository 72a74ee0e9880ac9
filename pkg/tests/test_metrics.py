import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wdrtone.image_io import write_pfm, write_png8
from wdrtone.losses import ssim
from wdrtone.metrics import EvalReport, EvalRow, eval_dataset, psnr, read_report


def test_psnr_examples(rng):
    x = rng.random((32, 32)) * 0.8
    assert psnr(x, x) == math.inf
    assert abs(psnr(x + 0.1, x) - 20.0) < 0.01
    y = x.copy()
    y.reshape(-1)[::2] += 0.1 * np.sqrt(2)  # half the pixels, same MSE of 0.01
    assert psnr(y, x) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ValueError):
        psnr(x, x[:-1])


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 0.4))
def test_psnr_shift_symmetry(c):
    x = np.linspace(0.2, 0.6, 64).reshape(8, 8)
    assert psnr(x + c, x) == pytest.approx(psnr(x - c, x), rel=1e-12)
    assert psnr(x + c, x) == pytest.approx(-20 * math.log10(c), rel=1e-9)


def test_report_means_and_csv(tmp_path):
    rows = [EvalRow("a", 20.0, 0.9), EvalRow("b", 31.5, 0.7), EvalRow("c", 12.25, 0.55)]
    rep = EvalReport(rows)
    assert abs(rep.mean_psnr - (20.0 + 31.5 + 12.25) / 3) < 1e-12
    assert abs(rep.mean_ssim - (0.9 + 0.7 + 0.55) / 3) < 1e-12
    rep.rows.append(EvalRow("d", math.inf, 1.0))
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "id,psnr_db,ssim"
    assert lines[-1] == "d,inf,1.0"
    assert read_report(tmp_path / "r.csv").rows == rep.rows


def _write_set(d, imgs, fmt="pfm"):
    d.mkdir()
    for name, img in imgs.items():
        if fmt == "pfm":
            write_pfm(d / f"{name}.pfm", img.astype(np.float32))
        else:
            write_png8(d / f"{name}.png", img)


def test_eval_dataset_identical_sets(tmp_path, rng):
    imgs = {f"im{i}": rng.random((16, 20)) for i in range(3)}
    _write_set(tmp_path / "p", imgs)
    _write_set(tmp_path / "r", imgs)
    rep = eval_dataset(tmp_path / "p", tmp_path / "r")
    assert len(rep.rows) == 3
    assert rep.mean_ssim == 1.0
    assert all(math.isinf(r.psnr_db) for r in rep.rows)


def test_eval_dataset_single_pair(tmp_path, rng):
    ref = rng.random((16, 16))
    pred = np.clip(ref + rng.normal(0, 0.05, ref.shape), 0, 1)
    _write_set(tmp_path / "p", {"x": pred})
    _write_set(tmp_path / "r", {"x": ref})
    rep = eval_dataset(tmp_path / "p", tmp_path / "r")
    p32, r32 = pred.astype(np.float32), ref.astype(np.float32)
    assert rep.mean_psnr == rep.rows[0].psnr_db == psnr(p32, r32)
    assert rep.mean_ssim == rep.rows[0].ssim == ssim(p32, r32)


def test_eval_dataset_png(tmp_path, rng):
    ref = rng.random((16, 16))
    _write_set(tmp_path / "p", {"x": ref}, fmt="png")
    _write_set(tmp_path / "r", {"x": ref}, fmt="png")
    assert eval_dataset(tmp_path / "p", tmp_path / "r").rows[0].ssim == 1.0


def test_eval_dataset_missing_counterpart(tmp_path, rng):
    _write_set(tmp_path / "p", {"a": rng.random((16, 16)), "b": rng.random((16, 16))})
    _write_set(tmp_path / "r", {"a": rng.random((16, 16))})
    with pytest.raises(FileNotFoundError, match="b"):
        eval_dataset(tmp_path / "p", tmp_path / "r")
