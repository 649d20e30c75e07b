import csv
import json

import numpy as np
import pytest

from lyaflow.cli import (
    EXIT_DATA,
    EXIT_IO,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
    dump_slices,
    main,
    pgm_to_hu,
    read_pgm,
    slice_to_pgm_bytes,
)
from lyaflow.metrics import evaluate_pair
from lyaflow.phantom import Manifest
from lyaflow.volume import read_vol, write_vol

TINY_CONFIG = {
    "epochs_max": 1,
    "base_width": 4,
    "rollout_step": 0.5,
    "val_solver": "euler",
    "val_step": 0.5,
    "use_lyap": False,
    "use_img": False,
}


def test_pgm_mapping(tmp_path):
    for value, pix in ((-100.0, 0), (1100.0, 255)):
        out = dump_slices(np.full((4, 5, 6), value), str(tmp_path / f"c{pix}"))
        assert len(out) == 3
        for path in out:
            assert np.all(read_pgm(path) == pix)
    assert read_pgm(tmp_path / "c0_ax0.pgm").shape == (5, 6)


def test_pgm_quantization_bound(tmp_path):
    sl = np.random.default_rng(0).uniform(-100, 1100, (16, 16))
    p = tmp_path / "s.pgm"
    p.write_bytes(slice_to_pgm_bytes(sl))
    back = pgm_to_hu(read_pgm(p))
    assert np.abs(back - sl).max() <= 1200.0 / 255.0 / 2.0 + 1e-9


def test_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["infer"]) == EXIT_USAGE
    assert main(["--help"]) == EXIT_OK


def test_io_and_numeric_exit_codes(tmp_path, capsys):
    assert main(["dump-slices", "--vol", str(tmp_path / "missing.vol"), "--out-prefix", str(tmp_path / "x")]) == EXIT_IO
    bad = tmp_path / "nan.vol"
    header = {"magic": "OFVOL1", "nx": 12, "ny": 12, "nz": 12, "spacing_mm": 0.5, "dtype": "f32", "role": "image"}
    payload = np.full(12**3, 500.0, dtype="<f4")
    payload[7] = np.nan
    bad.write_bytes(json.dumps(header).encode() + b"\n" + payload.tobytes())
    good = tmp_path / "good.vol"
    write_vol(good, np.full((12, 12, 12), 500.0))
    code = main(["fit-teacher", "--pair", str(bad), str(good), "--out", str(tmp_path / "t.vol"), "--iters", "2"])
    assert code == EXIT_NUMERIC


def test_data_error_exit_code(tmp_path, capsys):
    (tmp_path / "preds").mkdir()
    Manifest(phantoms=[]).save(tmp_path / "m.json")
    args = ["evaluate", "--pred-dir", str(tmp_path / "preds"), "--truth-dir", str(tmp_path),
            "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path / "m.csv")]
    assert main(args) == EXIT_DATA
    assert "no predictions" in capsys.readouterr().err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    code = main(["generate", "--n-base", "4", "--variants", "2", "--shape", "12", "--mix", "1,0,0",
                 "--seed", "3", "--out", str(data)])
    assert code == EXIT_OK
    return root, data


def test_generate_layout(corpus):
    root, data = corpus
    m = Manifest.load(data / "manifest.json")
    assert len(m.phantoms) == 4 and all(len(p["variants"]) == 2 for p in m.phantoms)
    runs = json.loads((data / "run_manifest.json").read_text())
    assert runs[0]["command"] == "generate" and runs[0]["seed"] == 3


def test_identity_infer_then_evaluate(corpus):
    root, data = corpus
    preds = root / "identity"
    assert main(["infer", "--identity", "--data", str(data), "--split", "all", "--out", str(preds)]) == EXIT_OK
    out = root / "metrics.csv"
    assert main(["evaluate", "--pred-dir", str(preds), "--truth-dir", str(data),
                 "--manifest", str(data / "manifest.json"), "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert "# bone_threshold_hu=300.0" in lines and "# bone_mae_mask=truth" in lines
    rows = list(csv.DictReader(line for line in lines if not line.startswith("#")))
    assert len(rows) == 5 and rows[-1]["phantom"] == "mean+-std"
    first = rows[0]
    d5, _ = read_vol(data / first["phantom"] / "000_d5.vol")
    y1, _ = read_vol(data / first["phantom"] / "000_y1.vol")
    direct = evaluate_pair(d5, y1)
    assert float(first["mid_mae_bone"]) == pytest.approx(direct.mid_mae_bone, abs=1e-4)
    assert float(first["full_dice"]) == pytest.approx(direct.full_dice, abs=1e-4)


def test_fit_teacher_single_pair(corpus):
    root, data = corpus
    pid = Manifest.load(data / "manifest.json").phantoms[0]["id"]
    out, report = root / "one_svf.vol", root / "one.json"
    code = main(["fit-teacher", "--pair", str(data / pid / "000_d5.vol"), str(data / pid / "000_y1.vol"),
                 "--out", str(out), "--report", str(report), "--iters", "3", "--weighted"])
    assert code == EXIT_OK
    svf, header = read_vol(out)
    assert header["role"] == "svf" and svf.shape == (3, 12, 12, 12)
    assert json.loads(report.read_text())["iters_run"] <= 3


def test_train_infer_and_ablate(corpus):
    root, data = corpus
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    run = root / "run"
    assert main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(run), "--variants", "1"]) == EXIT_OK
    for name in ("config.json", "history.csv", "best.ckpt", "last.ckpt", "run_manifest.json"):
        assert (run / name).exists()
    pid = Manifest.load(data / "manifest.json").phantoms[0]["id"]
    pred = root / "pred.vol"
    code = main(["infer", "--ckpt", str(run / "best.ckpt"), "--in", str(data / pid / "000_d5.vol"),
                 "--out", str(pred), "--solver", "euler", "--step", "0.5"])
    assert code == EXIT_OK and read_vol(pred)[0].shape == (12, 12, 12)

    abl = root / "ablate"
    code = main(["ablate", "--data", str(data), "--teachers", str(root / "teachers"), "--out", str(abl),
                 "--config", str(cfg_path), "--configs", "R,R+T1", "--seeds", "0", "--variants", "1",
                 "--teacher-iters", "2"])
    assert code == EXIT_OK
    table = (abl / "ablation.csv").read_text().splitlines()
    names = [line.split(",")[0] for line in table[1:]]
    assert names == ["R", "R+T1", "identity", "teacher"]
    report = json.loads((abl / "ablation.json").read_text())
    assert {r["config"] for r in report["runs"]} == {"R", "R+T1"}


def test_train_requires_teachers(corpus, tmp_path, capsys):
    root, data = corpus
    cfg = dict(TINY_CONFIG, use_lyap=True)
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code = main(["train", "--config", str(tmp_path / "c.json"), "--data", str(data), "--out", str(tmp_path / "r")])
    assert code == EXIT_DATA


def test_selftest_passes(capsys):
    assert main(["selftest"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 6
