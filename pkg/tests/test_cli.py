import json

import numpy as np
import pytest

from permtensor.cli import CliError, main, read_image, write_raw_image
from permtensor.config import ConfigError, RunConfig, load_config, parse_config
from permtensor.dataset import load_dataset

SMALL = {
    "generator": {"size": 16, "correlation_length": 1.5},
    "data": {"n_samples": 16, "splits": {"train": 0.5, "val": 0.25, "test": 0.25}},
    "model": {"image_size": 16, "stem_channels": 4, "stage_channels": [8],
              "blocks_per_stage": [1], "head_hidden": [8, 4], "porosity_hidden": [4],
              "porosity_embed_dim": 4, "mbconv_expand": 2, "film_stages": [0]},
    "training": {"2": {"batch_size": 4}, "3": {"batch_size": 4}},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["gen-data", "--config", str(cfg), "--seed", "5", "--out", str(root / "data")]) == 0
    return root, cfg


def test_gen_data_is_deterministic(workspace, tmp_path):
    root, cfg = workspace
    assert main(["gen-data", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "d")]) == 0
    for name in ("images.bin", "labels.jsonl", "manifest.json"):
        assert (tmp_path / "d" / name).read_bytes() == (root / "data" / name).read_bytes()
    assert (root / "data" / "run_meta.json").exists()
    assert len(load_dataset(root / "data")) == 16


def test_characterize(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert main(["characterize", str(root / "data"), "--config", str(cfg),
                 "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    # too few samples for the label statistics: geometry only
    assert rep["all"]["geometry"]["n"] == 16 and "splits" not in rep
    assert (tmp_path / "report.txt").read_text().startswith("samples 16")


def test_characterize_full_report(small_dataset, tmp_path):
    from permtensor.dataset import save_dataset
    data = save_dataset(small_dataset, tmp_path / "d")
    assert main(["characterize", str(data), "--out", str(tmp_path / "c")]) == 0
    rep = json.loads((tmp_path / "c" / "report.json").read_text())
    assert rep["all"]["n"] == 40 and rep["all"]["pd_fraction"] == 1.0
    assert len(rep["cross_split"]) == 15
    assert rep["splits"]["val"]["labels"].startswith("fewer")


def test_train_evaluate_predict(workspace, tmp_path, capsys):
    root, cfg = workspace
    p2 = tmp_path / "p2"
    assert main(["train", str(root / "data"), "--phase", "2", "--epochs", "3",
                 "--config", str(cfg), "--out", str(p2)]) == 0
    summary = json.loads((p2 / "summary.json").read_text())
    assert summary["phase"] == 2 and (p2 / "best" / "params.bin").exists()
    assert main(["train", str(root / "data"), "--phase", "3", "--epochs", "2",
                 "--config", str(cfg), "--out", str(tmp_path / "p3")]) == 2
    assert main(["train", str(root / "data"), "--phase", "3", "--epochs", "2", "--config", str(cfg),
                 "--init", str(p2 / "best"), "--out", str(tmp_path / "p3")]) == 0

    ev = tmp_path / "ev"
    assert main(["evaluate", str(p2 / "best"), str(root / "data"), "--config", str(cfg),
                 "--tta", "--mc-dropout", "3", "--out", str(ev)]) == 0
    rep = json.loads((ev / "metrics.json").read_text())
    assert rep["tta"] is True and rep["aggregate"]["n"] == 4 and rep["uncertainty"]["T"] == 3
    assert (ev / "metrics.txt").exists()
    ev2 = tmp_path / "ev2"
    main(["evaluate", str(p2 / "best"), str(root / "data"), "--config", str(cfg),
          "--tta", "--mc-dropout", "3", "--out", str(ev2)])
    assert (ev2 / "metrics.json").read_bytes() == (ev / "metrics.json").read_bytes()

    ds = load_dataset(root / "data")
    raw = tmp_path / "img.raw"
    write_raw_image(ds.images[0], raw)
    capsys.readouterr()
    assert main(["predict", str(p2 / "best"), str(raw), "--config", str(cfg)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["porosity"] == pytest.approx(ds.porosity[0])
    assert set(out) >= {"kxx", "kxy", "kyx", "kyy", "eps_sym", "positive_definite"}
    big = tmp_path / "big.raw"
    write_raw_image(np.zeros((32, 32), dtype=np.uint8), big)
    assert main(["predict", str(p2 / "best"), str(big)]) == 2


def test_augment_preview(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "prev.jsonl"
    assert main(["augment-preview", str(root / "data"), "--n", "4", "--config", str(cfg),
                 "--out", str(out)]) == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(recs) == 4 and all("fired" in r and "g" in r for r in recs)


def test_read_image_formats(tmp_path):
    img = (np.random.default_rng(0).random((5, 7)) < 0.4).astype(np.uint8)
    write_raw_image(img, tmp_path / "a.raw")
    assert np.array_equal(read_image(tmp_path / "a.raw"), img)
    pgm = b"P5\n# comment\n7 5\n255\n" + (img * 255).astype(np.uint8).tobytes()
    (tmp_path / "a.pgm").write_bytes(pgm)
    assert np.array_equal(read_image(tmp_path / "a.pgm"), img)
    (tmp_path / "bad.pgm").write_bytes(b"P5\n7 5\n255\n" + bytes([7] * 35))
    with pytest.raises(CliError):
        read_image(tmp_path / "bad.pgm")
    (tmp_path / "short.raw").write_bytes(b"\x01\x00")
    with pytest.raises(CliError):
        read_image(tmp_path / "short.raw")


def test_config_strictness(tmp_path):
    assert load_config(None) == RunConfig()
    with pytest.raises(ConfigError, match="unknown top-level"):
        parse_config({"modle": {}})
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config({"model": {"image_sise": 32}})
    with pytest.raises(ConfigError):
        parse_config({"training": {"2": {"lr": 1}}})
    with pytest.raises(ConfigError):
        parse_config({"training": {"scale": "huge"}})
    with pytest.raises(ConfigError):
        parse_config({"lbm": {"tau": 0.2}})
    cfg = parse_config({"training": {"scale": "full", "3": {"epochs": 10, "warmup_epochs": 2}}})
    assert cfg.train_config(3).epochs == 10 and cfg.train_config(2).epochs == 600
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad)]) == 2
