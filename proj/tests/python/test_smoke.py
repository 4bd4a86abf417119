import math

import numpy as np
import pytest

import histnet


def test_lab_round_trip_and_achromatic_axis():
    rng = np.random.default_rng(0)
    rgb = rng.uniform(size=(10, 10, 3))
    back = histnet.lab_to_rgb(histnet.rgb_to_lab(rgb))
    assert np.max(np.abs(back - rgb)) < 1e-9
    gray = np.full((2, 2, 3), 0.4)
    lab = histnet.rgb_to_lab(gray)
    assert np.max(np.abs(lab[..., 1:])) < 1e-9


def test_metrics():
    a = np.full((4, 5, 3), 0.25)
    b = np.full((4, 5, 3), 0.75)
    assert histnet.psnr(a, b) == pytest.approx(6.020599913279624, abs=1e-9)
    img = np.random.default_rng(1).uniform(size=(16, 16, 3))
    assert histnet.ssim(img, img) == 1.0
    assert histnet.psnr(img, img) == 100.0
    assert histnet.perceptual_distance(img, img) == 0.0


def test_bad_input_raises_value_error():
    with pytest.raises(ValueError):
        histnet.psnr(np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        histnet.perceptual_distance(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), "lpips:/nonexistent")


def test_hue_histogram_of_pure_red():
    red = np.zeros((3, 3, 3))
    red[..., 0] = 1.0
    bins = histnet.hue_histogram([red], 12)
    assert len(bins) == 12
    assert bins[0][2] == pytest.approx(1.0)


def test_config_round_trip():
    cfg = histnet.TrainConfig.test_preset()
    cfg.set("ablation", "baseline")
    again = histnet.TrainConfig.parse(cfg.to_text())
    assert again.to_dict() == cfg.to_dict()
    assert cfg.effective_weights()["lambda_par"] == 0.0
    assert "lambda_cls" in histnet.train_config_keys()
    with pytest.raises(ValueError):
        cfg.set("no_such_key", "1")


def _write_images(root):
    images = root / "images"
    images.mkdir()
    rng = np.random.default_rng(3)
    for i in range(10):
        img = np.zeros((32, 32, 3))
        img[...] = rng.uniform(0.1, 0.9, size=3)
        img[8:24, 8:24] = rng.uniform(0.1, 0.9, size=3)
        histnet.write_rgb_png(str(images / f"s{i}.png"), img)
    histnet.write_rgb_png(str(images / "gray.png"), np.full((32, 32, 3), 0.5))
    return images


def test_build_train_colorize_evaluate(tmp_path):
    images = _write_images(tmp_path)
    log = histnet.build_dataset(str(images), str(tmp_path / "ds"), str(histnet.DEFAULT_TAXONOMY), test_fraction=0.2)
    assert log["kept"] == 10
    assert log["rejected_grayscale"] == 1
    manifest = str(tmp_path / "ds" / "manifest.jsonl")
    stats = histnet.dataset_stats(manifest)
    assert stats["total"] == 10
    assert stats["test"] == 2

    cfg = histnet.TrainConfig.test_preset()
    cfg.epochs = 1
    result = histnet.train(cfg, manifest, str(histnet.DEFAULT_PALETTE), str(tmp_path / "run"))
    assert result["generator_steps"] == 1
    assert math.isfinite(result["last"]["total"])

    gen = histnet.Generator.load(result["checkpoint"])
    src = histnet.read_rgb(str(images / "s0.png"))
    out = gen.colorize(src)
    assert out.shape == src.shape
    dl = np.abs(histnet.rgb_to_lab(out)[..., 0] - histnet.rgb_to_lab(src)[..., 0])
    assert dl.max() < 1e-6

    report = histnet.evaluate(result["checkpoint"], manifest)
    assert report["sample_count"] == 2
