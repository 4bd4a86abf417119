"""Writes SSIM reference pairs and expected values computed with scikit-image.

Usage: python3 tools/make_ssim_fixture.py tests/fixtures/ssim
"""
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from skimage.metrics import structural_similarity


def luma(rgb):
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def pair(rng, kind, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    if kind == "noise":
        a = rng.random((h, w, 3))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    elif kind == "gradient":
        a = np.stack([xx, yy, 1 - xx], -1)
        b = np.clip(a * 0.8 + 0.1, 0, 1)
    elif kind == "checker":
        a = np.repeat((((yy * 8).astype(int) + (xx * 8).astype(int)) % 2)[..., None], 3, -1).astype(float)
        b = 1 - a
    elif kind == "blocks":
        a = rng.random((h // 4 + 1, w // 4 + 1, 3)).repeat(4, 0).repeat(4, 1)[:h, :w]
        b = np.roll(a, 2, axis=1)
    else:
        a = rng.random((h, w, 3))
        b = rng.random((h, w, 3))
    return a, b


def main(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(2024)
    kinds = ["noise", "gradient", "checker", "blocks", "independent"]
    expected = []
    for i in range(20):
        h, w = [(16, 16), (24, 32), (31, 17), (40, 40)][i % 4]
        a, b = pair(rng, kinds[i % len(kinds)], h, w)
        a8 = np.round(a * 255).astype(np.uint8)
        b8 = np.round(b * 255).astype(np.uint8)
        Image.fromarray(a8).save(out / f"pair{i:02d}_a.png")
        Image.fromarray(b8).save(out / f"pair{i:02d}_b.png")
        la, lb = luma(a8 / 255.0), luma(b8 / 255.0)
        v = structural_similarity(la, lb, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                  data_range=1.0, K1=0.01, K2=0.03)
        expected.append({"a": f"pair{i:02d}_a.png", "b": f"pair{i:02d}_b.png", "ssim": float(v)})
    (out / "expected.json").write_text(json.dumps(expected, indent=1) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/fixtures/ssim")
