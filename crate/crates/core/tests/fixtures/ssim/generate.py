"""Writes the SSIM reference pairs and their scikit-image scores.

Scores use the grayscale channel mean, an 11x11 Gaussian window with
sigma 1.5, population covariance and a unit data range.
"""
import json
import pathlib

import numpy as np
from PIL import Image
from skimage.metrics import structural_similarity

HERE = pathlib.Path(__file__).parent
W, H = 48, 40


def test_card():
    y, x = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.zeros((H, W, 3))
    img[..., 0] = x / (W - 1)
    img[..., 1] = y / (H - 1)
    img[..., 2] = ((x // 6 + y // 6) % 2) * 0.8 + 0.1
    disk = (x - 30) ** 2 + (y - 18) ** 2 < 64
    img[disk] = [0.95, 0.9, 0.2]
    return img


def quantize(img):
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def blur(img):
    out = img.copy()
    out[1:-1, 1:-1] = sum(
        img[1 + dy : H - 1 + dy, 1 + dx : W - 1 + dx] for dy in (-1, 0, 1) for dx in (-1, 0, 1)
    ) / 9
    return out


def main():
    rng = np.random.default_rng(20241014)
    card = test_card()
    pairs = {
        "noise": (card, card + rng.normal(0, 0.05, card.shape)),
        "blur": (card, blur(card)),
        "negated": (card, 1 - card),
        "shift": (card, card + 0.1),
        "random": (rng.random(card.shape), rng.random(card.shape)),
    }
    scores = {}
    for name, (a, b) in pairs.items():
        qa, qb = quantize(a), quantize(b)
        Image.fromarray(qa).save(HERE / f"{name}_a.png")
        Image.fromarray(qb).save(HERE / f"{name}_b.png")
        ga = (qa / 255.0).mean(axis=2)
        gb = (qb / 255.0).mean(axis=2)
        scores[name] = structural_similarity(
            ga, gb, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
        )
    (HERE / "scores.json").write_text(json.dumps(scores, indent=2) + "\n")


if __name__ == "__main__":
    main()
