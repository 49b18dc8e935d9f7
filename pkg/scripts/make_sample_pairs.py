"""Regenerate the synthetic registered IR/VIS pairs shipped in src/retifuse/data/pairs.

Each scene is a piecewise-smooth albedo map (background plus a few flat
objects) under a smooth lighting ramp; the infrared image shows the same
objects as warm blobs over a cool, slightly graded background.
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image

OUT = Path(__file__).resolve().parents[1] / "src" / "retifuse" / "data" / "pairs"


def make_pair(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    light = 0.6 + 0.4 * (rng.uniform(0.3, 1.0) * xx + rng.uniform(0.0, 0.6) * yy) / 1.6
    fx, fy = rng.uniform(0.5, 1.5, size=2)
    albedo = 0.6 + 0.1 * np.sin(2 * np.pi * fx * xx) * np.cos(2 * np.pi * fy * yy)
    ir = 0.25 + 0.1 * yy
    for _ in range(3):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        hh, ww = rng.uniform(0.12, 0.25, size=2)
        box = (np.abs(yy - cy) < hh) & (np.abs(xx - cx) < ww)
        albedo[box] = rng.uniform(0.3, 0.95)
        ir = ir + 0.5 * np.exp(-(((yy - cy) / hh) ** 2 + ((xx - cx) / ww) ** 2))
    vis = np.clip(light * albedo + 0.01 * rng.standard_normal((size, size)), 0, 1)
    ir = np.clip(ir + 0.01 * rng.standard_normal((size, size)), 0, 1)
    return vis, ir


def main(size: int = 64) -> None:
    rng = np.random.default_rng(20240501)
    for sub in ("ir", "vis"):
        (OUT / sub).mkdir(parents=True, exist_ok=True)
    for k in range(4):
        vis, ir = make_pair(rng, size)
        Image.fromarray(np.round(vis * 255).astype(np.uint8), mode="L").save(OUT / "vis" / f"scene{k}.png")
        Image.fromarray(np.round(ir * 255).astype(np.uint8), mode="L").save(OUT / "ir" / f"scene{k}.png")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 64)
