"""Synthetic registered infrared/visible pairs for smoke tests and demos.

Visible frames carry texture (oriented gratings, a step edge, fine noise);
infrared frames carry a smooth background with a few hot Gaussian targets.
"""
from pathlib import Path

import numpy as np

from .imgcore import GrayImage, save_gray
from .training import ImagePair


def make_pair(rng, height=64, width=64):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.15, 0.6)
    grating = 0.5 + 0.25 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + rng.uniform(0, 2 * np.pi))
    edge = np.where(xx * rng.uniform(-1, 1) + yy * rng.uniform(-1, 1) > rng.uniform(-0.5, 0.5) * width, 0.15, -0.15)
    vis = np.clip(grating + edge + 0.03 * rng.standard_normal((height, width)), 0.0, 1.0)

    ir = 0.2 + 0.1 * (yy / height)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(3, 10)
        ir = ir + rng.uniform(0.4, 0.7) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    ir = np.clip(ir + 0.01 * rng.standard_normal((height, width)), 0.0, 1.0)
    return GrayImage(ir, "unit"), GrayImage(vis, "unit")


def make_pairs(n, height=64, width=64, seed=0):
    rng = np.random.default_rng(seed)
    return [ImagePair(f"{k:04d}.png", *make_pair(rng, height, width)) for k in range(n)]


def write_dataset(root, n, height=64, width=64, seed=0):
    """Write ``root/ir`` and ``root/vis`` PNG directories; returns (ir_dir, vis_dir)."""
    root = Path(root)
    ir_dir, vis_dir = root / "ir", root / "vis"
    ir_dir.mkdir(parents=True, exist_ok=True)
    vis_dir.mkdir(parents=True, exist_ok=True)
    for p in make_pairs(n, height, width, seed):
        save_gray(p.ir, ir_dir / p.name)
        save_gray(p.vis, vis_dir / p.name)
    return ir_dir, vis_dir
