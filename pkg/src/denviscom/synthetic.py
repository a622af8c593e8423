"""Synthetic image pairs with analytic ground truth.

Flow pairs are a smooth random texture and its integer translation (with
wraparound), so the true flow is constant and known exactly.  Stereo pairs
are random-texture stereograms: the right image equals the left with a box
region shifted left by the disparity; pixels the construction cannot make
consistent (the occluded band and the revealed band) are marked invalid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import ContractError


@dataclass
class SyntheticSample:
    img1: np.ndarray  # [3, H, W] in [-1, 1]
    img2: np.ndarray
    gt: np.ndarray  # flow [2, H, W] or disparity [H, W]
    valid: np.ndarray  # [H, W] bool
    task: str


def _smooth_texture(rng: np.random.Generator, height: int, width: int, sigma: float) -> np.ndarray:
    """Low-pass filtered noise, normalized per channel to [-1, 1]."""
    img = rng.normal(size=(3, height, width))
    img = gaussian_filter(img, sigma=(0, sigma, sigma), mode="wrap")
    span = np.abs(img).max(axis=(1, 2), keepdims=True)
    return img / np.maximum(span, 1e-9)


def gen_flow_pair(seed: int, height: int, width: int, shift: tuple[int, int], sigma: float = 2.0) -> SyntheticSample:
    """img2 is img1 rolled by the integer shift (dx, dy); gt is constant (dx, dy)."""
    dx, dy = int(shift[0]), int(shift[1])
    rng = np.random.default_rng(seed)
    img1 = _smooth_texture(rng, height, width, sigma)
    img2 = np.roll(img1, (dy, dx), axis=(1, 2))
    gt = np.empty((2, height, width))
    gt[0] = dx
    gt[1] = dy
    return SyntheticSample(img1, img2, gt, np.ones((height, width), dtype=bool), "flow")


def gen_stereo_pair(
    seed: int,
    height: int,
    width: int,
    disparity: int,
    box: tuple[int, int, int, int] | None = None,
    sigma: float = 1.5,
) -> SyntheticSample:
    """Random-texture stereogram with a box at the given disparity.

    ``box`` is (y0, x0, y1, x1) in left-image coordinates; by default a
    centered box covering half the image.  The occluded band (background the
    shifted box covers in the right image) and the revealed band (fresh
    noise) are marked invalid.
    """
    d = int(disparity)
    if d < 0:
        raise ContractError(f"gen_stereo_pair: disparity must be >= 0, got {d}")
    rng = np.random.default_rng(seed)
    if box is None:
        box = (height // 4, width // 4, 3 * height // 4, 3 * width // 4)
    y0, x0, y1, x1 = box
    if x0 - d < 0:
        raise ContractError(f"gen_stereo_pair: box column {x0} shifted by {d} leaves the image")

    left = _smooth_texture(rng, height, width, sigma)
    right = left.copy()
    right[:, y0:y1, x0 - d : x1 - d] = left[:, y0:y1, x0:x1]
    if d > 0:
        right[:, y0:y1, x1 - d : x1] = _smooth_texture(rng, y1 - y0, d, sigma)

    gt = np.zeros((height, width))
    gt[y0:y1, x0:x1] = d
    valid = np.ones((height, width), dtype=bool)
    if d > 0:
        valid[y0:y1, x0 - d : x0] = False  # occluded background band
        valid[y0:y1, x1 - d : x1] = False  # revealed band
    return SyntheticSample(left, right, gt, valid, "disparity")
