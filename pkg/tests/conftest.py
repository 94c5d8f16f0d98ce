"""Shared synthetic fixtures: textures, frame pairs, rigs, flow fields."""
from __future__ import annotations

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter, map_coordinates

from sceneflux.flowfield import Frame, FlowField


def noise_texture(width: int, height: int, seed: int, blur: float = 1.5) -> np.ndarray:
    """Band-limited noise texture in [0.05, 0.95], wrap-periodic."""
    rng = np.random.default_rng(seed)
    img = rng.random((height, width))
    img = gaussian_filter(img, blur, mode="wrap")
    img -= img.min()
    img /= np.ptp(img)
    return 0.05 + 0.9 * img


def shifted_pair(width: int, height: int, dx: int, dy: int, seed: int = 7):
    """Frame pair where next = prev rolled by integer (dx, dy), wrap padding.

    Ground-truth flow is exactly (dx, dy) away from the wrap seams.
    """
    tex = noise_texture(width, height, seed)
    nxt = np.roll(tex, shift=(dy, dx), axis=(0, 1))
    return Frame(tex), Frame(nxt), (float(dx), float(dy))


def rotated_pair(width: int, height: int, theta_deg: float, seed: int = 7):
    """Frame pair where next is prev rotated about the image center.

    Returns frames plus the exact displacement field (u, v).
    """
    tex = noise_texture(width, height, seed, blur=2.0)
    theta = np.deg2rad(theta_deg)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    ct, st = np.cos(theta), np.sin(theta)
    rx = ct * (xs - cx) + st * (ys - cy) + cx
    ry = -st * (xs - cx) + ct * (ys - cy) + cy
    rot = np.clip(map_coordinates(tex, [ry, rx], order=3, mode="nearest"), 0.0, 1.0)
    ue = ct * (xs - cx) - st * (ys - cy) + cx - xs
    ve = st * (xs - cx) + ct * (ys - cy) + cy - ys
    return Frame(tex), Frame(rot), ue, ve


def constant_flow(width: int, height: int, du: float, dv: float) -> FlowField:
    return FlowField.constant(width, height, du, dv)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
