"""Dense two-frame optical flow and flow algebra.

The estimator fits a quadratic polynomial model to each pixel
neighborhood (Gaussian applicability) and solves for the displacement
that aligns the two expansions, refined over a coarse-to-fine pyramid.
Flow fields are the carrier of all change information downstream:
warping validates them, composition chains them into flow maps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d, gaussian_filter

from .errors import DimensionMismatch, ParseError

log = logging.getLogger(__name__)

MIN_FRAME_SIDE = 8


@dataclass
class Frame:
    """Single grayscale image, intensities in [0, 1], row-major."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("frame data must be 2-D")
        h, w = self.data.shape
        if w < MIN_FRAME_SIDE or h < MIN_FRAME_SIDE:
            raise ValueError(f"frame must be at least {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}, got {w}x{h}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("frame intensities must be finite")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("frame intensities must lie in [0, 1]")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_rgb(cls, rgb: np.ndarray) -> "Frame":
        """Ingest a color image via Rec.601 luma."""
        rgb = np.asarray(rgb, dtype=np.float64)
        luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
        return cls(np.clip(luma, 0.0, 1.0))


@dataclass
class FlowField:
    """Per-pixel displacement grid: next(x+u, y+v) matches prev(x, y)."""

    u: np.ndarray
    v: np.ndarray
    degenerate: bool = False
    clamped: bool = False

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("u and v must be 2-D arrays of identical shape")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("flow components must be finite")

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @classmethod
    def zero(cls, width: int, height: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def constant(cls, width: int, height: int, du: float, dv: float) -> "FlowField":
        return cls(np.full((height, width), float(du)), np.full((height, width), float(dv)))


@dataclass
class FlowParams:
    """Estimator knobs; defaults follow the reference configuration."""

    levels: int = 3
    window: int = 15
    iterations: int = 3
    max_displacement: float | None = None  # defaults to 0.25 * min(w, h)

    def validate(self) -> None:
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.window < 5 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 5")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def bilinear_sample(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample `grid` at float coordinates with edge-clamped bilinear weights.

    Exact at integer coordinates (weights collapse to 1 and 0).
    """
    h, w = grid.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = xs - x0
    ty = ys - y0
    top = grid[y0, x0] * (1.0 - tx) + grid[y0, x1] * tx
    bot = grid[y1, x0] * (1.0 - tx) + grid[y1, x1] * tx
    return top * (1.0 - ty) + bot * ty


# ---------------------------------------------------------------------------
# polynomial expansion

def _poly_expand(image: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Fit f ~ x'Ax + b'x + c per pixel under a Gaussian applicability.

    Returns A as (h, w, 3) packing (a11, a22, a12) and b as (h, w, 2).
    """
    m = window // 2
    sigma = window / 5.0
    x = np.arange(-m, m + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()

    # separable correlations of the image against {g, g*x, g*x^2} per axis
    gx = g * x
    gxx = g * x * x
    mode = "nearest"

    def corr(img, ky, kx):
        tmp = correlate1d(img, ky, axis=0, mode=mode)
        return correlate1d(tmp, kx, axis=1, mode=mode)

    p1 = corr(image, g, g)
    px = corr(image, g, gx)
    py = corr(image, gx, g)
    pxx = corr(image, g, gxx)
    pyy = corr(image, gxx, g)
    pxy = corr(image, gx, gx)

    # applicability moments; the normal-equation matrix is constant
    s2 = float((g * x * x).sum())
    s4 = float((g * x ** 4).sum())
    s22 = s2 * s2

    # (1, x^2, y^2) block shares a 3x3 system; x, y, xy rows decouple
    M = np.array([[1.0, s2, s2], [s2, s4, s22], [s2, s22, s4]])
    Minv = np.linalg.inv(M)

    r1 = Minv[0, 0] * p1 + Minv[0, 1] * pxx + Minv[0, 2] * pyy
    r4 = Minv[1, 0] * p1 + Minv[1, 1] * pxx + Minv[1, 2] * pyy
    r5 = Minv[2, 0] * p1 + Minv[2, 1] * pxx + Minv[2, 2] * pyy
    r2 = px / s2
    r3 = py / s2
    r6 = pxy / s22

    A = np.stack([r4, r5, 0.5 * r6], axis=-1)
    b = np.stack([r2, r3], axis=-1)
    del r1
    return A, b


def _downsample(image: np.ndarray) -> np.ndarray:
    return gaussian_filter(image, 1.0, mode="nearest")[::2, ::2]


def _upsample_flow(u: np.ndarray, v: np.ndarray, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    cx = xs / 2.0
    cy = ys / 2.0
    return 2.0 * bilinear_sample(u, cx, cy), 2.0 * bilinear_sample(v, cx, cy)


def _displacement_iteration(A1, b1, A2, b2, u, v, window):
    """One fixed-point refinement of the displacement field."""
    h, w = u.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sx = xs + u
    sy = ys + v

    a11 = 0.5 * (A1[..., 0] + bilinear_sample(A2[..., 0], sx, sy))
    a22 = 0.5 * (A1[..., 1] + bilinear_sample(A2[..., 1], sx, sy))
    a12 = 0.5 * (A1[..., 2] + bilinear_sample(A2[..., 2], sx, sy))
    db1 = -0.5 * (bilinear_sample(b2[..., 0], sx, sy) - b1[..., 0]) + a11 * u + a12 * v
    db2 = -0.5 * (bilinear_sample(b2[..., 1], sx, sy) - b1[..., 1]) + a12 * u + a22 * v

    # accumulate the local least-squares system over the window
    sigma = window / 5.0
    g11 = a11 * a11 + a12 * a12
    g12 = a12 * (a11 + a22)
    g22 = a22 * a22 + a12 * a12
    h1 = a11 * db1 + a12 * db2
    h2 = a12 * db1 + a22 * db2
    sm = lambda f: gaussian_filter(f, sigma, mode="nearest")
    g11, g12, g22, h1, h2 = sm(g11), sm(g12), sm(g22), sm(h1), sm(h2)

    det = g11 * g22 - g12 * g12
    reg = 1e-9 * max(float(np.mean(g11 + g22)), 1e-30) + 1e-30
    det = det + reg
    return (g22 * h1 - g12 * h2) / det, (g11 * h2 - g12 * h1) / det


def estimate_flow(prev: Frame, next: Frame, params: FlowParams | None = None) -> FlowField:
    """Estimate dense displacement from `prev` to `next`.

    Post-condition: next(x+u, y+v) ~ prev(x, y) under bilinear sampling.
    A zero-variance frame yields a zero field flagged degenerate.
    """
    params = params or FlowParams()
    params.validate()
    if prev.data.shape != next.data.shape:
        raise DimensionMismatch(
            f"frame shapes differ: {prev.data.shape} vs {next.data.shape}")

    h, w = prev.data.shape
    if np.ptp(prev.data) == 0.0 or np.ptp(next.data) == 0.0:
        log.warning("degenerate (zero-variance) frame; returning zero flow")
        out = FlowField.zero(w, h)
        out.degenerate = True
        return out

    # pyramid; keep the coarsest level large enough for the window
    pyr_prev = [prev.data]
    pyr_next = [next.data]
    for _ in range(params.levels - 1):
        if min(pyr_prev[-1].shape) < 2 * params.window:
            break
        pyr_prev.append(_downsample(pyr_prev[-1]))
        pyr_next.append(_downsample(pyr_next[-1]))

    u = v = None
    for lvl in range(len(pyr_prev) - 1, -1, -1):
        p, n = pyr_prev[lvl], pyr_next[lvl]
        if u is None:
            u = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            u, v = _upsample_flow(u, v, p.shape)
        A1, b1 = _poly_expand(p, params.window)
        A2, b2 = _poly_expand(n, params.window)
        for _ in range(params.iterations):
            u, v = _displacement_iteration(A1, b1, A2, b2, u, v, params.window)

    max_disp = params.max_displacement
    if max_disp is None:
        max_disp = 0.25 * min(w, h)
    out = FlowField(u, v)
    peak = max(np.abs(u).max(), np.abs(v).max())
    if peak > max_disp:
        log.warning("flow exceeds max displacement %.3g; clamping", max_disp)
        out = FlowField(np.clip(u, -max_disp, max_disp), np.clip(v, -max_disp, max_disp))
        out.clamped = True
    return out


def warp(frame: Frame, flow: FlowField) -> Frame:
    """Pull-back warp: output(x, y) = frame(x+u, y+v), edge clamped."""
    if frame.data.shape != flow.shape:
        raise DimensionMismatch("frame and flow dimensions differ")
    h, w = frame.data.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sampled = bilinear_sample(frame.data, xs + flow.u, ys + flow.v)
    return Frame(np.clip(sampled, 0.0, 1.0))


def compose(first: FlowField, second: FlowField) -> FlowField:
    """Chain two fields: result(x) = first(x) + second(x + first(x))."""
    if first.shape != second.shape:
        raise DimensionMismatch("flow dimensions differ")
    h, w = first.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sx = xs + first.u
    sy = ys + first.v
    return FlowField(first.u + bilinear_sample(second.u, sx, sy),
                     first.v + bilinear_sample(second.v, sx, sy))


# ---------------------------------------------------------------------------
# file formats

def write_flow(path, flow: FlowField) -> None:
    """ASCII flow file: `FLOW2 <w> <h>` then one `u v` line per pixel."""
    with open(path, "w") as f:
        f.write(f"FLOW2 {flow.width} {flow.height}\n")
        for uu, vv in zip(flow.u.ravel(), flow.v.ravel()):
            f.write(f"{uu:.9g} {vv:.9g}\n")


def read_flow(path) -> FlowField:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != "FLOW2":
            raise ParseError(f"{path}: bad flow header")
        w, h = int(header[1]), int(header[2])
        vals = np.loadtxt(f, dtype=np.float64, ndmin=2)
    if vals.shape != (w * h, 2):
        raise ParseError(f"{path}: expected {w * h} rows of 'u v'")
    return FlowField(vals[:, 0].reshape(h, w), vals[:, 1].reshape(h, w))


def flow_to_rgb(flow: FlowField) -> np.ndarray:
    """HSV direction/magnitude rendering of a flow field as (h, w, 3) floats."""
    mag = np.hypot(flow.u, flow.v)
    ang = np.arctan2(flow.v, flow.u)
    hue = (ang + np.pi) / (2.0 * np.pi)
    peak = mag.max()
    sat = mag / peak if peak > 0 else np.zeros_like(mag)
    val = np.ones_like(mag)

    i = np.floor(hue * 6.0).astype(int) % 6
    f = hue * 6.0 - np.floor(hue * 6.0)
    p = val * (1 - sat)
    q = val * (1 - f * sat)
    t = val * (1 - (1 - f) * sat)
    r = np.choose(i, [val, q, p, p, t, val])
    g = np.choose(i, [t, val, val, q, p, p])
    b = np.choose(i, [p, p, t, val, val, q])
    return np.stack([r, g, b], axis=-1)
