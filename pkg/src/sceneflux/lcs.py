"""Flow maps, finite-time Lyapunov exponents, and coherent-region labels.

Seeding a regular grid and advecting it through successive displacement
fields yields a flow map; the FTLE is the log growth rate of the largest
singular value of its spatial gradient. Cells whose exponents stay low
move coherently; thresholding the exponent field and labeling the
connected low-exponent cells segments the grid into coherent regions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateGrid, InsufficientFrames
from .flowfield import FlowField, bilinear_sample
from .netpbm import read_pgm_raw, write_pgm_raw


@dataclass
class FlowMap:
    """Final particle positions after advecting a seed grid for tau frames."""

    positions: np.ndarray       # (gh, gw, 2) final (x, y)
    origin: tuple[float, float]  # seed position of cell (0, 0)
    spacing: float
    t0: int
    tau: int

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.positions.shape[:2]


@dataclass
class FtleField:
    """Per-cell separation-rate exponents plus optional region labels."""

    sigma: np.ndarray           # (gh, gw), 1/frame
    labels: np.ndarray | None = None
    origin: tuple[float, float] = (0.0, 0.0)
    spacing: float = 1.0

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.sigma.shape

    def label_at(self, x, y) -> np.ndarray:
        """Region label of the cell nearest to pixel position(s) (x, y)."""
        if self.labels is None:
            raise ValueError("field has no labels; run segment() first")
        gh, gw = self.sigma.shape
        col = np.clip(np.rint((np.asarray(x) - self.origin[0]) / self.spacing), 0, gw - 1).astype(int)
        row = np.clip(np.rint((np.asarray(y) - self.origin[1]) / self.spacing), 0, gh - 1).astype(int)
        return self.labels[row, col]


def seed_grid(width: int, height: int, spacing: float) -> tuple[np.ndarray, tuple[float, float]]:
    """Centered regular grid of seed positions at the given pitch."""
    n_x = max(1, int(width // spacing))
    n_y = max(1, int(height // spacing))
    off_x = (width - n_x * spacing) / 2.0 + spacing / 2.0
    off_y = (height - n_y * spacing) / 2.0 + spacing / 2.0
    xs = off_x + spacing * np.arange(n_x)
    ys = off_y + spacing * np.arange(n_y)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1), (off_x, off_y)


def build_flow_map(flows: list[FlowField], t0: int, tau: int, spacing: float) -> FlowMap:
    """Advect a seed grid through flows[t0 : t0+tau] with per-frame stepping."""
    if spacing < 1:
        raise ValueError("spacing must be >= 1")
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if t0 < 0 or t0 + tau > len(flows):
        raise InsufficientFrames(f"need flows [{t0}, {t0 + tau}), have {len(flows)}")

    h, w = flows[t0].shape
    positions, origin = seed_grid(w, h, spacing)
    pos = positions.reshape(-1, 2).copy()
    for t in range(t0, t0 + tau):
        flow = flows[t]
        du = bilinear_sample(flow.u, pos[:, 0], pos[:, 1])
        dv = bilinear_sample(flow.v, pos[:, 0], pos[:, 1])
        pos[:, 0] += du
        pos[:, 1] += dv
    return FlowMap(pos.reshape(positions.shape), origin, float(spacing), t0, tau)


def ftle(flow_map: FlowMap, spacing: float, tau: int) -> FtleField:
    """Exponent field from central differences of the flow-map gradient.

    sigma = ln(sqrt(lambda_max(F^T F))) / tau with F the position
    Jacobian; edge cells copy their nearest interior neighbor.
    """
    gh, gw = flow_map.grid_shape
    if gh < 3 or gw < 3:
        raise DegenerateGrid("FTLE needs at least a 3x3 seed grid")
    fx = flow_map.positions[..., 0]
    fy = flow_map.positions[..., 1]
    d = 2.0 * spacing

    # F = [[dXf/dx0, dXf/dy0], [dYf/dx0, dYf/dy0]] on interior cells
    f11 = (fx[1:-1, 2:] - fx[1:-1, :-2]) / d
    f12 = (fx[2:, 1:-1] - fx[:-2, 1:-1]) / d
    f21 = (fy[1:-1, 2:] - fy[1:-1, :-2]) / d
    f22 = (fy[2:, 1:-1] - fy[:-2, 1:-1]) / d

    # largest eigenvalue of the 2x2 Cauchy-Green tensor C = F^T F
    c11 = f11 * f11 + f21 * f21
    c12 = f11 * f12 + f21 * f22
    c22 = f12 * f12 + f22 * f22
    half_trace = 0.5 * (c11 + c22)
    disc = np.sqrt(np.maximum(half_trace * half_trace - (c11 * c22 - c12 * c12), 0.0))
    lam_max = np.maximum(half_trace + disc, 1e-300)

    sigma = np.empty((gh, gw))
    sigma[1:-1, 1:-1] = np.log(lam_max) / (2.0 * tau)
    sigma[0, 1:-1] = sigma[1, 1:-1]
    sigma[-1, 1:-1] = sigma[-2, 1:-1]
    sigma[:, 0] = sigma[:, 1]
    sigma[:, -1] = sigma[:, -2]
    return FtleField(sigma, None, flow_map.origin, flow_map.spacing)


def segment(field: FtleField, threshold_quantile: float = 0.9) -> FtleField:
    """Label coherent regions separated by high-exponent ridges.

    Cells strictly above the quantile value are ridges; 4-connected
    components of the remaining cells become regions and ridge cells
    adopt the majority label among their labeled neighbors.
    """
    if not 0.0 < threshold_quantile < 1.0:
        raise ValueError("threshold_quantile must be in (0, 1)")
    sigma = field.sigma
    cutoff = float(np.quantile(sigma, threshold_quantile))
    ridge = sigma > cutoff

    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    labels, count = ndimage.label(~ridge, structure=structure)
    labels = labels - 1  # background (ridge) becomes -1, regions 0..R-1

    if count == 0:
        # everything ridge (cannot happen with a strict cutoff) or empty
        labels = np.zeros_like(labels)
        count = 1

    # flood ridge cells with the dominant neighboring region
    while np.any(labels < 0):
        unlabeled = labels < 0
        grown = ndimage.grey_dilation(labels, size=(3, 3))
        progress = unlabeled & (grown >= 0)
        if not np.any(progress):
            labels[unlabeled] = 0
            break
        labels[progress] = grown[progress]

    return FtleField(sigma.copy(), labels, field.origin, field.spacing)


# ---------------------------------------------------------------------------
# exports

def write_ftle(path_pgm, path_sidecar, field: FtleField) -> None:
    """16-bit PGM of linearly scaled exponents plus a text scale sidecar."""
    lo = float(field.sigma.min())
    hi = float(field.sigma.max())
    span = hi - lo if hi > lo else 1.0
    samples = np.rint((field.sigma - lo) / span * 65535).astype(np.int64)
    write_pgm_raw(path_pgm, samples, 65535)
    with open(path_sidecar, "w") as f:
        f.write(f"min={lo:.12g}\nmax={hi:.12g}\n")
        f.write(f"origin={field.origin[0]:.12g} {field.origin[1]:.12g}\n")
        f.write(f"spacing={field.spacing:.12g}\n")


def read_ftle(path_pgm, path_sidecar) -> FtleField:
    samples, maxval = read_pgm_raw(path_pgm)
    meta = {}
    with open(path_sidecar) as f:
        for line in f:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.split()
    lo = float(meta["min"][0])
    hi = float(meta["max"][0])
    sigma = lo + samples.astype(np.float64) / maxval * (hi - lo)
    origin = (float(meta["origin"][0]), float(meta["origin"][1]))
    return FtleField(sigma, None, origin, float(meta["spacing"][0]))


def write_labels(path, field: FtleField) -> None:
    """Region labels as an ASCII grid, one row per line."""
    if field.labels is None:
        raise ValueError("field has no labels")
    with open(path, "w") as f:
        for row in field.labels:
            f.write(" ".join(str(int(x)) for x in row) + "\n")


def read_labels(path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.int64, ndmin=2)
