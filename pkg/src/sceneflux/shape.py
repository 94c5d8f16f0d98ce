"""New-object detection and Fourier shape capture.

A coarse 64-dimensional gradient-orientation signature gates the
pipeline: when the scene signature jumps, a motion mask is cut from the
flow field, the largest moving component's boundary is traced, and its
Fourier descriptors are handed to the fluid stage as shape targets.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, EmptyMask, FrameTooSmall, TooSmallComponent
from .flowfield import FlowField, Frame


@dataclass
class Boundary:
    """Closed pixel boundary, consecutive points 8-adjacent."""

    points: np.ndarray  # (N, 2) of (x, y)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(self.points) < 3:
            raise ValueError("boundary needs at least 3 points")

    def __len__(self) -> int:
        return len(self.points)

    def as_complex(self) -> np.ndarray:
        return self.points[:, 0] + 1j * self.points[:, 1]


@dataclass
class ShapeDescriptor:
    """Complex boundary spectrum a(n), n = 0..N-1, mean-scaled."""

    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.complex128).reshape(-1)

    @property
    def n_points(self) -> int:
        return len(self.coefficients)


@dataclass
class GistVector:
    """64 orientation-energy features on a 4x4 grid, L1-normalized."""

    values: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != 64:
            raise ValueError("gist vector must have 64 entries")


def motion_mask(flow: FlowField, threshold: float) -> np.ndarray:
    """Boolean mask of pixels moving relative to the global median motion.

    The per-component median subtraction removes ego-motion; a single
    3x3 morphological opening removes speckle.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    du = flow.u - np.median(flow.u)
    dv = flow.v - np.median(flow.v)
    mask = np.hypot(du, dv) > threshold
    return ndimage.binary_opening(mask, structure=np.ones((3, 3), dtype=bool))


_MOORE = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)]
_MOORE_INDEX = {off: i for i, off in enumerate(_MOORE)}


def trace_boundary(mask: np.ndarray) -> Boundary:
    """Clockwise Moore-neighbor trace of the largest 8-connected component.

    Starts at the component's top-left pixel and terminates on
    re-entering the start pixel from the original direction.
    """
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise EmptyMask("mask has no foreground")
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    biggest = int(sizes.argmax())
    if sizes[biggest] < 4:
        raise TooSmallComponent(f"largest component has area {sizes[biggest]} < 4")
    comp = labels == biggest

    h, w = comp.shape
    start_row, start_col = np.argwhere(comp)[0]  # row-major scan order
    start = (int(start_col), int(start_row))

    def is_fg(x, y):
        return 0 <= x < w and 0 <= y < h and comp[y, x]

    # the scan entered the start pixel from its west neighbor, which is
    # background because start is the first foreground pixel in scan order
    initial_backtrack = (start[0] - 1, start[1])
    points: list[tuple[int, int]] = []
    p = start
    b = initial_backtrack
    limit = 4 * int(comp.sum()) + 8
    while True:
        points.append(p)
        idx = _MOORE_INDEX[(b[0] - p[0], b[1] - p[1])]
        nxt = None
        for step in range(1, 9):
            off = _MOORE[(idx + step) % 8]
            cand = (p[0] + off[0], p[1] + off[1])
            if is_fg(*cand):
                nxt = cand
                break
            b = cand
        if nxt is None:
            break
        # stop on re-entering the start pixel from the original direction
        if nxt == start and b == initial_backtrack:
            break
        p = nxt
        if len(points) > limit:
            break
    return Boundary(np.array(points, dtype=float))


def fourier_descriptors(boundary: Boundary) -> ShapeDescriptor:
    """a(n) = (1/N) sum_k z(k) exp(-j 2 pi n k / N) with z = x + j y."""
    z = boundary.as_complex()
    return ShapeDescriptor(np.fft.fft(z) / len(z))


def reconstruct_boundary(descriptor: ShapeDescriptor, keep: int) -> np.ndarray:
    """Inverse transform keeping the `keep` lowest frequencies.

    Frequencies are kept symmetrically about zero (0, +1, -1, +2, ...).
    keep == N reproduces the boundary exactly.
    """
    n = descriptor.n_points
    if not 1 <= keep <= n:
        raise ValueError("keep must be in [1, N]")
    coeffs = np.zeros(n, dtype=np.complex128)
    freqs = sorted(range(n), key=lambda i: (abs(i if i <= n // 2 else i - n), (i if i <= n // 2 else i - n) < 0))
    for i in freqs[:keep]:
        coeffs[i] = descriptor.coefficients[i]
    z = np.fft.ifft(coeffs) * n
    return np.stack([z.real, z.imag], axis=-1)


def gist(frame: Frame) -> GistVector:
    """Coarse scene signature: gradient energy in 4 orientation bins
    over a 4x4 spatial grid, L1-normalized.

    A constant frame has no gradients and returns zeros flagged
    degenerate.
    """
    if frame.width < 16 or frame.height < 16:
        raise FrameTooSmall("gist needs at least a 16x16 frame")
    gy, gx = np.gradient(frame.data)
    energy = gx * gx + gy * gy
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    # nearest of 0, 45, 90, 135 degrees with wraparound
    bins = np.mod(np.rint(angle / (np.pi / 4.0)), 4).astype(int)

    values = np.zeros((4, 4, 4))
    row_edges = np.linspace(0, frame.height, 5).astype(int)
    col_edges = np.linspace(0, frame.width, 5).astype(int)
    for r in range(4):
        for c in range(4):
            cell = (slice(row_edges[r], row_edges[r + 1]), slice(col_edges[c], col_edges[c + 1]))
            for b in range(4):
                values[r, c, b] = energy[cell][bins[cell] == b].sum()
    flat = values.ravel()
    total = flat.sum()
    if total <= 0.0:
        return GistVector(np.zeros(64), degenerate=True)
    return GistVector(flat / total)


def new_object_hit(current: GistVector, reference: GistVector, theta: float) -> bool:
    """True when the scene signature moved more than theta from the reference."""
    if current.values.shape != reference.values.shape:
        raise DimensionMismatch("gist vectors differ in dimensionality")
    return float(np.linalg.norm(current.values - reference.values)) > theta


def update_reference(reference: GistVector, current: GistVector, lam: float = 0.05) -> GistVector:
    """Exponential moving average of the scene signature."""
    return GistVector((1.0 - lam) * reference.values + lam * current.values,
                      degenerate=reference.degenerate and current.degenerate)


# ---------------------------------------------------------------------------
# serialization

def write_descriptor_csv(path, descriptor: ShapeDescriptor) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["n", "re", "im"])
        for n, a in enumerate(descriptor.coefficients):
            writer.writerow([n, f"{a.real:.12g}", f"{a.imag:.12g}"])


def read_descriptor_csv(path) -> ShapeDescriptor:
    values = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            values.append(complex(float(row[1]), float(row[2])))
    return ShapeDescriptor(np.array(values))


def write_boundary_csv(path, boundary: Boundary) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["k", "x", "y"])
        for k, (x, y) in enumerate(boundary.points):
            writer.writerow([k, f"{x:.9g}", f"{y:.9g}"])
