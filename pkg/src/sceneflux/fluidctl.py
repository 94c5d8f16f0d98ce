"""2D SPH fluid with detail-preserving shape control.

Standard weakly compressible SPH: poly6 kernel for density, spiky
gradient for pressure, viscosity Laplacian for momentum diffusion,
symplectic Euler integration, damped boundary reflection. Shape control
splits each particle's velocity into a kernel-smoothed coarse part and
the fine remainder, applies attraction toward the target shape to the
coarse part only, and reassembles, leaving small-scale detail intact.
Image convention throughout: y grows downward, so gravity is +y.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from .errors import NumericalBlowup

log = logging.getLogger(__name__)


@dataclass
class FluidParams:
    """Reference-run constants; see configs/fluid_reference.cfg."""

    stiffness: float = 100.0       # equation of state p = k (rho - rho0)
    rest_density: float = 1.0
    viscosity: float = 8.0
    gravity: tuple[float, float] = (0.0, 9.8)
    dt: float = 0.005
    boundary_damping: float = 0.5


@dataclass
class FluidState:
    positions: np.ndarray        # (N, 2)
    velocities: np.ndarray       # (N, 2)
    mass: float                  # uniform per particle
    h: float                     # smoothing length
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    densities: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pressures: np.ndarray = field(default_factory=lambda: np.zeros(0))
    coarse: np.ndarray | None = None
    fine: np.ndarray | None = None
    last_dt: float | None = None

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def kinetic_energy(self) -> float:
        return float(0.5 * self.mass * (self.velocities ** 2).sum())

    def momentum(self) -> np.ndarray:
        return self.mass * self.velocities.sum(axis=0)


@dataclass
class ControlSet:
    """Attraction targets for the coarse velocity component."""

    targets: np.ndarray
    gain: float = 40.0
    influence_radius: float = np.inf
    damping: float | None = None   # defaults to critical, 2 sqrt(gain)

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 2)
        if len(self.targets) < 1:
            raise ValueError("control set needs at least one target")
        if self.gain < 0:
            raise ValueError("gain must be >= 0")
        if self.damping is None:
            self.damping = 2.0 * np.sqrt(self.gain)


@dataclass
class MoldResult:
    state: FluidState
    cross_section: np.ndarray    # (M, 2) closed outline polyline
    converged: bool
    steps: int


def init_fluid(n: int, bounds: tuple[float, float, float, float], h: float,
               params: FluidParams | None = None) -> FluidState:
    """Block of n particles at the top of the box, at rest.

    Lattice spacing is h/1.3; particle mass is rest_density * spacing^2.
    """
    if n < 1:
        raise ValueError("need at least one particle")
    if h <= 0:
        raise ValueError("smoothing length must be positive")
    params = params or FluidParams()
    xmin, ymin, xmax, ymax = bounds
    spacing = h / 1.3
    cols = max(1, min(int(np.ceil(np.sqrt(n))), int((xmax - xmin) / spacing) or 1))
    rows = int(np.ceil(n / cols))
    x0 = xmin + ((xmax - xmin) - (cols - 1) * spacing) / 2.0
    y0 = ymin + spacing
    positions = np.zeros((n, 2))
    for i in range(n):
        r, c = divmod(i, cols)
        positions[i] = (x0 + c * spacing, y0 + r * spacing)
    positions[:, 0] = np.clip(positions[:, 0], xmin, xmax)
    positions[:, 1] = np.clip(positions[:, 1], ymin, ymax)
    mass = params.rest_density * spacing * spacing
    return FluidState(positions, np.zeros((n, 2)), mass, float(h), tuple(map(float, bounds)))


# ---------------------------------------------------------------------------
# neighbor machinery

def _ragged(left: np.ndarray, right: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated aranges [left_i, right_i) with their source rows."""
    counts = right - left
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    rows = np.repeat(np.arange(len(left), dtype=np.intp), counts)
    starts = np.cumsum(counts) - counts
    offsets = np.arange(total, dtype=np.intp) - np.repeat(starts, counts)
    return rows, np.repeat(left, counts) + offsets


def neighbor_pairs(positions: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Unordered index pairs (i < j) with separation below radius."""
    n = positions.shape[0]
    if n < 2:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    cells = np.floor(positions / radius).astype(np.int64)
    cells -= cells.min(axis=0)
    stride = int(cells[:, 1].max()) + 2
    keys = cells[:, 0] * stride + cells[:, 1]
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]

    all_i, all_j = [], []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            target = keys + dx * stride + dy
            left = np.searchsorted(sorted_keys, target, side="left")
            right = np.searchsorted(sorted_keys, target, side="right")
            rows, idx = _ragged(left, right)
            if rows.size:
                all_i.append(rows)
                all_j.append(order[idx])
    i = np.concatenate(all_i)
    j = np.concatenate(all_j)
    keep = i < j
    i, j = i[keep], j[keep]
    d = positions[i] - positions[j]
    close = (d[:, 0] ** 2 + d[:, 1] ** 2) < radius * radius
    return i[close], j[close]


def _poly6(r2: np.ndarray, h: float) -> np.ndarray:
    c = 4.0 / (np.pi * h ** 8)
    return c * np.maximum(h * h - r2, 0.0) ** 3


def compute_densities(state: FluidState) -> FluidState:
    """Kernel-summed densities; every particle sees at least itself."""
    h = state.h
    rho = np.full(state.count, state.mass * _poly6(np.zeros(1), h)[0])
    i, j = neighbor_pairs(state.positions, h)
    if i.size:
        d = state.positions[i] - state.positions[j]
        w = _poly6(d[:, 0] ** 2 + d[:, 1] ** 2, h)
        np.add.at(rho, i, state.mass * w)
        np.add.at(rho, j, state.mass * w)
    state.densities = rho
    return state


def sph_step(state: FluidState, dt: float | None = None,
             gravity: tuple[float, float] | None = None,
             viscosity: float | None = None,
             params: FluidParams | None = None) -> FluidState:
    """One symplectic Euler step: density, pressure, forces, integration.

    dt above the CFL bound 0.4 h / max_speed is clamped with a warning.
    A non-finite result aborts the step without touching the state.
    """
    params = params or FluidParams()
    dt = params.dt if dt is None else float(dt)
    if dt <= 0:
        raise ValueError("dt must be positive")
    gravity = params.gravity if gravity is None else gravity
    viscosity = params.viscosity if viscosity is None else float(viscosity)

    compute_densities(state)
    state.pressures = params.stiffness * (state.densities - params.rest_density)

    h = state.h
    m = state.mass
    forces = np.zeros_like(state.positions)
    i, j = neighbor_pairs(state.positions, h)
    if i.size:
        delta = state.positions[i] - state.positions[j]
        r = np.sqrt(delta[:, 0] ** 2 + delta[:, 1] ** 2)
        r = np.maximum(r, 1e-9 * h)
        direction = delta / r[:, None]
        rho_i = state.densities[i]
        rho_j = state.densities[j]

        # spiky pressure gradient, symmetric scalar keeps Newton's third law;
        # negative pressures are clamped in the force to avoid spurious
        # cohesion at the free surface
        spiky = 30.0 / (np.pi * h ** 5) * (h - r) ** 2
        p_i = np.maximum(state.pressures[i], 0.0)
        p_j = np.maximum(state.pressures[j], 0.0)
        p_term = m * m * (p_i / rho_i ** 2 + p_j / rho_j ** 2)
        f_pressure = (p_term * spiky)[:, None] * direction

        # viscosity Laplacian
        lap = 40.0 / (np.pi * h ** 5) * (h - r)
        dv = state.velocities[j] - state.velocities[i]
        f_visc = (viscosity * m * m * lap / (rho_i * rho_j))[:, None] * dv

        pair_force = f_pressure + f_visc
        np.add.at(forces, i, pair_force)
        np.add.at(forces, j, -pair_force)

    speed = np.sqrt((state.velocities ** 2).sum(axis=1)).max() if state.count else 0.0
    if speed > 0 and dt > 0.4 * h / speed:
        log.warning("dt %.3g above CFL bound %.3g; clamping", dt, 0.4 * h / speed)
        dt = 0.4 * h / speed

    vel = state.velocities + dt * (forces / m + np.asarray(gravity))
    pos = state.positions + dt * vel

    # damped reflection at the box walls
    xmin, ymin, xmax, ymax = state.bounds
    damp = -params.boundary_damping
    for axis, lo, hi in ((0, xmin, xmax), (1, ymin, ymax)):
        below = pos[:, axis] < lo
        above = pos[:, axis] > hi
        pos[below, axis] = lo
        pos[above, axis] = hi
        vel[below | above, axis] *= damp

    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
        raise NumericalBlowup("non-finite positions or velocities; step aborted")
    state.positions = pos
    state.velocities = vel
    state.coarse = None
    state.fine = None
    state.last_dt = dt
    return state


def decompose_velocity(state: FluidState, smoothing_radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Kernel-weighted neighborhood average and its residual.

    coarse + fine reassembles the velocity exactly by construction.
    """
    if smoothing_radius < state.h:
        raise ValueError("smoothing radius must be >= h")
    w_self = _poly6(np.zeros(1), smoothing_radius)[0]
    num = state.velocities * w_self
    den = np.full(state.count, w_self)
    i, j = neighbor_pairs(state.positions, smoothing_radius)
    if i.size:
        d = state.positions[i] - state.positions[j]
        w = _poly6(d[:, 0] ** 2 + d[:, 1] ** 2, smoothing_radius)
        np.add.at(num, i, w[:, None] * state.velocities[j])
        np.add.at(num, j, w[:, None] * state.velocities[i])
        np.add.at(den, i, w)
        np.add.at(den, j, w)
    coarse = num / den[:, None]
    fine = state.velocities - coarse
    state.coarse = coarse
    state.fine = fine
    return coarse, fine


def apply_control(state: FluidState, control: ControlSet, dt: float | None = None) -> FluidState:
    """Pull the coarse velocity toward the nearest target; fine untouched.

    The control force is a critically damped spring on the coarse
    component, so a lone particle approaches its target monotonically.
    """
    if state.coarse is None or state.fine is None:
        raise ValueError("decompose_velocity must run before apply_control")
    dt = state.last_dt if dt is None else float(dt)
    if dt is None:
        raise ValueError("no dt available; pass one or step first")
    if control.gain == 0.0:
        return state
    tree = cKDTree(control.targets)
    dist, nearest = tree.query(state.positions)
    within = dist <= control.influence_radius
    force = np.zeros_like(state.velocities)
    force[within] = control.gain * (control.targets[nearest[within]] - state.positions[within])
    force[within] -= control.damping * state.coarse[within]
    coarse = state.coarse + dt * force
    state.velocities = coarse + state.fine
    state.coarse = coarse
    return state


# ---------------------------------------------------------------------------
# molding

def _outline(points: np.ndarray, alpha_radius: float) -> np.ndarray:
    """Alpha-shape boundary polyline: edges of triangles with small
    circumradius that belong to exactly one kept triangle."""
    if len(points) < 3:
        return points.copy()
    try:
        tri = Delaunay(points)
    except QhullError:
        return points.copy()
    a = points[tri.simplices[:, 0]]
    b = points[tri.simplices[:, 1]]
    c = points[tri.simplices[:, 2]]
    la = np.linalg.norm(b - c, axis=1)
    lb = np.linalg.norm(a - c, axis=1)
    lc = np.linalg.norm(a - b, axis=1)
    s = 0.5 * (la + lb + lc)
    area = np.sqrt(np.maximum(s * (s - la) * (s - lb) * (s - lc), 1e-300))
    circum_r = la * lb * lc / (4.0 * area)
    kept = tri.simplices[circum_r < alpha_radius]
    if len(kept) == 0:
        return points.copy()
    edge_count: dict[tuple[int, int], int] = {}
    for simplex in kept:
        for k in range(3):
            e = (min(simplex[k], simplex[(k + 1) % 3]), max(simplex[k], simplex[(k + 1) % 3]))
            edge_count[e] = edge_count.get(e, 0) + 1
    boundary = [e for e, n in edge_count.items() if n == 1]
    if not boundary:
        return points.copy()
    adj: dict[int, list[int]] = {}
    for p, q in boundary:
        adj.setdefault(p, []).append(q)
        adj.setdefault(q, []).append(p)

    # outer-face walk: start at an extreme vertex (guaranteed on the outer
    # loop) and always take the most clockwise available turn, so interior
    # crack loops sharing junction vertices are never entered
    start = min(adj, key=lambda v: (points[v, 1], points[v, 0]))
    incoming = np.pi / 2.0  # pretend we arrived moving straight up (-y)
    loop = [start]
    current = start
    prev = -1
    for _ in range(2 * len(boundary) + 4):
        best_turn = None
        nxt = None
        for cand in adj[current]:
            if len(adj[current]) > 1 and cand == prev:
                continue
            d = points[cand] - points[current]
            heading = np.arctan2(d[1], d[0])
            turn = (heading - incoming + np.pi) % (2.0 * np.pi)
            if best_turn is None or turn > best_turn:
                best_turn = turn
                nxt = cand
        if nxt is None:
            break
        if nxt == start:
            break
        d = points[nxt] - points[current]
        incoming = np.arctan2(d[1], d[0])
        loop.append(nxt)
        prev, current = current, nxt
    return points[loop]


def mold(state: FluidState, targets: np.ndarray, max_steps: int = 2000,
         params: FluidParams | None = None, gain: float = 40.0,
         smoothing_radius: float | None = None) -> MoldResult:
    """Drive the fluid onto the target shape with coarse-only control.

    Loops step, decompose, control until the mean nearest-target
    distance drops below h. Unreachable targets leave the converged flag
    down; the best state reached is still returned.
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    if len(targets) == 0:
        raise ValueError("mold needs at least one target")
    params = params or FluidParams()
    smoothing_radius = 2.0 * state.h if smoothing_radius is None else smoothing_radius
    control = ControlSet(targets, gain=gain)
    tree = cKDTree(targets)

    converged = False
    steps = 0
    for steps in range(1, max_steps + 1):
        sph_step(state, params=params, gravity=(0.0, 0.0))
        decompose_velocity(state, smoothing_radius)
        apply_control(state, control)
        if steps % 10 == 0 or steps == max_steps:
            mean_dist = float(tree.query(state.positions)[0].mean())
            if mean_dist < state.h:
                converged = True
                break
    outline = _outline(state.positions, 2.0 * state.h)
    return MoldResult(state, outline, converged, steps)


# ---------------------------------------------------------------------------
# serialization

def write_fluid_csv(path, state: FluidState) -> None:
    import csv as _csv

    with open(path, "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["id", "x", "y", "vx", "vy", "density"])
        dens = state.densities if state.densities.size == state.count else np.zeros(state.count)
        for idx in range(state.count):
            writer.writerow(
                [
                    idx,
                    f"{state.positions[idx, 0]:.9g}",
                    f"{state.positions[idx, 1]:.9g}",
                    f"{state.velocities[idx, 0]:.9g}",
                    f"{state.velocities[idx, 1]:.9g}",
                    f"{dens[idx]:.9g}",
                ]
            )


def write_polyline_csv(path, polyline: np.ndarray) -> None:
    import csv as _csv

    with open(path, "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["k", "x", "y"])
        for k, (x, y) in enumerate(np.asarray(polyline).reshape(-1, 2)):
            writer.writerow([k, f"{x:.9g}", f"{y:.9g}"])


def render_fluid_ppm(path, state: FluidState, size: int = 200) -> None:
    """Quick dot rendering of the particle set into a PPM raster."""
    from .netpbm import write_ppm

    xmin, ymin, xmax, ymax = state.bounds
    img = np.zeros((size, size, 3))
    img[..., 2] = 0.15
    sx = (size - 1) / max(xmax - xmin, 1e-9)
    sy = (size - 1) / max(ymax - ymin, 1e-9)
    cols = np.clip(np.rint((state.positions[:, 0] - xmin) * sx), 0, size - 1).astype(int)
    rows = np.clip(np.rint((state.positions[:, 1] - ymin) * sy), 0, size - 1).astype(int)
    img[rows, cols] = (0.3, 0.7, 1.0)
    write_ppm(path, img)
