"""Four-layer particle grid and its maintainability loop.

Layer 1 holds raw flow-advected positions, layer 2 coherent-region
labels, layer 3 per-group weights, layer 4 weighted neighbor-averaged
positions. The per-frame loop is propagate, link, optimize, prune, add:
particles follow the displacement field, get re-linked by triangulation,
are nudged to low-energy positions, die when their energy runs high
(drift or occlusion), and the gaps they leave are re-seeded from the
scale map.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage
from scipy.spatial import Delaunay, QhullError

from .errors import (
    DimensionMismatch,
    EmptyImage,
    TooFewParticles,
    UnlinkedParticle,
)
from .flowfield import FlowField, Frame, bilinear_sample
from .netpbm import write_ppm


class Direction(Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass
class Particle:
    """Read-only view of one particle across the four layers."""

    id: int
    position: tuple[float, float]
    smoothed_position: tuple[float, float]
    appearance: np.ndarray
    energy: float
    lcs_label: int
    weight: float
    alive: bool


@dataclass
class LayerStack:
    """Shared-id particle arrays for all four layers plus the link graph."""

    width: int
    height: int
    epsilon: float
    alpha: float = 1.0
    pos1: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    prev_pos1: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    pos4: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    appearance: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    energy: np.ndarray = field(default_factory=lambda: np.zeros(0))
    label: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    weight: np.ndarray = field(default_factory=lambda: np.ones(0))
    alive: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    links: list[set[int]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.pos1.shape[0]

    @property
    def alive_count(self) -> int:
        return int(self.alive.sum())

    @property
    def max_particles(self) -> int:
        return int(np.ceil(self.width / self.epsilon)) * int(np.ceil(self.height / self.epsilon)) * 2

    def alive_ids(self) -> np.ndarray:
        return np.flatnonzero(self.alive)

    def particle(self, i: int) -> Particle:
        return Particle(
            i,
            tuple(self.pos1[i]),
            tuple(self.pos4[i]),
            self.appearance[i].copy(),
            float(self.energy[i]),
            int(self.label[i]),
            float(self.weight[i]),
            bool(self.alive[i]),
        )

    def displacements(self) -> np.ndarray:
        return self.pos1 - self.prev_pos1

    def kill(self, ids) -> None:
        for i in np.atleast_1d(ids):
            i = int(i)
            self.alive[i] = False
            for j in self.links[i]:
                self.links[j].discard(i)
            self.links[i] = set()

    def append(self, position, appearance, label=0, weight=1.0) -> int:
        i = self.size
        self.pos1 = np.vstack([self.pos1, [position]])
        self.prev_pos1 = np.vstack([self.prev_pos1, [position]])
        self.pos4 = np.vstack([self.pos4, [position]])
        self.appearance = np.vstack([self.appearance, [np.atleast_1d(appearance)]])
        self.energy = np.append(self.energy, 0.0)
        self.label = np.append(self.label, int(label))
        self.weight = np.append(self.weight, float(weight))
        self.alive = np.append(self.alive, True)
        self.links.append(set())
        return i


def _grid_positions(width: int, height: int, epsilon: float) -> np.ndarray:
    n_x = max(1, int(width // epsilon))
    n_y = max(1, int(height // epsilon))
    off_x = (width - n_x * epsilon) / 2.0 + epsilon / 2.0
    off_y = (height - n_y * epsilon) / 2.0 + epsilon / 2.0
    xs = off_x + epsilon * np.arange(n_x)
    ys = off_y + epsilon * np.arange(n_y)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def _sample_appearance(frame: Frame, positions: np.ndarray) -> np.ndarray:
    vals = bilinear_sample(frame.data, positions[:, 0], positions[:, 1])
    return vals.reshape(-1, 1)


def init_layers(width: int, height: int, epsilon: float, frame: Frame | None = None) -> LayerStack:
    """Seed a regular particle grid at pitch epsilon.

    Appearance references are sampled from `frame` when provided and
    default to zero otherwise.
    """
    if width < 1 or height < 1:
        raise EmptyImage("frame has no pixels")
    if epsilon < 1:
        raise ValueError("epsilon must be >= 1")
    positions = _grid_positions(width, height, epsilon)
    n = positions.shape[0]
    stack = LayerStack(width, height, float(epsilon))
    stack.pos1 = positions.copy()
    stack.prev_pos1 = positions.copy()
    stack.pos4 = positions.copy()
    if frame is not None:
        if frame.data.shape != (height, width):
            raise DimensionMismatch("frame does not match stack dimensions")
        stack.appearance = _sample_appearance(frame, positions)
    else:
        stack.appearance = np.zeros((n, 1))
    stack.energy = np.zeros(n)
    stack.label = np.zeros(n, dtype=np.int64)
    stack.weight = np.ones(n)
    stack.alive = np.ones(n, dtype=bool)
    stack.links = [set() for _ in range(n)]
    return stack


def propagate(stack: LayerStack, flow_fwd: FlowField, flow_bwd: FlowField | None,
              direction: Direction = Direction.FORWARD) -> LayerStack:
    """Move layer-1 particles through the displacement field.

    Backward propagation swaps in the reverse field. Particles carried
    out of the frame are marked dead.
    """
    flow = flow_fwd if direction is Direction.FORWARD else flow_bwd
    if flow is None:
        raise ValueError("missing flow field for requested direction")
    if flow.shape != (stack.height, stack.width):
        raise DimensionMismatch("flow does not match stack dimensions")
    ids = stack.alive_ids()
    stack.prev_pos1 = stack.pos1.copy()
    if ids.size == 0:
        return stack
    px = stack.pos1[ids, 0]
    py = stack.pos1[ids, 1]
    stack.pos1[ids, 0] = px + bilinear_sample(flow.u, px, py)
    stack.pos1[ids, 1] = py + bilinear_sample(flow.v, px, py)
    out = (
        (stack.pos1[ids, 0] < 0.0)
        | (stack.pos1[ids, 0] > stack.width - 1)
        | (stack.pos1[ids, 1] < 0.0)
        | (stack.pos1[ids, 1] > stack.height - 1)
    )
    stack.kill(ids[out])
    return stack


def _chain_links(stack: LayerStack, ids: np.ndarray) -> None:
    order = ids[np.lexsort((stack.pos1[ids, 1], stack.pos1[ids, 0]))]
    for a, b in zip(order[:-1], order[1:]):
        stack.links[int(a)].add(int(b))
        stack.links[int(b)].add(int(a))


def link(stack: LayerStack, max_neighbors: int = 6) -> LayerStack:
    """Rebuild the neighbor graph from a Delaunay triangulation.

    Each particle ranks its Delaunay edges by length and an edge
    survives only if both endpoints rank it within max_neighbors, which
    keeps the graph symmetric with bounded degree. Collinear point sets
    fall back to nearest-neighbor chaining.
    """
    ids = stack.alive_ids()
    if ids.size < 2:
        raise TooFewParticles("linking needs at least 2 alive particles")
    for i in range(stack.size):
        stack.links[i] = set()
    points = stack.pos1[ids]
    if ids.size == 2:
        _chain_links(stack, ids)
        return stack
    try:
        tri = Delaunay(points)
    except QhullError:
        _chain_links(stack, ids)
        return stack

    edges: set[tuple[int, int]] = set()
    for simplex in tri.simplices:
        for a in range(3):
            p, q = simplex[a], simplex[(a + 1) % 3]
            edges.add((min(p, q), max(p, q)))

    neighbor_d: dict[int, list[tuple[float, int]]] = {int(i): [] for i in range(ids.size)}
    for p, q in edges:
        d = float(np.hypot(*(points[p] - points[q])))
        neighbor_d[p].append((d, q))
        neighbor_d[q].append((d, p))
    keep: dict[int, set[int]] = {}
    for p, lst in neighbor_d.items():
        lst.sort()
        keep[p] = {q for _, q in lst[:max_neighbors]}
    for p, q in edges:
        if q in keep[p] and p in keep[q]:
            a, b = int(ids[p]), int(ids[q])
            stack.links[a].add(b)
            stack.links[b].add(a)
    # a particle starved by the mutual-rank rule keeps its shortest edge
    for p in range(ids.size):
        a = int(ids[p])
        if not stack.links[a] and neighbor_d[p]:
            b = int(ids[neighbor_d[p][0][1]])
            stack.links[a].add(b)
            stack.links[b].add(a)
    return stack


def _data_energy(stack: LayerStack, i: int, frame: Frame, position=None) -> float:
    pos = stack.pos1[i] if position is None else np.asarray(position)
    value = bilinear_sample(frame.data, np.array([pos[0]]), np.array([pos[1]]))[0]
    diff = value - stack.appearance[i]
    return float(diff @ diff)


def _distortion_energy(stack: LayerStack, i: int, position=None) -> float:
    disp = stack.displacements()
    dp = (stack.pos1[i] if position is None else np.asarray(position)) - stack.prev_pos1[i]
    total = 0.0
    for j in stack.links[i]:
        delta = dp - disp[j]
        total += float(delta @ delta)
    return total


def particle_energy(stack: LayerStack, i: int, frame: Frame, alpha: float | None = None) -> float:
    """E(i) = appearance residual + alpha * relative-motion distortion."""
    if not stack.alive[i]:
        raise UnlinkedParticle(f"particle {i} is not alive")
    if not stack.links[i] and stack.alive_count > 1:
        raise UnlinkedParticle(f"particle {i} has no links")
    alpha = stack.alpha if alpha is None else alpha
    return _data_energy(stack, i, frame) + alpha * _distortion_energy(stack, i)


def total_energy(stack: LayerStack, frame: Frame, alpha: float | None = None) -> float:
    alpha = stack.alpha if alpha is None else alpha
    total = 0.0
    for i in stack.alive_ids():
        i = int(i)
        total += _data_energy(stack, i, frame) + alpha * _distortion_energy(stack, i)
    return total


_COARSE_STEPS = [(dx, dy) for dy in (-0.5, 0.0, 0.5) for dx in (-0.5, 0.0, 0.5)]
_FINE_STEPS = [(dx, dy) for dy in (-0.25, 0.0, 0.25) for dx in (-0.25, 0.0, 0.25)]


def optimize(stack: LayerStack, frame: Frame, alpha: float | None = None, iters: int = 1) -> LayerStack:
    """Coordinate-descent repositioning over a sub-pixel candidate set.

    A candidate move is taken only when it lowers both the particle's
    own energy and the stack total (the distortion term is shared with
    neighbors), so the total never increases.
    """
    alpha = stack.alpha if alpha is None else alpha
    ids = [int(i) for i in stack.alive_ids()]
    for _ in range(iters):
        for i in ids:
            if not stack.alive[i]:
                continue
            for steps in (_COARSE_STEPS, _FINE_STEPS):
                base = stack.pos1[i].copy()
                e_data0 = _data_energy(stack, i, frame)
                e_dist0 = _distortion_energy(stack, i)
                best = None
                for dx, dy in steps:
                    if dx == 0.0 and dy == 0.0:
                        continue
                    cand = np.array(
                        [
                            min(max(base[0] + dx, 0.0), stack.width - 1.0),
                            min(max(base[1] + dy, 0.0), stack.height - 1.0),
                        ]
                    )
                    d_data = _data_energy(stack, i, frame, cand) - e_data0
                    d_dist = _distortion_energy(stack, i, cand) - e_dist0
                    own = d_data + alpha * d_dist
                    total = d_data + 2.0 * alpha * d_dist
                    if own < 0.0 and total < 0.0:
                        if best is None or own < best[0]:
                            best = (own, cand)
                if best is not None:
                    stack.pos1[i] = best[1]
    for i in ids:
        if stack.alive[i]:
            stack.energy[i] = _data_energy(stack, i, frame) + alpha * _distortion_energy(stack, i)
    return stack


def refresh_energies(stack: LayerStack, frame: Frame, alpha: float | None = None) -> LayerStack:
    alpha = stack.alpha if alpha is None else alpha
    for i in stack.alive_ids():
        i = int(i)
        stack.energy[i] = _data_energy(stack, i, frame) + alpha * _distortion_energy(stack, i)
    return stack


def prune(stack: LayerStack, energy_quantile: float = 0.98) -> LayerStack:
    """Kill particles whose energy lies strictly above the quantile cutoff."""
    ids = stack.alive_ids()
    if ids.size == 0:
        return stack
    cutoff = float(np.quantile(stack.energy[ids], energy_quantile))
    stack.kill(ids[stack.energy[ids] > cutoff])
    return stack


def scale_map(stack: LayerStack) -> np.ndarray:
    """Per-pixel distance to the nearest alive particle."""
    occupied = np.ones((stack.height, stack.width), dtype=bool)
    ids = stack.alive_ids()
    if ids.size == 0:
        return np.full((stack.height, stack.width), np.inf)
    cols = np.clip(np.rint(stack.pos1[ids, 0]), 0, stack.width - 1).astype(int)
    rows = np.clip(np.rint(stack.pos1[ids, 1]), 0, stack.height - 1).astype(int)
    occupied[rows, cols] = False
    return ndimage.distance_transform_edt(occupied)


def add_particles(stack: LayerStack, frame: Frame) -> LayerStack:
    """Fill coverage gaps: spawn at scale-map maxima above 1.5 epsilon.

    New particles sample appearance from the current frame and inherit
    label and weight from their nearest alive neighbor. An empty stack
    re-seeds the full grid.
    """
    if stack.alive_count == 0:
        fresh = init_layers(stack.width, stack.height, stack.epsilon, frame)
        fresh.alpha = stack.alpha
        return fresh
    threshold = 1.5 * stack.epsilon
    dist = scale_map(stack)
    ys, xs = np.mgrid[0 : stack.height, 0 : stack.width]
    while stack.alive_count < stack.max_particles:
        flat = int(np.argmax(dist))
        if dist.ravel()[flat] <= threshold:
            break
        row, col = np.unravel_index(flat, dist.shape)
        position = np.array([float(col), float(row)])
        ids = stack.alive_ids()
        nearest = int(ids[np.argmin(np.hypot(*(stack.pos1[ids] - position).T))])
        appearance = bilinear_sample(frame.data, position[:1], position[1:])[0]
        stack.append(position, [appearance], stack.label[nearest], stack.weight[nearest])
        dist = np.minimum(dist, np.hypot(xs - position[0], ys - position[1]))
    return stack


def assign_weights(stack: LayerStack, field) -> LayerStack:
    """Layer-2 labels from the region field; layer-3 weights per group.

    Particles in the same coherent group share weight 1/group_size, so
    each group's weights sum to one.
    """
    ids = stack.alive_ids()
    if ids.size == 0:
        return stack
    labels = field.label_at(stack.pos1[ids, 0], stack.pos1[ids, 1])
    stack.label[ids] = labels
    uniq, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    stack.weight[ids] = 1.0 / counts[inverse]
    return stack


def layer4_update(stack: LayerStack) -> LayerStack:
    """Move layer 4 by the weight-averaged layer-1 motion of the neighborhood."""
    disp = stack.displacements()
    ids = [int(i) for i in stack.alive_ids()]
    multi = len(ids) > 1
    smoothed = np.zeros((stack.size, 2))
    for i in ids:
        if not stack.links[i] and multi:
            raise UnlinkedParticle(f"particle {i} has no links")
        members = [i] + sorted(stack.links[i])
        w = stack.weight[members]
        smoothed[i] = (w[:, None] * disp[members]).sum(axis=0) / w.sum()
    for i in ids:
        stack.pos4[i] = stack.pos4[i] + smoothed[i]
    return stack


def update_appearance(stack: LayerStack, frame: Frame, lam: float = 0.1) -> LayerStack:
    """Exponential moving average of appearance references; slow drift only."""
    ids = stack.alive_ids()
    if ids.size == 0:
        return stack
    sampled = _sample_appearance(frame, stack.pos1[ids])
    stack.appearance[ids] = (1.0 - lam) * stack.appearance[ids] + lam * sampled
    return stack


# ---------------------------------------------------------------------------
# snapshots

def write_particles_csv(path, stack: LayerStack) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "x", "y", "energy", "label", "weight", "alive"])
        for i in range(stack.size):
            writer.writerow(
                [
                    i,
                    f"{stack.pos1[i, 0]:.9g}",
                    f"{stack.pos1[i, 1]:.9g}",
                    f"{stack.energy[i]:.9g}",
                    int(stack.label[i]),
                    f"{stack.weight[i]:.9g}",
                    int(stack.alive[i]),
                ]
            )


def write_links_csv(path, stack: LayerStack) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id_a", "id_b"])
        for i in range(stack.size):
            for j in sorted(stack.links[i]):
                if i < j:
                    writer.writerow([i, j])


def overlay_ppm(path, stack: LayerStack, frame: Frame) -> None:
    """Frame rendered to RGB with alive particles marked by group color."""
    rgb = np.repeat(frame.data[..., None], 3, axis=2)
    palette = np.array(
        [[0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.4, 0.9], [0.9, 0.9, 0.2],
         [0.9, 0.2, 0.9], [0.2, 0.9, 0.9]]
    )
    ids = stack.alive_ids()
    cols = np.clip(np.rint(stack.pos1[ids, 0]), 0, stack.width - 1).astype(int)
    rows = np.clip(np.rint(stack.pos1[ids, 1]), 0, stack.height - 1).astype(int)
    rgb[rows, cols] = palette[stack.label[ids] % len(palette)]
    write_ppm(path, rgb)
