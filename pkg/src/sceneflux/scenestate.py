"""Scene-level state: depth ingestion, layer freezing, background changes.

Depth arrives from files (any external monocular source can produce
them); freezing lifts the smoothed particle layer by per-particle depth
into an immutable volume for the fluid stage; the ego trace's lateral
drift, accumulated over a sliding window, signals whole-background
changes that register new scenes.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .egomotion import EgoTrace
from .errors import DuplicateScene, EmptyStack, NonPositiveDepth, ParseError
from .flowfield import bilinear_sample
from .netpbm import read_pgm_raw, write_pgm_raw
from .particlegrid import LayerStack


@dataclass
class DepthMap:
    """Per-pixel distance from the reference plane, strictly positive."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("depth map must be 2-D")
        if not np.all(np.isfinite(self.values)) or np.any(self.values <= 0.0):
            raise NonPositiveDepth("depth must be strictly positive and finite")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def sample(self, x, y) -> np.ndarray:
        return bilinear_sample(self.values, np.asarray(x, dtype=float), np.asarray(y, dtype=float))


# reference plane: image plane of frame 0 at depth 0, normal +z
REFERENCE_PLANE = {"origin": (0.0, 0.0, 0.0), "normal": (0.0, 0.0, 1.0)}


@dataclass(frozen=True)
class FrozenVolume:
    """Immutable snapshot of the smoothed layer lifted by depth."""

    positions: np.ndarray   # (N, 2) layer-4 positions
    depth: np.ndarray       # (N,)
    weights: np.ndarray
    labels: np.ndarray
    frame_index: int

    def __post_init__(self):
        for name in ("positions", "depth", "weights", "labels"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.depth)


@dataclass
class BackgroundEvent:
    frame: int
    direction: float          # signed lateral displacement over the window
    new_scene_frame: int


def sidecar_path(path) -> str:
    return str(path) + ".range"


def load_depth(path) -> DepthMap:
    """16-bit PGM samples mapped linearly through the `min=.. max=..` sidecar."""
    samples, maxval = read_pgm_raw(path)
    meta = {}
    try:
        with open(sidecar_path(path)) as f:
            for line in f:
                key, _, value = line.partition("=")
                meta[key.strip()] = float(value)
    except FileNotFoundError as exc:
        raise ParseError(f"missing depth sidecar {sidecar_path(path)}") from exc
    except ValueError as exc:
        raise ParseError(f"bad depth sidecar {sidecar_path(path)}") from exc
    if "min" not in meta or "max" not in meta:
        raise ParseError(f"{sidecar_path(path)}: needs min= and max= lines")
    lo, hi = meta["min"], meta["max"]
    if lo <= 0.0:
        raise NonPositiveDepth(f"sidecar min {lo} must be > 0")
    values = lo + samples.astype(np.float64) / maxval * (hi - lo)
    return DepthMap(values)


def write_depth(path, depth: DepthMap) -> None:
    lo = float(depth.values.min())
    hi = float(depth.values.max())
    span = hi - lo if hi > lo else 1.0
    samples = np.rint((depth.values - lo) / span * 65535).astype(np.int64)
    write_pgm_raw(path, samples, 65535)
    with open(sidecar_path(path), "w") as f:
        f.write(f"min={lo:.12g}\nmax={hi:.12g}\n")


def freeze(stack: LayerStack, depth: DepthMap, frame_idx: int) -> FrozenVolume:
    """Snapshot layer 4 with depth sampled at each particle position."""
    ids = stack.alive_ids()
    if ids.size == 0:
        raise EmptyStack("cannot freeze an empty stack")
    positions = stack.pos4[ids].copy()
    xs = np.clip(positions[:, 0], 0, depth.width - 1)
    ys = np.clip(positions[:, 1], 0, depth.height - 1)
    return FrozenVolume(
        positions=positions,
        depth=depth.sample(xs, ys),
        weights=stack.weight[ids].copy(),
        labels=stack.label[ids].copy(),
        frame_index=int(frame_idx),
    )


def detect_background_change(
    trace: EgoTrace, threshold: float = 0.5, window: int = 10
) -> BackgroundEvent | None:
    """First frame where windowed lateral drift exceeds the threshold.

    Jitter that cancels within the window never fires; sustained lateral
    motion fires at the first crossing.
    """
    if len(trace) == 0:
        raise ValueError("trace is empty")
    lateral = np.array([float(est.T[0]) for est in trace.estimates])
    for i in range(len(lateral)):
        lo = max(0, i - window + 1)
        s = float(lateral[lo : i + 1].sum())
        if abs(s) > threshold:
            return BackgroundEvent(trace.frames[i], s, trace.frames[i])
    return None


@dataclass
class SceneRecord:
    scene_id: int
    offset: float             # lateral offset along the reference plane
    source_frame: int
    depth_path: str = ""


@dataclass
class SceneRegistry:
    """Poses of all registered scenes; holds no pixels."""

    scenes: list[SceneRecord] = field(default_factory=list)

    def __post_init__(self):
        if not self.scenes:
            self.scenes.append(SceneRecord(0, 0.0, 0))

    def __len__(self) -> int:
        return len(self.scenes)


def relocate_scene(event: BackgroundEvent, new_depth: DepthMap | None,
                   registry: SceneRegistry, depth_path: str = "") -> SceneRegistry:
    """Register a new scene at the event's lateral offset."""
    if any(s.source_frame == event.new_scene_frame and s.scene_id != 0 for s in registry.scenes):
        raise DuplicateScene(f"frame {event.new_scene_frame} already registered")
    base = registry.scenes[-1].offset
    registry.scenes.append(
        SceneRecord(len(registry.scenes), base + event.direction, event.new_scene_frame, depth_path)
    )
    return registry


# ---------------------------------------------------------------------------
# serialization

def write_volume_csv(path, volume: FrozenVolume) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# frame={volume.frame_index}\n")
        ox, oy, oz = REFERENCE_PLANE["origin"]
        nx, ny, nz = REFERENCE_PLANE["normal"]
        f.write(f"# plane_origin={ox:.9g} {oy:.9g} {oz:.9g}\n")
        f.write(f"# plane_normal={nx:.9g} {ny:.9g} {nz:.9g}\n")
        writer = csv.writer(f)
        writer.writerow(["id", "x", "y", "depth", "weight", "label"])
        for i in range(len(volume)):
            writer.writerow(
                [
                    i,
                    f"{volume.positions[i, 0]:.9g}",
                    f"{volume.positions[i, 1]:.9g}",
                    f"{volume.depth[i]:.9g}",
                    f"{volume.weights[i]:.9g}",
                    int(volume.labels[i]),
                ]
            )


def read_volume_csv(path) -> FrozenVolume:
    frame_idx = 0
    rows = []
    with open(path, newline="") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# frame="):
                    frame_idx = int(line.split("=", 1)[1])
                continue
            rows.append(line)
    reader = csv.reader(rows)
    header = next(reader)
    if header[0] != "id":
        raise ParseError(f"{path}: bad volume header")
    pos, dep, wts, labs = [], [], [], []
    for row in reader:
        pos.append((float(row[1]), float(row[2])))
        dep.append(float(row[3]))
        wts.append(float(row[4]))
        labs.append(int(row[5]))
    return FrozenVolume(
        np.array(pos), np.array(dep), np.array(wts), np.array(labs, dtype=np.int64), frame_idx
    )


def write_registry(path, registry: SceneRegistry) -> None:
    with open(path, "w") as f:
        f.write("scene_id offset source_frame depth_path\n")
        for s in registry.scenes:
            f.write(f"{s.scene_id} {s.offset:.9g} {s.source_frame} {s.depth_path or '-'}\n")
