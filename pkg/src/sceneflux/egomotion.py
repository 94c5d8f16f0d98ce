"""Rig motion: instantaneous flow synthesis, classification, and recovery.

A point at r seen from a rig moving with translation T and angular
velocity w has apparent velocity V = -T - w x r. Each rig camera k at
offset s_k with orientation m_k sees its own (t_k, w_k); projecting
through the pinhole model gives the classic instantaneous flow equations
in normalized image coordinates:

    u = (-t_x + x t_z)/Z + x y w_x - (1 + x^2) w_y + y w_z
    v = (-t_y + y t_z)/Z + (1 + y^2) w_x - x y w_y - x w_z

Recovery runs a polar-correlation seed over opposing camera pairs, then
damped least squares over every pixel of every camera.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    DegenerateFlow,
    DimensionMismatch,
    NonPositiveDepth,
    ParseError,
    SolverDiverged,
    TooFewCameras,
)
from .flowfield import FlowField


@dataclass
class MotionEstimate:
    """Recovered rig motion: T in scene units/frame, omega in rad/frame."""

    T: np.ndarray
    omega: np.ndarray
    scale_known: bool = True

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)
        self.omega = np.asarray(self.omega, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.T)) and np.all(np.isfinite(self.omega))):
            raise ValueError("motion components must be finite")


@dataclass
class RigCamera:
    s: np.ndarray              # offset from rig origin, scene units
    m: np.ndarray              # rig-to-camera rotation, rows are camera axes
    focal: float = 32.0        # pixels
    width: int = 32
    height: int = 32

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64).reshape(3)
        self.m = np.asarray(self.m, dtype=np.float64).reshape(3, 3)
        if np.abs(self.m @ self.m.T - np.eye(3)).max() > 1e-9:
            raise ValueError("camera orientation must be orthonormal to 1e-9")


@dataclass
class RigConfig:
    cameras: list[RigCamera]
    opposing_pairs: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.cameras) < 2:
            raise TooFewCameras("rig needs at least 2 cameras")
        if not self.opposing_pairs:
            n = len(self.cameras)
            self.opposing_pairs = [(i, i + 1) for i in range(0, n - 1, 2)]


def default_rig(focal: float = 32.0, size: int = 32, offset: float = 1.0) -> RigConfig:
    """Four upright cameras facing +x, -x, +y, -y at unit offsets.

    Camera frames use the (right, down, forward) convention with every
    camera's down axis along -z (the rig mast points up along +z).
    """
    def cam(x_axis, z_axis, s):
        m = np.array([x_axis, [0.0, 0.0, -1.0], z_axis])
        return RigCamera(np.array(s, dtype=float) * offset, m, focal, size, size)

    cameras = [
        cam([0, -1, 0], [1, 0, 0], [1, 0, 0]),
        cam([0, 1, 0], [-1, 0, 0], [-1, 0, 0]),
        cam([1, 0, 0], [0, 1, 0], [0, 1, 0]),
        cam([-1, 0, 0], [0, -1, 0], [0, -1, 0]),
    ]
    return RigConfig(cameras, [(0, 1), (2, 3)])


def velocity_of_point(r, T, omega) -> np.ndarray:
    """Apparent velocity of a scene point: V = -T - omega x r."""
    r = np.asarray(r, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    return -T - np.cross(omega, r)


def camera_motion(rig: RigConfig, k: int, T, omega) -> tuple[np.ndarray, np.ndarray]:
    """Rig motion expressed in camera k's frame."""
    if not 0 <= k < len(rig.cameras):
        raise IndexError(f"camera index {k} out of range")
    cam = rig.cameras[k]
    T = np.asarray(T, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    t_k = cam.m @ (np.cross(omega, cam.s) + T)
    omega_k = cam.m @ omega
    return t_k, omega_k


def _normalized_grid(cam: RigCamera) -> tuple[np.ndarray, np.ndarray]:
    cx = (cam.width - 1) / 2.0
    cy = (cam.height - 1) / 2.0
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width].astype(np.float64)
    return (xs - cx) / cam.focal, (ys - cy) / cam.focal


def synthesize_flow(rig: RigConfig, k: int, T, omega, depth: np.ndarray) -> FlowField:
    """Per-pixel flow predicted by the instantaneous model for camera k.

    `depth` holds strictly positive camera-local Z per pixel. Output is
    in pixel units.
    """
    cam = rig.cameras[k] if 0 <= k < len(rig.cameras) else None
    if cam is None:
        raise IndexError(f"camera index {k} out of range")
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (cam.height, cam.width):
        raise DimensionMismatch("depth map does not match camera dimensions")
    if np.any(depth <= 0.0) or not np.all(np.isfinite(depth)):
        raise NonPositiveDepth("depth must be strictly positive and finite")

    t_k, w_k = camera_motion(rig, k, T, omega)
    x, y = _normalized_grid(cam)
    u = (-t_k[0] + x * t_k[2]) / depth + x * y * w_k[0] - (1.0 + x * x) * w_k[1] + y * w_k[2]
    v = (-t_k[1] + y * t_k[2]) / depth + (1.0 + y * y) * w_k[0] - x * y * w_k[1] - x * w_k[2]
    return FlowField(cam.focal * u, cam.focal * v)


class MotionClass(Enum):
    TRANSLATIONAL = "translational"
    ROTATIONAL = "rotational"
    MIXED = "mixed"


def classify_motion(flow_a: FlowField, flow_b: FlowField, eps: float = 1e-9) -> MotionClass:
    """Translation/rotation call for an opposing camera pair.

    Lateral rig translation reads opposite in the two image frames;
    rotation about the mast reads the same way in both.
    """
    if flow_a.shape != flow_b.shape:
        raise DimensionMismatch("flows must share dimensions")
    mu_a = np.array([flow_a.u.mean(), flow_a.v.mean()])
    mu_b = np.array([flow_b.u.mean(), flow_b.v.mean()])
    na, nb = np.linalg.norm(mu_a), np.linalg.norm(mu_b)
    if na < eps and nb < eps:
        raise DegenerateFlow("both mean flows below threshold")
    if na < eps or nb < eps:
        return MotionClass.MIXED
    cos_ab = float(mu_a @ mu_b) / (na * nb)
    ratio = na / nb
    similar = 0.8 <= ratio <= 1.25
    if -cos_ab > 0.9 and similar:
        return MotionClass.TRANSLATIONAL
    if cos_ab > 0.9 and similar:
        return MotionClass.ROTATIONAL
    return MotionClass.MIXED


# ---------------------------------------------------------------------------
# estimation

_BASIS = np.eye(6)


def _basis_flows(rig: RigConfig, depths: list[np.ndarray]) -> list[list[FlowField]]:
    """Flow response of every camera to each unit motion component."""
    out = []
    for k in range(len(rig.cameras)):
        per_cam = []
        for i in range(6):
            T = _BASIS[i, :3]
            w = _BASIS[i, 3:]
            per_cam.append(synthesize_flow(rig, k, T, w, depths[k]))
        out.append(per_cam)
    return out


def _polar_seed(flows, rig, basis) -> np.ndarray:
    """Initial (T, w) from sums and differences of opposing-pair mean flows.

    The sum cancels the anti-symmetric (translational) part, the
    difference cancels the common (rotational) part; both are linear in
    the motion parameters, so a small least-squares solve recovers a seed.
    """
    if not rig.opposing_pairs:
        return np.zeros(6)
    rows, obs = [], []
    for a, b in rig.opposing_pairs:
        mu_a = np.array([flows[a].u.mean(), flows[a].v.mean()])
        mu_b = np.array([flows[b].u.mean(), flows[b].v.mean()])
        obs.extend(0.5 * (mu_a + mu_b))
        obs.extend(0.5 * (mu_a - mu_b))
        cols = []
        for i in range(6):
            ba = np.array([basis[a][i].u.mean(), basis[a][i].v.mean()])
            bb = np.array([basis[b][i].u.mean(), basis[b][i].v.mean()])
            cols.append(np.concatenate([0.5 * (ba + bb), 0.5 * (ba - bb)]))
        rows.append(np.stack(cols, axis=1))
    A = np.vstack(rows)
    y = np.asarray(obs)
    seed, *_ = np.linalg.lstsq(A, y, rcond=None)
    return seed


def estimate_egomotion(
    flows: list[FlowField],
    rig: RigConfig,
    depths: list[np.ndarray] | None = None,
    max_iters: int = 50,
) -> MotionEstimate:
    """Recover rig (T, omega) from one observed flow field per camera.

    Without depth maps the translation magnitude is unobservable; depth
    is taken as 1 everywhere and the returned T is direction only.
    """
    if len(rig.cameras) < 2:
        raise TooFewCameras("need at least 2 cameras")
    if len(flows) != len(rig.cameras):
        raise TooFewCameras(f"expected {len(rig.cameras)} flows, got {len(flows)}")
    for k, flow in enumerate(flows):
        cam = rig.cameras[k]
        if flow.shape != (cam.height, cam.width):
            raise DimensionMismatch(f"flow {k} does not match camera dimensions")

    scale_known = depths is not None
    if depths is None:
        depths = [np.ones((c.height, c.width)) for c in rig.cameras]

    basis = _basis_flows(rig, depths)
    observed = np.concatenate([np.stack([f.u, f.v]).ravel() for f in flows])
    J = np.stack(
        [
            np.concatenate([np.stack([basis[k][i].u, basis[k][i].v]).ravel() for k in range(len(flows))])
            for i in range(6)
        ],
        axis=1,
    )

    theta = _polar_seed(flows, rig, basis)
    residual = lambda th: observed - J @ th

    r = residual(theta)
    cost = float(r @ r)
    lam = 1e-3
    JtJ = J.T @ J
    scale = max(float(np.trace(JtJ)) / 6.0, 1e-30)
    converged = False
    for _ in range(max_iters):
        g = J.T @ r
        if np.linalg.norm(g) < 1e-12 * max(1.0, np.sqrt(cost)):
            break
        rejected = 0
        while True:
            delta = np.linalg.solve(JtJ + lam * scale * np.eye(6), g)
            if np.linalg.norm(delta) < 1e-12 * (1.0 + np.linalg.norm(theta)):
                converged = True
                break
            trial = theta + delta
            r_trial = residual(trial)
            cost_trial = float(r_trial @ r_trial)
            if cost_trial <= cost * (1.0 + 1e-12):
                improved = cost - cost_trial > 1e-12 * cost
                theta, r, cost = trial, r_trial, cost_trial
                lam = max(lam / 10.0, 1e-12)
                converged = not improved
                break
            lam *= 10.0
            rejected += 1
            if rejected >= 5:
                raise SolverDiverged("residual increased 5 consecutive iterations")
        if converged:
            break

    T, omega = theta[:3].copy(), theta[3:].copy()
    if not scale_known:
        norm = np.linalg.norm(T)
        if norm > 1e-12:
            T /= norm
    return MotionEstimate(T, omega, scale_known=scale_known)


# ---------------------------------------------------------------------------
# ego trace

@dataclass
class EgoTrace:
    """Per-frame motion estimates plus accumulated heading drift.

    Drift samples: x = accumulated lateral (rig x) translation,
    y = accumulated forward (rig y) translation.
    """

    frames: list[int] = field(default_factory=list)
    estimates: list[MotionEstimate] = field(default_factory=list)
    drift: list[tuple[float, float]] = field(default_factory=list)

    def append(self, frame: int, estimate: MotionEstimate) -> None:
        if self.frames and frame <= self.frames[-1]:
            raise ValueError("frame indices must increase monotonically")
        px, py = self.drift[-1] if self.drift else (0.0, 0.0)
        self.frames.append(frame)
        self.estimates.append(estimate)
        self.drift.append((px + float(estimate.T[0]), py + float(estimate.T[1])))

    def __len__(self) -> int:
        return len(self.frames)


def write_trace_csv(path, trace: EgoTrace) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "Tx", "Ty", "Tz", "wx", "wy", "wz", "scale_known"])
        for frame, est in zip(trace.frames, trace.estimates):
            writer.writerow(
                [frame]
                + [f"{x:.12g}" for x in est.T]
                + [f"{x:.12g}" for x in est.omega]
                + [int(est.scale_known)]
            )


def read_trace_csv(path) -> EgoTrace:
    trace = EgoTrace()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[0] != "frame":
            raise ParseError(f"{path}: bad trace header")
        for row in reader:
            frame = int(row[0])
            vals = [float(x) for x in row[1:7]]
            trace.append(frame, MotionEstimate(vals[:3], vals[3:], bool(int(row[7]))))
    return trace


# ---------------------------------------------------------------------------
# rig config file

def load_rig(path) -> RigConfig:
    """Parse `camera.N.key = value` lines into a rig configuration."""
    entries: dict[int, dict[str, list[float]]] = {}
    pairs: list[tuple[int, int]] = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                nums = [float(x) for x in value.split()]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad numeric value") from exc
            if key == "pairs":
                ints = [int(x) for x in nums]
                pairs = list(zip(ints[0::2], ints[1::2]))
                continue
            parts = key.split(".")
            if len(parts) != 3 or parts[0] != "camera":
                raise ParseError(f"{path}:{lineno}: unknown key {key!r}")
            entries.setdefault(int(parts[1]), {})[parts[2]] = nums

    cameras = []
    for idx in sorted(entries):
        e = entries[idx]
        if "s" not in e or "m" not in e or "focal" not in e:
            raise ParseError(f"{path}: camera {idx} missing s, m, or focal")
        width, height = (int(x) for x in e.get("size", [32, 32]))
        cameras.append(
            RigCamera(np.array(e["s"]), np.array(e["m"]).reshape(3, 3), e["focal"][0], width, height)
        )
    return RigConfig(cameras, pairs)


def write_rig(path, rig: RigConfig) -> None:
    with open(path, "w") as f:
        for i, cam in enumerate(rig.cameras):
            f.write(f"camera.{i}.s = {' '.join(f'{x:.12g}' for x in cam.s)}\n")
            f.write(f"camera.{i}.m = {' '.join(f'{x:.12g}' for x in cam.m.ravel())}\n")
            f.write(f"camera.{i}.focal = {cam.focal:.12g}\n")
            f.write(f"camera.{i}.size = {cam.width} {cam.height}\n")
        if rig.opposing_pairs:
            flat = " ".join(f"{a} {b}" for a, b in rig.opposing_pairs)
            f.write(f"pairs = {flat}\n")
