import numpy as np
import pytest

from sceneflux.egomotion import (
    EgoTrace,
    MotionClass,
    MotionEstimate,
    RigCamera,
    RigConfig,
    camera_motion,
    classify_motion,
    default_rig,
    estimate_egomotion,
    load_rig,
    read_trace_csv,
    synthesize_flow,
    velocity_of_point,
    write_rig,
    write_trace_csv,
)
from sceneflux.errors import (
    DegenerateFlow,
    DimensionMismatch,
    NonPositiveDepth,
    SolverDiverged,
    TooFewCameras,
)
from sceneflux.flowfield import FlowField


@pytest.fixture
def rig():
    return default_rig()


@pytest.fixture
def depths(rig):
    return [np.full((c.height, c.width), 4.0) for c in rig.cameras]


class TestVelocityOfPoint:
    def test_zero_motion(self, rng):
        assert np.allclose(velocity_of_point(rng.normal(size=3), np.zeros(3), np.zeros(3)), 0.0)

    def test_pure_translation(self, rng):
        for _ in range(5):
            r = rng.normal(size=3)
            assert np.allclose(velocity_of_point(r, [1, 0, 0], [0, 0, 0]), [-1, 0, 0])

    def test_rotation_cross_product(self):
        # w = z_hat, r = x_hat: V = -(z x x) = -y_hat
        v = velocity_of_point([1, 0, 0], [0, 0, 0], [0, 0, 1])
        assert np.allclose(v, [0, -1, 0])

    def test_linearity_in_motion(self, rng):
        r = rng.normal(size=3)
        for _ in range(10):
            T1, w1 = rng.normal(size=3), rng.normal(size=3)
            T2, w2 = rng.normal(size=3), rng.normal(size=3)
            a, b = rng.normal(), rng.normal()
            lhs = velocity_of_point(r, a * T1 + b * T2, a * w1 + b * w2)
            rhs = a * velocity_of_point(r, T1, w1) + b * velocity_of_point(r, T2, w2)
            assert np.abs(lhs - rhs).max() < 1e-12


class TestCameraMotion:
    def test_identity_camera_at_origin(self, rng):
        rig = RigConfig([RigCamera(np.zeros(3), np.eye(3)), RigCamera(np.zeros(3), np.eye(3))])
        T, w = rng.normal(size=3), rng.normal(size=3)
        t_k, w_k = camera_motion(rig, 0, T, w)
        assert np.allclose(t_k, T) and np.allclose(w_k, w)

    def test_zero_rotation_drops_offset(self, rng):
        rig = RigConfig([RigCamera([3, -1, 2], np.eye(3)), RigCamera(np.zeros(3), np.eye(3))])
        T = rng.normal(size=3)
        t_k, _ = camera_motion(rig, 0, T, np.zeros(3))
        assert np.allclose(t_k, T)

    def test_offset_camera_cross_term(self):
        # w = y_hat, s = z_hat: t = y x z = x_hat
        rig = RigConfig([RigCamera([0, 0, 1], np.eye(3)), RigCamera(np.zeros(3), np.eye(3))])
        t_k, w_k = camera_motion(rig, 0, np.zeros(3), [0, 1, 0])
        assert np.allclose(t_k, [1, 0, 0])
        assert np.allclose(w_k, [0, 1, 0])

    def test_index_out_of_range(self, rig):
        with pytest.raises(IndexError):
            camera_motion(rig, 9, np.zeros(3), np.zeros(3))


class TestSynthesizeFlow:
    def test_zero_motion_zero_field(self, rig, depths):
        flow = synthesize_flow(rig, 0, np.zeros(3), np.zeros(3), depths[0])
        assert np.abs(flow.u).max() == 0.0 and np.abs(flow.v).max() == 0.0

    def test_forward_translation_radial_expansion(self, rig):
        # t_z > 0 in the camera frame: zero at the principal point and
        # magnitude proportional to radius
        from sceneflux.flowfield import bilinear_sample

        cam = rig.cameras[0]
        depth = np.full((cam.height, cam.width), 2.0)
        T = cam.m.T @ np.array([0.0, 0.0, 1.0])  # rig motion mapping to camera t_z
        flow = synthesize_flow(rig, 0, T, np.zeros(3), depth)
        cy, cx = (cam.height - 1) / 2, (cam.width - 1) / 2
        ys, xs = np.mgrid[0 : cam.height, 0 : cam.width].astype(float)
        r = np.hypot(xs - cx, ys - cy)
        mag = np.hypot(flow.u, flow.v)
        # the field is linear, so bilinear sampling at the principal point is exact
        at_center = [bilinear_sample(c, np.array([cx]), np.array([cy]))[0] for c in (flow.u, flow.v)]
        assert np.hypot(*at_center) < 1e-9
        mask = r > 2
        ratio = mag[mask] / r[mask]
        assert np.ptp(ratio) / ratio.mean() < 1e-9

    def test_axial_rotation_depth_invariant(self, rig):
        cam = rig.cameras[0]
        w = cam.m.T @ np.array([0.0, 0.0, 0.07])  # roll about the optical axis
        f1 = synthesize_flow(rig, 0, np.zeros(3), w, np.full((cam.height, cam.width), 1.0))
        f10 = synthesize_flow(rig, 0, np.zeros(3), w, np.full((cam.height, cam.width), 10.0))
        assert np.abs(f1.u - f10.u).max() < 1e-12
        assert np.abs(f1.v - f10.v).max() < 1e-12

    def test_nonpositive_depth_rejected(self, rig):
        depth = np.full((32, 32), 2.0)
        depth[3, 3] = 0.0
        with pytest.raises(NonPositiveDepth):
            synthesize_flow(rig, 0, np.zeros(3), np.zeros(3), depth)


class TestClassifyMotion:
    def test_both_zero_degenerate(self):
        with pytest.raises(DegenerateFlow):
            classify_motion(FlowField.zero(8, 8), FlowField.zero(8, 8))

    def test_lateral_translation(self, rig, depths):
        flows = [synthesize_flow(rig, k, [0, 1, 0], np.zeros(3), depths[k]) for k in range(2)]
        assert classify_motion(flows[0], flows[1]) is MotionClass.TRANSLATIONAL

    def test_mast_rotation(self, rig, depths):
        flows = [synthesize_flow(rig, k, np.zeros(3), [0, 0, 0.05], depths[k]) for k in range(4)]
        assert classify_motion(flows[0], flows[1]) is MotionClass.ROTATIONAL
        assert classify_motion(flows[2], flows[3]) is MotionClass.ROTATIONAL

    def test_mixed(self, rig, depths):
        flows = [synthesize_flow(rig, k, [0, 0.5, 0], [0, 0, 0.05], depths[k]) for k in range(2)]
        assert classify_motion(flows[0], flows[1]) is MotionClass.MIXED

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            classify_motion(FlowField.zero(8, 8), FlowField.zero(9, 8))


class TestEstimateEgomotion:
    def test_all_zero_flows(self, rig, depths):
        flows = [FlowField.zero(32, 32) for _ in range(4)]
        est = estimate_egomotion(flows, rig, depths)
        assert np.allclose(est.T, 0.0) and np.allclose(est.omega, 0.0)

    def test_noise_free_round_trip(self, rig, depths, rng):
        for _ in range(10):
            T = rng.uniform(-1, 1, 3)
            w = rng.uniform(-0.1, 0.1, 3)
            flows = [synthesize_flow(rig, k, T, w, depths[k]) for k in range(4)]
            est = estimate_egomotion(flows, rig, depths)
            assert np.abs(est.T - T).max() / max(np.linalg.norm(T), 1e-12) < 1e-6
            assert np.abs(est.omega - w).max() < 1e-6
            assert est.scale_known

    def test_no_depth_recovers_direction(self, rig):
        ones = [np.ones((32, 32)) for _ in range(4)]
        T = np.array([0.3, -0.5, 0.2])
        w = np.array([0.03, -0.01, 0.05])
        flows = [synthesize_flow(rig, k, T, w, ones[k]) for k in range(4)]
        est = estimate_egomotion(flows, rig, None)
        assert not est.scale_known
        assert np.isclose(np.linalg.norm(est.T), 1.0)
        assert np.abs(est.T - T / np.linalg.norm(T)).max() < 1e-6
        assert np.abs(est.omega - w).max() < 1e-6

    def test_no_depth_pure_translation_any_scale(self, rig, depths):
        T = np.array([0.4, 0.1, -0.3])
        flows = [synthesize_flow(rig, k, T, np.zeros(3), depths[k]) for k in range(4)]
        est = estimate_egomotion(flows, rig, None)
        assert np.abs(est.T - T / np.linalg.norm(T)).max() < 1e-6

    def test_rotation_depth_invariance_property(self):
        # varying depth changes only the translational part: for a camera at
        # the rig origin, pure rotation produces no 1/Z term at all
        origin_rig = RigConfig([RigCamera(np.zeros(3), np.eye(3)), RigCamera(np.zeros(3), np.eye(3))])
        w = np.array([0.02, -0.04, 0.06])
        f1 = synthesize_flow(origin_rig, 0, np.zeros(3), w, np.full((32, 32), 1.0))
        f9 = synthesize_flow(origin_rig, 0, np.zeros(3), w, np.full((32, 32), 9.0))
        assert np.abs(f1.u - f9.u).max() < 1e-12
        assert np.abs(f1.v - f9.v).max() < 1e-12

    def test_too_few_cameras(self, rig, depths):
        with pytest.raises(TooFewCameras):
            estimate_egomotion([FlowField.zero(32, 32)], rig, depths)

    def test_noisy_success_rate_small(self, rig, depths, rng):
        # smaller version of the acceptance protocol
        ok = 0
        for _ in range(25):
            T = rng.normal(size=3)
            T *= rng.uniform(0.1, 1.0) / np.linalg.norm(T)
            w = rng.normal(size=3)
            w *= rng.uniform(0.0, 0.1) / np.linalg.norm(w)
            flows = []
            for k in range(4):
                f = synthesize_flow(rig, k, T, w, depths[k])
                mag = np.hypot(f.u, f.v)
                flows.append(FlowField(f.u + 0.05 * mag * rng.standard_normal(f.u.shape),
                                       f.v + 0.05 * mag * rng.standard_normal(f.v.shape)))
            est = estimate_egomotion(flows, rig, depths)
            cosang = (est.T @ T) / (np.linalg.norm(est.T) * np.linalg.norm(T))
            if np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))) < 5.0:
                ok += 1
        assert ok >= 22


class TestEgoTrace:
    def test_accumulates_drift(self):
        trace = EgoTrace()
        trace.append(0, MotionEstimate([0.5, 0.0, 0.0], np.zeros(3)))
        trace.append(1, MotionEstimate([0.5, 1.0, 0.0], np.zeros(3)))
        assert trace.drift == [(0.5, 0.0), (1.0, 1.0)]

    def test_monotonic_frames_enforced(self):
        trace = EgoTrace()
        trace.append(3, MotionEstimate(np.zeros(3), np.zeros(3)))
        with pytest.raises(ValueError):
            trace.append(3, MotionEstimate(np.zeros(3), np.zeros(3)))

    def test_csv_roundtrip(self, tmp_path):
        trace = EgoTrace()
        trace.append(0, MotionEstimate([0.1, 0.2, 0.3], [0.01, 0.02, 0.03]))
        trace.append(5, MotionEstimate([1.0, 0.0, 0.0], np.zeros(3), scale_known=False))
        path = tmp_path / "trace.csv"
        write_trace_csv(path, trace)
        back = read_trace_csv(path)
        assert back.frames == [0, 5]
        assert np.allclose(back.estimates[0].T, [0.1, 0.2, 0.3])
        assert back.estimates[1].scale_known is False
        assert np.allclose(back.drift[-1], trace.drift[-1])


class TestRigIO:
    def test_roundtrip(self, tmp_path, rig):
        path = tmp_path / "rig.cfg"
        write_rig(path, rig)
        back = load_rig(path)
        assert len(back.cameras) == 4
        assert back.opposing_pairs == [(0, 1), (2, 3)]
        for a, b in zip(rig.cameras, back.cameras):
            assert np.allclose(a.s, b.s)
            assert np.allclose(a.m, b.m)
            assert a.focal == b.focal

    def test_orthonormality_enforced(self):
        with pytest.raises(ValueError):
            RigCamera(np.zeros(3), np.eye(3) * 1.001)

    def test_rig_needs_two_cameras(self):
        with pytest.raises(TooFewCameras):
            RigConfig([RigCamera(np.zeros(3), np.eye(3))])
