import numpy as np
import pytest

from sceneflux.errors import (
    DimensionMismatch,
    EmptyMask,
    FrameTooSmall,
    TooSmallComponent,
)
from sceneflux.flowfield import FlowField, Frame
from sceneflux.shape import (
    Boundary,
    GistVector,
    ShapeDescriptor,
    fourier_descriptors,
    gist,
    motion_mask,
    new_object_hit,
    read_descriptor_csv,
    reconstruct_boundary,
    trace_boundary,
    update_reference,
    write_descriptor_csv,
)

from conftest import noise_texture


def direct_dft(z: np.ndarray) -> np.ndarray:
    """Literal descriptor sum, independent of the FFT path."""
    n = len(z)
    out = np.zeros(n, dtype=complex)
    for m in range(n):
        acc = 0.0 + 0.0j
        for k in range(n):
            acc += z[k] * np.exp(-2j * np.pi * m * k / n)
        out[m] = acc / n
    return out


def circle_boundary(cx, cy, r, n=48) -> Boundary:
    k = np.arange(n)
    z = (cx + 1j * cy) + r * np.exp(2j * np.pi * k / n)
    return Boundary(np.stack([z.real, z.imag], axis=-1))


class TestMotionMask:
    def test_zero_flow_empty(self):
        mask = motion_mask(FlowField.zero(32, 32), threshold=1.0)
        assert not mask.any()

    def test_constant_flow_compensated(self):
        mask = motion_mask(FlowField.constant(32, 32, 5.0, -3.0), threshold=1.0)
        assert not mask.any()

    def test_moving_block_recovered(self):
        u = np.zeros((64, 64))
        v = np.zeros((64, 64))
        u[20:28, 30:38] = 3.0
        mask = motion_mask(FlowField(u, v), threshold=1.0)
        truth = np.zeros((64, 64), dtype=bool)
        truth[20:28, 30:38] = True
        iou = (mask & truth).sum() / (mask | truth).sum()
        assert iou >= 0.8

    def test_speckle_removed(self, rng):
        u = np.zeros((32, 32))
        u[4, 4] = 9.0  # single-pixel outlier
        mask = motion_mask(FlowField(u, np.zeros((32, 32))), threshold=1.0)
        assert not mask.any()

    def test_requires_positive_threshold(self):
        with pytest.raises(ValueError):
            motion_mask(FlowField.zero(16, 16), threshold=0.0)


class TestTraceBoundary:
    def test_filled_square_perimeter(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[3:7, 2:6] = True
        boundary = trace_boundary(mask)
        assert len(boundary) == 12
        pts = set(map(tuple, boundary.points.astype(int)))
        expect = {(x, y) for x in range(2, 6) for y in range(3, 7)
                  if x in (2, 5) or y in (3, 6)}
        assert pts == expect

    def test_starts_top_left_clockwise(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[3:7, 2:6] = True
        pts = trace_boundary(mask).points.astype(int)
        assert tuple(pts[0]) == (2, 3)
        assert tuple(pts[1]) == (3, 3)  # clockwise means east first along the top

    def test_single_pixel_too_small(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[3, 3] = True
        with pytest.raises(TooSmallComponent):
            trace_boundary(mask)

    def test_empty_mask(self):
        with pytest.raises(EmptyMask):
            trace_boundary(np.zeros((8, 8), dtype=bool))

    def test_two_components_larger_traced(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[1:3, 1:3] = True
        mask[6:13, 6:13] = True
        pts = trace_boundary(mask).points
        assert pts[:, 0].min() >= 6 and pts[:, 1].min() >= 6

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_closed_and_eight_connected(self, seed):
        rng = np.random.default_rng(seed)
        mask = np.zeros((24, 24), dtype=bool)
        cy, cx = rng.integers(8, 16, 2)
        ys, xs = np.mgrid[0:24, 0:24]
        mask[(xs - cx) ** 2 + (ys - cy) ** 2 <= rng.integers(9, 36)] = True
        pts = trace_boundary(mask).points
        steps = np.abs(np.roll(pts, -1, axis=0) - pts)
        assert steps.max() <= 1  # includes closure step


class TestFourierDescriptors:
    def test_degenerate_constant_boundary(self):
        b = Boundary(np.tile([[3.0, 4.0]], (6, 1)))
        d = fourier_descriptors(b)
        assert np.isclose(d.coefficients[0], 3 + 4j)
        assert np.abs(d.coefficients[1:]).max() < 1e-12

    def test_circle_against_direct_sum_oracle(self):
        b = circle_boundary(10.0, 5.0, 4.0, n=24)
        d = fourier_descriptors(b)
        oracle = direct_dft(b.as_complex())
        assert np.abs(d.coefficients - oracle).max() < 1e-9
        assert np.isclose(d.coefficients[0], 10 + 5j, atol=1e-9)
        assert np.isclose(np.abs(d.coefficients[1]), 4.0, atol=1e-9)
        rest = np.abs(d.coefficients[2:])
        assert rest.max() < 1e-9

    def test_translation_moves_only_dc(self):
        b = circle_boundary(0.0, 0.0, 3.0, n=20)
        shifted = Boundary(b.points + [2.5, -1.5])
        d0 = fourier_descriptors(b).coefficients
        d1 = fourier_descriptors(shifted).coefficients
        assert np.isclose(d1[0] - d0[0], 2.5 - 1.5j, atol=1e-9)
        assert np.abs(d1[1:] - d0[1:]).max() < 1e-9

    def test_rotation_multiplies_by_phase(self):
        rng = np.random.default_rng(9)
        pts = rng.normal(size=(16, 2)) * 3 + [5, 5]
        b = Boundary(pts)
        d0 = fourier_descriptors(b).coefficients
        phi = 0.7
        centroid = d0[0]
        z = b.as_complex()
        rotated = centroid + np.exp(1j * phi) * (z - centroid)
        d1 = fourier_descriptors(Boundary(np.stack([rotated.real, rotated.imag], -1))).coefficients
        assert np.abs(d1[1:] - np.exp(1j * phi) * d0[1:]).max() < 1e-6

    def test_roundtrip_exact(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[3:11, 4:13] = True
        b = trace_boundary(mask)
        d = fourier_descriptors(b)
        rec = reconstruct_boundary(d, len(b))
        assert np.abs(rec - b.points).max() < 1e-9

    def test_circle_two_coefficients(self):
        b = circle_boundary(8.0, 8.0, 5.0, n=64)
        rec = reconstruct_boundary(fourier_descriptors(b), 2)
        radii = np.hypot(rec[:, 0] - 8.0, rec[:, 1] - 8.0)
        assert np.sqrt(np.mean((radii - 5.0) ** 2)) < 0.05

    def test_square_quarter_spectrum(self):
        mask = np.zeros((40, 40), dtype=bool)
        mask[8:28, 8:28] = True
        b = trace_boundary(mask)
        d = fourier_descriptors(b)
        rec = reconstruct_boundary(d, max(1, len(b) // 4))
        rms = np.sqrt(np.mean(np.sum((rec - b.points) ** 2, axis=1)))
        assert rms < 0.05 * 20  # side length 20

    def test_descriptor_csv_roundtrip(self, tmp_path):
        d = fourier_descriptors(circle_boundary(1.0, 2.0, 3.0, n=12))
        path = tmp_path / "fd.csv"
        write_descriptor_csv(path, d)
        back = read_descriptor_csv(path)
        assert np.abs(back.coefficients - d.coefficients).max() < 1e-9


class TestGist:
    def test_constant_frame_degenerate(self):
        g = gist(Frame(np.full((32, 32), 0.4)))
        assert g.degenerate
        assert np.all(g.values == 0.0)

    def test_vertical_stripes_horizontal_gradient_bin(self):
        xs = np.arange(32)
        img = np.tile(0.45 + 0.45 * np.sin(xs * np.pi / 4), (32, 1))
        g = gist(Frame(img))
        cells = g.values.reshape(4, 4, 4)
        assert cells[..., 0].sum() > 0.95
        assert cells[..., 1:].sum() < 0.05

    def test_brightness_offset_invariance(self):
        tex = noise_texture(32, 32, seed=4) * 0.5
        g0 = gist(Frame(tex))
        g1 = gist(Frame(tex + 0.3))
        assert np.abs(g0.values - g1.values).max() < 1e-12

    def test_small_frame_rejected(self):
        with pytest.raises(FrameTooSmall):
            gist(Frame(np.zeros((8, 8)) + 0.1))

    def test_l1_normalized(self):
        g = gist(Frame(noise_texture(48, 48, seed=6)))
        assert np.isclose(g.values.sum(), 1.0)
        assert np.all(g.values >= 0.0)


class TestNewObjectGate:
    def test_identical_no_hit(self):
        g = gist(Frame(noise_texture(32, 32, seed=1)))
        assert not new_object_hit(g, g, theta=0.0)

    def test_zero_theta_any_difference_hits(self):
        a = GistVector(np.zeros(64))
        b_vals = np.zeros(64)
        b_vals[0] = 1e-9
        assert new_object_hit(GistVector(b_vals), a, theta=0.0)

    def test_dimension_guard(self):
        class Fake:
            values = np.zeros(32)

        with pytest.raises(DimensionMismatch):
            new_object_hit(GistVector(np.zeros(64)), Fake(), theta=0.1)

    def test_appearing_block_hit_window(self, rng):
        # noisy static prefix, textured block enters at frame 20; the gate
        # threshold comes from the prefix distance statistics
        base = noise_texture(48, 48, seed=13)
        frames = []
        for t in range(30):
            img = np.clip(base + rng.normal(0, 0.002, base.shape), 0, 1)
            if t >= 20:
                img[16:32, 16:32] = noise_texture(16, 16, seed=99)
            frames.append(Frame(np.clip(img, 0, 1)))

        reference = gist(frames[0])
        distances = []
        hits = []
        for t in range(30):
            g = gist(frames[t])
            distances.append(float(np.linalg.norm(g.values - reference.values)))
            hits.append(t)  # placeholder replaced below
            reference = update_reference(reference, g, lam=0.05)
        prefix = np.array(distances[1:20])
        theta = prefix.mean() + 3.0 * prefix.std()
        hit_frames = [t for t in range(1, 30) if distances[t] > theta]
        assert hit_frames, "block appearance must register"
        assert 20 <= hit_frames[0] <= 22
        assert all(t >= 20 for t in hit_frames)

    def test_reference_ema_converges(self):
        ref = GistVector(np.zeros(64))
        target = GistVector(np.full(64, 1.0 / 64))
        for _ in range(200):
            ref = update_reference(ref, target, lam=0.05)
        assert np.abs(ref.values - target.values).max() < 1e-3
