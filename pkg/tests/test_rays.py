import numpy as np
import pytest

from nfseg.rays import (patch_placement_count, patch_rays_at, pixel_to_ray,
                        sample_strided_patch, stratified_samples)
from nfseg.scene import CameraModel
from nfseg.synthetic import default_spec, look_at_pose, make_synthetic_scene, trace_rays


def _camera(w=64, h=48, f=40.0, near=0.5, far=4.0):
    return CameraModel(fx=f, fy=f, cx=(w - 1) / 2, cy=(h - 1) / 2,
                       width=w, height=h, near=near, far=far)


def random_pose(rng):
    # QR of a random matrix gives an orthonormal frame; force right-handed
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    pose = np.empty((3, 4))
    pose[:, :3] = q
    pose[:, 3] = rng.standard_normal(3)
    return pose


class TestPixelToRay:
    def test_principal_axis(self):
        cam = _camera()
        pose = np.hstack([np.eye(3), np.zeros((3, 1))])
        ray = pixel_to_ray(cam, pose, (cam.cx, cam.cy))
        assert np.allclose(ray.direction, [0, 0, -1])
        assert np.allclose(ray.origin, 0)

    def test_unit_focal_offset(self):
        cam = _camera(w=128, f=40.0)
        pose = np.hstack([np.eye(3), np.zeros((3, 1))])
        ray = pixel_to_ray(cam, pose, (cam.cx + cam.fx, cam.cy))
        want = np.array([1.0, 0.0, -1.0]) / np.sqrt(2)
        assert np.allclose(ray.direction, want)

    def test_random_poses_unit_norm_and_origin(self):
        cam = _camera()
        rng = np.random.default_rng(0)
        for _ in range(100):
            pose = random_pose(rng)
            x = rng.uniform(0, cam.width - 1)
            y = rng.uniform(0, cam.height - 1)
            ray = pixel_to_ray(cam, pose, (x, y))
            assert abs(np.linalg.norm(ray.direction) - 1.0) < 1e-9
            assert np.array_equal(ray.origin, pose[:, 3])

    def test_out_of_bounds_pixel(self):
        cam = _camera()
        pose = np.hstack([np.eye(3), np.zeros((3, 1))])
        with pytest.raises(ValueError):
            pixel_to_ray(cam, pose, (cam.width + 3, 0))

    def test_consistent_with_synthetic_renderer(self, tiny_scene):
        spec = default_spec(width=24, height=24, n_views=6, n_test=2, sigma_f=0.2)
        v = tiny_scene.views[1]
        rng = np.random.default_rng(7)
        for _ in range(25):
            x = int(rng.integers(0, tiny_scene.camera.width))
            y = int(rng.integers(0, tiny_scene.camera.height))
            ray = pixel_to_ray(tiny_scene.camera, v.pose, (x, y))
            color, _, _ = trace_rays(spec, ray.origin[None], ray.direction[None])
            stored = v.image[y, x]
            quantized = np.rint(np.clip(color[0], 0, 1) * 255) / 255
            assert np.allclose(quantized, stored, atol=1e-6)


class TestStridedPatch:
    def test_coordinate_progression(self):
        cam = _camera(w=16, h=16)
        pose = np.hstack([np.eye(3), np.zeros((3, 1))])
        pr = patch_rays_at(cam, pose, (0, 0), patch_size=4, stride=2)
        assert list(pr.pixel_coords[0, :, 0]) == [0, 2, 4, 6]
        assert list(pr.pixel_coords[:, 0, 1]) == [0, 2, 4, 6]

    def test_reconstruct_coords_from_origin_and_stride(self):
        cam = _camera(w=40, h=40)
        pose = np.hstack([np.eye(3), np.zeros((3, 1))])
        rng = np.random.default_rng(1)
        pr = sample_strided_patch(cam, pose, 8, 3, rng)
        x0, y0 = pr.patch_origin
        P = pr.patch_size
        want_x = x0 + pr.stride * np.arange(P)
        want_y = y0 + pr.stride * np.arange(P)
        assert np.array_equal(pr.pixel_coords[..., 0], np.tile(want_x, (P, 1)))
        assert np.array_equal(pr.pixel_coords[..., 1], np.tile(want_y[:, None], (1, P)))

    def test_published_geometry_has_single_placement(self):
        # 64x64 patch at stride 6 spans 384 pixels: one placement on 384x384
        cam = _camera(w=384, h=384)
        assert patch_placement_count(cam, 64, 6) == 1
        pose = np.hstack([np.eye(3), np.zeros((3, 1))])
        pr = sample_strided_patch(cam, pose, 64, 6, np.random.default_rng(0))
        assert pr.patch_origin == (0, 0)

    def test_oversized_patch_rejected(self):
        cam = _camera(w=16, h=16)
        pose = np.hstack([np.eye(3), np.zeros((3, 1))])
        with pytest.raises(ValueError, match="exceeds"):
            sample_strided_patch(cam, pose, 16, 2, np.random.default_rng(0))

    def test_placement_deterministic_given_seed(self):
        cam = _camera(w=64, h=64)
        pose = np.hstack([np.eye(3), np.zeros((3, 1))])
        a = sample_strided_patch(cam, pose, 8, 4, np.random.default_rng(42))
        b = sample_strided_patch(cam, pose, 8, 4, np.random.default_rng(42))
        assert a.patch_origin == b.patch_origin

    def test_placements_cover_range_uniformly(self):
        cam = _camera(w=20, h=20)
        pose = np.hstack([np.eye(3), np.zeros((3, 1))])
        rng = np.random.default_rng(3)
        origins = {sample_strided_patch(cam, pose, 4, 2, rng).patch_origin
                   for _ in range(600)}
        xs = {o[0] for o in origins}
        assert xs == set(range(0, 13))   # 20 - 4*2 + 1 placements per axis


class TestStratifiedSamples:
    def test_midpoints(self):
        s = stratified_samples(0.0, 1.0, 1, 4, jitter=False)
        assert np.allclose(s.t[0], [0.125, 0.375, 0.625, 0.875])

    def test_jitter_stays_in_bins(self):
        rng = np.random.default_rng(5)
        near, far, K = 0.3, 2.7, 9
        s = stratified_samples(near, far, 50, K, rng=rng, jitter=True)
        bin_w = (far - near) / K
        lo = near + bin_w * np.arange(K)
        assert (s.t >= lo).all() and (s.t <= lo + bin_w).all()

    def test_monotone_for_all_draws(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            K = int(rng.integers(2, 12))
            s = stratified_samples(0.1, 5.0, 4, K, rng=rng, jitter=True)
            assert (np.diff(s.t, axis=1) > 0).all()
            assert (s.delta > 0).all()

    def test_midpoint_deltas_sum_to_range(self):
        # with midpoint samples the deltas (terminal bin width included)
        # telescope exactly to far - near
        rng = np.random.default_rng(7)
        for _ in range(60):
            K = int(rng.integers(2, 20))
            near = float(rng.uniform(0.01, 2.0))
            far = near + float(rng.uniform(0.5, 5.0))
            s = stratified_samples(near, far, 3, K, jitter=False)
            assert np.allclose(s.delta.sum(axis=1), far - near)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            stratified_samples(0.0, 1.0, 1, 1)


class TestLookAt:
    def test_orthonormal_right_handed(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            eye = rng.standard_normal(3) * 2 + np.array([0, 0, 3])
            pose = look_at_pose(eye, rng.standard_normal(3) * 0.2)
            rot = pose[:, :3]
            assert np.abs(rot.T @ rot - np.eye(3)).max() < 1e-9
            assert np.linalg.det(rot) > 0
