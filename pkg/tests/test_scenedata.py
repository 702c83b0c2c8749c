import json

import numpy as np
import pytest

from aerofield.geometry import CameraIntrinsics, Pose, Ray, project
from aerofield.scenedata import (
    DatasetError,
    SceneSpec,
    default_bounds,
    default_scene,
    generate_dataset,
    load_manifest,
    look_at_pose,
    render_scene_image,
    save_dataset,
    trace_ray,
)

INTR = CameraIntrinsics(fx=40.0, fy=40.0, cx=15.5, cy=15.5, width=32, height=32)


def small_rings():
    return [(4.0, 45.0, 5), (8.0, 55.0, 5)]


class TestSceneSpec:
    def test_rejects_bad_period(self):
        with pytest.raises(DatasetError):
            SceneSpec(checker_period=0.0)

    def test_rejects_inverted_box(self):
        with pytest.raises(DatasetError):
            SceneSpec(boxes=(((1, 1, 1), (0, 2, 2), (1, 0, 0)),))

    def test_rejects_out_of_range_color(self):
        with pytest.raises(DatasetError):
            SceneSpec(sky_color=(1.5, 0, 0))


class TestTraceRay:
    def test_vertical_ray_hits_checker_cell(self):
        scene = default_scene()
        # straight down onto the center of cell (2, 2): parity 0
        ray = Ray(origin=np.array([2.5, 2.5, 5.0]), direction=np.array([0.0, 0.0, -1.0]),
                  t_near=0.1, t_far=100.0)
        color = trace_ray(scene, ray)
        assert np.allclose(color, scene.checker_colors[0])
        ray = Ray(origin=np.array([1.5, 2.5, 5.0]), direction=np.array([0.0, 0.0, -1.0]),
                  t_near=0.1, t_far=100.0)
        assert np.allclose(trace_ray(scene, ray), scene.checker_colors[1])

    def test_ray_to_sky(self):
        scene = default_scene()
        ray = Ray(origin=np.array([0.0, 0.0, 5.0]), direction=np.array([0.0, 0.0, 1.0]),
                  t_near=0.1, t_far=100.0)
        assert np.allclose(trace_ray(scene, ray), scene.sky_color)

    def test_box_occludes_ground_hand_check(self):
        # Box [0,1]^2 x [0,2], camera above at z=5 shooting straight down through
        # (0.5, 0.5): slab entry at z=2 => t = 5 - 2 = 3, before ground at t=5.
        scene = SceneSpec(boxes=(((0, 0, 0), (1, 1, 2), (1.0, 0.0, 0.0)),))
        ray = Ray(origin=np.array([0.5, 0.5, 5.0]), direction=np.array([0.0, 0.0, -1.0]),
                  t_near=0.1, t_far=100.0)
        assert np.allclose(trace_ray(scene, ray), (1.0, 0.0, 0.0))
        # slightly offset ray misses the box and hits the ground instead
        ray2 = Ray(origin=np.array([1.5, 0.5, 5.0]), direction=np.array([0.0, 0.0, -1.0]),
                   t_near=0.1, t_far=100.0)
        assert not np.allclose(trace_ray(scene, ray2), (1.0, 0.0, 0.0))

    def test_scale_invariance(self):
        scene = default_scene()
        rng = np.random.default_rng(0)
        for _ in range(20):
            o = rng.uniform(-3, 3, 3) + np.array([0, 0, 5.0])
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            r1 = Ray(origin=o, direction=d, t_near=0.01, t_far=50.0)
            # doubling the direction scale while halving t-range hits the same point
            c1 = trace_ray(scene, r1)
            c2 = _trace_scaled(scene, o, d)
            assert np.allclose(c1, c2)

    def test_finite_ground_extent(self):
        scene = SceneSpec(ground_extent=1.0)
        ray = Ray(origin=np.array([5.0, 5.0, 5.0]), direction=np.array([0.0, 0.0, -1.0]),
                  t_near=0.1, t_far=100.0)
        assert np.allclose(trace_ray(scene, ray), scene.sky_color)


def _trace_scaled(scene, o, d):
    from aerofield.scenedata import _trace_batch
    return _trace_batch(scene, o[None], (2.0 * d)[None], 0.005, 25.0)[0]


class TestGenerate:
    def test_frame_count_and_splits(self, tmp_path):
        path = generate_dataset(default_scene(), small_rings(), INTR,
                                str(tmp_path), seed=1, test_every=4)
        ds = load_manifest(path)
        assert len(ds.frames) == 10
        assert sorted(ds.train_indices + ds.test_indices) == list(range(10))
        assert set(ds.train_indices).isdisjoint(ds.test_indices)
        # every 4th frame per ring is test: indices 0 and 4 within each ring of 5
        assert len(ds.test_indices) == 4

    def test_lookat_projects_origin_to_principal_point(self, tmp_path):
        path = generate_dataset(default_scene(), small_rings(), INTR,
                                str(tmp_path), seed=2)
        ds = load_manifest(path)
        origin = (np.zeros(3) - ds.center) * ds.scale
        for frame in ds.frames:
            coord, depth, valid = project(origin, INTR, frame.pose)
            assert valid
            assert abs(coord.u - INTR.cx) < 1e-6 and abs(coord.v - INTR.cy) < 1e-6

    def test_outermost_ring_sees_all_bound_corners(self, tmp_path):
        rings = [(4.0, 45.0, 4), (8.0, 50.0, 4), (16.0, 55.0, 4)]
        path = generate_dataset(default_scene(), rings, INTR,
                                str(tmp_path), seed=3)
        ds = load_manifest(path)
        lo, hi = ds.bounds
        corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                            for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        outer = [f for f in ds.frames if f.altitude_tag == 2]
        assert outer
        for frame in outer:
            for c in corners:
                _, _, valid = project(c, INTR, frame.pose)
                assert valid

    def test_deterministic_given_seed(self, tmp_path):
        p1 = generate_dataset(default_scene(), small_rings(), INTR,
                              str(tmp_path / "a"), seed=7)
        p2 = generate_dataset(default_scene(), small_rings(), INTR,
                              str(tmp_path / "b"), seed=7)
        d1, d2 = load_manifest(p1), load_manifest(p2)
        for f1, f2 in zip(d1.frames, d2.frames):
            assert np.array_equal(f1.image, f2.image)
            assert np.allclose(f1.pose.matrix, f2.pose.matrix)

    def test_bad_ring_config(self, tmp_path):
        with pytest.raises(DatasetError):
            generate_dataset(default_scene(), [(-1.0, 45.0, 3)], INTR, str(tmp_path))
        with pytest.raises(DatasetError):
            generate_dataset(default_scene(), [(4.0, 45, 3), (2.0, 45, 3)],
                             INTR, str(tmp_path))


class TestLoad:
    def test_save_load_round_trip(self, tmp_path):
        path = generate_dataset(default_scene(), small_rings(), INTR,
                                str(tmp_path / "gen"), seed=4)
        ds = load_manifest(path)
        path2 = save_dataset(ds, str(tmp_path / "resaved"))
        ds2 = load_manifest(path2)
        for f1, f2 in zip(ds.frames, ds2.frames):
            assert np.abs(f1.pose.matrix - f2.pose.matrix).max() < 1e-9
            assert np.array_equal(f1.image, f2.image)

    def test_normalization_idempotent(self, tmp_path):
        path = generate_dataset(default_scene(), small_rings(), INTR,
                                str(tmp_path / "gen"), seed=5)
        ds = load_manifest(path)
        ds2 = load_manifest(save_dataset(ds, str(tmp_path / "norm")))
        assert abs(ds2.scale / ds.scale - 1.0) < 1e-9 or np.allclose(ds2.center, 0, atol=1e-9)
        for f1, f2 in zip(ds.frames, ds2.frames):
            assert np.abs(f1.pose.matrix - f2.pose.matrix).max() < 1e-9
        assert np.abs(ds2.bounds - ds.bounds).max() < 1e-9
        assert abs(ds2.t_near - ds.t_near) < 1e-9
        assert abs(ds2.t_far - ds.t_far) < 1e-9

    def test_frame_count_matches_manifest(self, tmp_path):
        path = generate_dataset(default_scene(), small_rings(), INTR,
                                str(tmp_path), seed=6)
        with open(path) as f:
            n = len(json.load(f)["frames"])
        assert len(load_manifest(path).frames) == n

    def test_reflection_rotation_rejected(self, tmp_path):
        path = generate_dataset(default_scene(), small_rings(), INTR,
                                str(tmp_path), seed=8)
        with open(path) as f:
            data = json.load(f)
        m = np.asarray(data["frames"][0]["transform"]).reshape(4, 4)
        m[:3, 0] = -m[:3, 0]  # determinant flips to -1
        data["frames"][0]["transform"] = [float(x) for x in m.reshape(-1)]
        with open(path, "w") as f:
            json.dump(data, f)
        with pytest.raises(DatasetError, match="orthonormal"):
            load_manifest(path)

    def test_missing_image_named_in_error(self, tmp_path):
        path = generate_dataset(default_scene(), small_rings(), INTR,
                                str(tmp_path), seed=9)
        (tmp_path / "images" / "r0_001.png").unlink()
        with pytest.raises(DatasetError, match="r0_001"):
            load_manifest(path)

    def test_missing_field_rejected(self, tmp_path):
        path = generate_dataset(default_scene(), small_rings(), INTR,
                                str(tmp_path), seed=10)
        with open(path) as f:
            data = json.load(f)
        del data["frames"][2]["transform"]
        with open(path, "w") as f:
            json.dump(data, f)
        with pytest.raises(DatasetError, match="transform"):
            load_manifest(path)

    def test_scene_fits_unit_cube(self, tmp_path):
        path = generate_dataset(default_scene(), small_rings(), INTR,
                                str(tmp_path), seed=11)
        ds = load_manifest(path)
        assert np.abs(ds.bounds).max() <= 1.0 + 1e-9


class TestLookAt:
    def test_rotation_orthonormal(self):
        pose = look_at_pose(np.array([3.0, 2.0, 4.0]), np.zeros(3))
        r = pose.rotation
        assert np.abs(r @ r.T - np.eye(3)).max() < 1e-12
        assert abs(np.linalg.det(r) - 1.0) < 1e-12

    def test_image_is_rendered_consistently(self):
        scene = default_scene()
        pose = look_at_pose(np.array([0.0, -4.0, 4.0]), np.zeros(3))
        img = render_scene_image(scene, INTR, pose)
        assert img.shape == (32, 32, 3)
        assert img.min() >= 0.0 and img.max() <= 1.0
        # scene occupies the view: not all sky
        assert not np.allclose(img, np.asarray(scene.sky_color))

    def test_straight_down_rejected(self):
        with pytest.raises(DatasetError):
            look_at_pose(np.array([0.0, 0.0, 5.0]), np.zeros(3))
