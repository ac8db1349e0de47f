import math

import numpy as np
import pytest

from starsfm.geometry import PinholeCamera, Pose, geodesic_distance, look_at
from starsfm.synthetic import (
    NoiseModel,
    SceneConfig,
    SyntheticScene,
    _rect,
    covisible_fraction,
    generate_scene,
    ground_truth_graph_pairs,
    render_depth,
    simulate_local_star,
    simulate_similarity,
)
from starsfm.tracks import triangulate
from starsfm.viewgraph import StarGraph, ViewGraph, graph_radius


def custom_scene(poses, surfaces, width=64, height=48, focal=60.0, doppelgangers=()):
    n = len(poses)
    return SyntheticScene(
        config=SceneConfig(n_cameras=max(n, 2), width=width, height=height, focal=focal),
        poses=tuple(poses),
        cameras=tuple(PinholeCamera(focal, width, height) for _ in range(n)),
        camera_of=tuple(range(n)),
        surfaces=tuple(surfaces),
        landmarks=np.zeros((0, 3)),
        room_of=(0,) * n,
        room_centers=np.zeros((1, 3)),
        candidates=(),
        doppelgangers=frozenset(doppelgangers),
    )


def facing_plane(distance=2.0):
    # camera at the origin looking down +z at the plane z = distance
    return Pose.identity(), _rect([0, 0, distance], [1, 0, 0], [0, 1, 0], 100.0, 100.0)


@pytest.fixture(scope="module")
def loop_scene():
    return generate_scene(SceneConfig(n_cameras=12, seed=3, landmarks_per_image=40))


class TestScene:
    def test_two_cameras_one_plane(self):
        scene = generate_scene(SceneConfig(n_cameras=2, seed=1))
        for i in range(2):
            assert scene.depth(i).valid.any()

    @pytest.mark.parametrize("trajectory", ["loop", "corridor", "cluster", "rooms"])
    def test_coverage(self, trajectory):
        scene = generate_scene(SceneConfig(trajectory=trajectory, n_cameras=14, seed=0))
        assert min(scene.depth(i).valid.mean() for i in scene.images) >= 0.3

    def test_rooms_bridge_coverage(self):
        scene = generate_scene(SceneConfig(trajectory="rooms", n_cameras=28, bridge=True))
        assert min(scene.depth(i).valid.mean() for i in scene.images) >= 0.3

    def test_deterministic(self):
        a = generate_scene(SceneConfig(trajectory="cluster", n_cameras=8, seed=5))
        b = generate_scene(SceneConfig(trajectory="cluster", n_cameras=8, seed=5))
        for p, q in zip(a.poses, b.poses):
            assert np.array_equal(p.R, q.R) and np.array_equal(p.t, q.t)
        assert np.array_equal(a.landmarks, b.landmarks)
        assert a.candidates == b.candidates

    def test_corridor_radius(self):
        scene = generate_scene(SceneConfig(trajectory="corridor", n_cameras=60, candidate_window=3))
        g = ViewGraph(scene.images)
        for i, j in ground_truth_graph_pairs(scene):
            g.add_edge(i, j)
        assert g.is_connected()
        assert graph_radius(g) >= 8

    def test_infeasible_rejected(self):
        with pytest.raises(ValueError):
            SceneConfig(n_cameras=1)
        with pytest.raises(ValueError):
            SceneConfig(trajectory="spiral")

    def test_relative_poses(self, loop_scene):
        rel = loop_scene.relative_pose(2, 5)
        back = rel.compose(loop_scene.poses[2])
        assert geodesic_distance(back.R, loop_scene.poses[5].R) < 1e-12
        np.testing.assert_allclose(back.t, loop_scene.poses[5].t, atol=1e-12)


class TestRender:
    def test_fronto_parallel(self):
        pose, plane = facing_plane(2.0)
        d = render_depth(custom_scene([pose], [plane]), 0)
        assert d.valid.all()
        assert np.abs(d.values - 2.0).max() < 1e-9

    def test_facing_away(self):
        pose, plane = facing_plane(2.0)
        away = Pose.from_center(look_at([0, 0, 0], [0, 0, -1.0], up=(0, 1, 0)), [0, 0, 0])
        assert not render_depth(custom_scene([away], [plane]), 0).valid.any()

    def test_tilted_plane_against_ray_cast(self):
        rng = np.random.default_rng(4)
        c = np.array([0.3, -0.2, -0.5])
        pose = Pose.from_center(look_at(c, [0, 0, 3.0]), c)
        plane = _rect([0.1, 0.2, 3.0], [1, 0, 0.3], [0.1, 1, -0.2], 50.0, 50.0)
        scene = custom_scene([pose], [plane])
        d = render_depth(scene, 0).values
        cam = scene.cameras[0]
        # brute force: solve c + t * ray = center + a u + b v per pixel
        for _ in range(200):
            x, y = rng.integers(0, cam.width), rng.integers(0, cam.height)
            ray = pose.R.T @ cam.normalized(np.array([x, y], float))
            A = np.stack([ray, -plane.u, -plane.v], axis=1)
            t, _, _ = np.linalg.solve(A, plane.center - c)
            assert d[y, x] == pytest.approx(t, rel=1e-9)


class TestSimilarity:
    def test_identical_viewpoints(self):
        pose, plane = facing_plane(2.0)
        assert simulate_similarity(custom_scene([pose, pose], [plane]), (0, 1)) >= 0.95

    def test_disjoint_views(self):
        pose, plane = facing_plane(2.0)
        other = Pose.from_center(np.eye(3), [500.0, 0, 0])
        assert simulate_similarity(custom_scene([pose, other], [plane]), (0, 1)) <= 0.05

    def test_doppelganger_band(self):
        scene = generate_scene(SceneConfig(trajectory="rooms", n_cameras=16, seed=2))
        assert scene.doppelgangers
        for i, j in scene.doppelgangers:
            a = simulate_similarity(scene, (i, j))
            assert 0.3 <= a <= 0.6 and a < 0.8
            assert min(covisible_fraction(scene, i, j), covisible_fraction(scene, j, i)) == 0.0

    def test_deterministic(self, loop_scene):
        assert simulate_similarity(loop_scene, (0, 3)) == simulate_similarity(loop_scene, (3, 0))


class TestLocalStar:
    def _star(self, scene, center=0):
        return StarGraph(center, tuple(sorted({center, 1, 2, 3})))

    def test_noiseless_gauge_roundtrip(self, loop_scene):
        s = simulate_local_star(loop_scene, self._star(loop_scene), NoiseModel(scale_range=(0.5, 2.0)), seed=9)
        for m in s.members:
            world = s.gauge.to_world_pose(s.poses[m])
            truth = loop_scene.poses[m]
            assert geodesic_distance(world.R, truth.R) <= 1e-10
            assert np.linalg.norm(world.center - truth.center) <= 1e-10 * loop_scene.scale
            ratio = s.depths[m].values[truth_valid := loop_scene.depth(m).valid] / loop_scene.depth(m).values[truth_valid]
            np.testing.assert_allclose(ratio, s.gauge.scale, rtol=1e-9)

    def test_align_member_zero(self, loop_scene):
        # rigid part from member 0 alone, scale from any baseline
        s = simulate_local_star(loop_scene, self._star(loop_scene), NoiseModel(scale_range=(0.7, 1.4)), seed=1)
        m0 = s.members[0]
        align = loop_scene.poses[m0].inverse().compose(s.poses[m0])  # world -> local rotation part
        scale = np.linalg.norm(s.poses[2].center - s.poses[1].center) / np.linalg.norm(
            loop_scene.poses[2].center - loop_scene.poses[1].center
        )
        for m in s.members:
            R = s.poses[m].R @ align.R.T
            assert geodesic_distance(R, loop_scene.poses[m].R) < 1e-10
            local_rel = s.poses[m].center - s.poses[m0].center
            world_rel = align.R @ local_rel / scale
            np.testing.assert_allclose(
                world_rel, loop_scene.poses[m].center - loop_scene.poses[m0].center, atol=1e-10 * loop_scene.scale
            )

    def test_rotation_noise_statistics(self, loop_scene):
        # relative rotation error of two independently perturbed members
        noise = NoiseModel(rotation_deg=1.0)
        star = StarGraph(0, (0, 1))
        true_rel = loop_scene.relative_pose(0, 1).R
        err = []
        for seed in range(1000):
            s = simulate_local_star(loop_scene, star, noise, seed=seed)
            err.append(math.degrees(geodesic_distance(s.relative(0, 1).R, true_rel)))
        err = np.array(err)
        # per-axis sigma of the relative perturbation, Maxwell mean and spread
        sigma_axis = math.sqrt(2.0) * math.sqrt(math.pi / 8.0)
        expected = 2.0 * sigma_axis * math.sqrt(2.0 / math.pi)
        assert expected == pytest.approx(math.sqrt(2.0))
        std = sigma_axis * math.sqrt(3.0 - 8.0 / math.pi)
        assert abs(err.mean() - expected) < 3.0 * std / math.sqrt(len(err))

    def test_single_scale_per_star(self, loop_scene):
        s = simulate_local_star(loop_scene, self._star(loop_scene), NoiseModel(scale_range=(0.5, 2.0)), seed=4)
        ratios = []
        for m in s.members:
            valid = loop_scene.depth(m).valid
            ratios.append(s.depths[m].values[valid] / loop_scene.depth(m).values[valid])
        r = np.concatenate(ratios)
        assert np.ptp(r) <= 1e-9 * r.mean()
        assert 0.5 <= r.mean() <= 2.0

    def test_tracks_triangulate_to_landmarks(self, loop_scene):
        s = simulate_local_star(loop_scene, self._star(loop_scene), NoiseModel(scale_range=(0.5, 2.0)), seed=2)
        assert s.tracks
        for t in s.tracks[:50]:
            X_local = triangulate(t, s.poses, s.cameras)
            X = s.gauge.R.T @ (X_local - s.gauge.t) / s.gauge.scale
            nearest = np.min(np.linalg.norm(loop_scene.landmarks - X, axis=1))
            assert nearest <= 1e-6

    def test_deterministic(self, loop_scene):
        noise = NoiseModel(rotation_deg=1.0, center_frac=0.01, depth_rel=0.01, track_px=0.5)
        a = simulate_local_star(loop_scene, self._star(loop_scene), noise, seed=5)
        b = simulate_local_star(loop_scene, self._star(loop_scene), noise, seed=5)
        for m in a.members:
            assert np.array_equal(a.poses[m].R, b.poses[m].R)
            assert np.array_equal(a.depths[m].values, b.depths[m].values)
        assert a.tracks == b.tracks

    def test_outlier_replaces_one_member(self, loop_scene):
        star = self._star(loop_scene)
        clean = simulate_local_star(loop_scene, star, NoiseModel(), seed=0)
        bad = simulate_local_star(loop_scene, star, NoiseModel(outlier_prob=1.0), seed=0)
        off = [m for m in star.members
               if geodesic_distance(bad.gauge.to_world_pose(bad.poses[m]).R, loop_scene.poses[m].R) > 1e-6]
        assert len(off) == 1 and off[0] != star.center
        assert clean.tracks

    def test_noise_model_validation(self):
        with pytest.raises(ValueError):
            NoiseModel(rotation_deg=-1.0)
        with pytest.raises(ValueError):
            NoiseModel(scale_range=(0.0, 2.0))

    def test_member_outside_scene(self, loop_scene):
        with pytest.raises(ValueError):
            simulate_local_star(loop_scene, StarGraph(0, (0, 99)))
