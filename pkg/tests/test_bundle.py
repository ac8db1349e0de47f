import math

import numpy as np
import pytest

from starsfm._validation import DisconnectedError
from starsfm.bundle import (
    BAProblem,
    BundleAdjuster,
    build_problem,
    bundle_adjust,
    project_batch,
    reprojection_jacobians,
)
from starsfm.evaluation import pairwise_pose_errors
from starsfm.geometry import PinholeCamera, Pose, exp_so3, random_rotation, rot_axis
from starsfm.reconstruction import GlobalReconstruction, Track
from starsfm.synthetic import SceneConfig, generate_scene


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneConfig(n_cameras=8, seed=4, landmarks_per_image=40))


def landmark_tracks(scene, outlier=None):
    vis = scene.visibility()
    uv = [scene.project_landmarks(i) for i in scene.images]
    tracks = []
    for k in range(len(scene.landmarks)):
        imgs = np.nonzero(vis[:, k])[0]
        if len(imgs) >= 2:
            tracks.append(Track("classical", [(int(i), *uv[i][k]) for i in imgs]))
    if outlier is not None:
        t = tracks[outlier]
        i, u, v = t.obs[0]
        tracks[outlier] = Track("classical", ((i, u + 50.0, v),) + t.obs[1:])
    return tracks


def perturbed(scene, seed, rot_deg=0.5, frac=0.01):
    rng = np.random.default_rng(seed)
    poses = {}
    for i, p in enumerate(scene.poses):
        w = rng.normal(size=3)
        w *= math.radians(rot_deg) / np.linalg.norm(w)
        c = p.center + rng.normal(size=3) * frac * scene.scale
        poses[i] = Pose.from_center(exp_so3(w) @ p.R, c)
    truth = scene.truth()
    return GlobalReconstruction(poses, dict(truth.cameras), dict(truth.camera_of))


def max_pose_error(est, scene):
    return max(pairwise_pose_errors(est, scene.truth()).values())


class TestJacobians:
    @pytest.mark.parametrize("behind", [False, True])
    def test_match_finite_differences(self, behind):
        rng = np.random.default_rng(1 + behind)
        n = 100
        R = np.array([random_rotation(rng) for _ in range(n)])
        C = rng.normal(size=(n, 3))
        f = rng.uniform(50, 500, size=n)
        pp = rng.uniform(20, 80, size=(n, 2))
        depth = rng.uniform(1.0, 10.0, size=n) * (-1 if behind else 1)
        xy = rng.normal(size=(n, 2)) * np.abs(depth)[:, None] * 0.5
        x = np.concatenate([xy, depth[:, None]], axis=1)
        X = C + np.einsum("nba,nb->na", R, x)
        J_rot, J_c, J_f, J_X = reprojection_jacobians(R, C, f, pp, X)
        h = 1e-6

        def proj(R_, C_, f_, X_):
            return project_batch(R_, C_, f_, pp, X_)[0]

        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            fd = (proj(exp_so3(e)[None] @ R, C, f, X) - proj(exp_so3(-e)[None] @ R, C, f, X)) / (2 * h)
            np.testing.assert_allclose(J_rot[:, :, a], fd, rtol=1e-5, atol=1e-7 * np.abs(fd).max())
            fd = (proj(R, C + e, f, X) - proj(R, C - e, f, X)) / (2 * h)
            np.testing.assert_allclose(J_c[:, :, a], fd, rtol=1e-5, atol=1e-7 * np.abs(fd).max())
            fd = (proj(R, C, f, X + e) - proj(R, C, f, X - e)) / (2 * h)
            np.testing.assert_allclose(J_X[:, :, a], fd, rtol=1e-5, atol=1e-7 * np.abs(fd).max())
        fd = (proj(R, C, f + h, X) - proj(R, C, f - h, X)) / (2 * h)
        np.testing.assert_allclose(J_f, fd, rtol=1e-5, atol=1e-9)


class TestBundleAdjust:
    def test_optimum_in_optimum_out(self, scene):
        problem = build_problem(scene.truth(), landmark_tracks(scene))
        recon, report = bundle_adjust(problem)
        assert report.final_cost <= 1e-16
        assert report.accepted == 0
        assert max_pose_error(recon, scene) <= 1e-10

    def test_basin_recovery(self, scene):
        problem = build_problem(perturbed(scene, 0), landmark_tracks(scene))
        recon, report = bundle_adjust(problem)
        assert report.final_cost < 1e-12 * report.initial_cost
        assert max_pose_error(recon, scene) <= 1e-6
        for i in scene.images:
            assert recon.cameras[i].focal == pytest.approx(scene.cameras[i].focal, rel=1e-6)

    def test_gauge_is_held(self, scene):
        start = perturbed(scene, 1)
        recon, _ = bundle_adjust(build_problem(start, landmark_tracks(scene)))
        np.testing.assert_array_equal(recon.poses[0].R, start.poses[0].R)
        np.testing.assert_allclose(recon.poses[0].center, start.poses[0].center)
        d0 = np.linalg.norm(start.poses[1].center - start.poses[0].center)
        d1 = np.linalg.norm(recon.poses[1].center - recon.poses[0].center)
        assert d1 == pytest.approx(d0, rel=1e-12)

    def test_huber_beats_trivial_with_outlier(self, scene):
        tracks = landmark_tracks(scene, outlier=3)
        start = perturbed(scene, 2, rot_deg=0.1, frac=0.002)
        errs = {}
        for name, scale in (("huber", 1.0), ("trivial", 1e12)):
            recon, report = bundle_adjust(build_problem(start, tracks), huber_scale=scale)
            assert report.termination in ("function_tolerance", "gradient_tolerance", "cost_tolerance")
            errs[name] = max_pose_error(recon, scene)
        assert errs["huber"] < errs["trivial"]

    def test_monotone_cost(self, scene):
        rng = np.random.default_rng(5)
        tracks = [Track(t.kind, [(i, u + rng.normal() * 0.5, v + rng.normal() * 0.5) for i, u, v in t.obs])
                  for t in landmark_tracks(scene)]
        est = BundleAdjuster().fit(build_problem(perturbed(scene, 3), tracks))
        hist = est.cost_history_
        assert len(hist) > 2
        assert all(b <= a for a, b in zip(hist, hist[1:]))
        assert est.report_.to_json()["final_cost"] == hist[-1]

    def test_virtual_points_fixed(self, scene):
        classical = landmark_tracks(scene)
        X = scene.landmarks[0] + 0.3
        uv = [(i, *scene.cameras[i].project(scene.poses[i].apply(X))[0]) for i in (0, 1, 2)]
        virtual = Track("virtual-local", uv, point=tuple(X))
        problem = build_problem(perturbed(scene, 4), classical + [virtual])
        n_var = sum(p is not None for p in problem.points)
        recon, _ = bundle_adjust(problem)
        assert len(recon.points) == n_var
        assert problem.tracks[-1].point == tuple(X)

    def test_thread_count_does_not_change_result(self, scene):
        problem = build_problem(perturbed(scene, 6), landmark_tracks(scene))
        a = BundleAdjuster(workers=1, chunk_size=64).fit(problem)
        b = BundleAdjuster(workers=3, chunk_size=64).fit(problem)
        assert a.cost_history_ == b.cost_history_
        for i in scene.images:
            assert np.array_equal(a.reconstruction_.poses[i].R, b.reconstruction_.poses[i].R)

    def test_non_finite_cost_reported(self):
        cam = PinholeCamera(100.0, 64, 48)
        R1 = rot_axis([0, 1, 0], 0.3)
        poses = {0: Pose.identity(), 1: Pose.from_center(R1, [1.0, 0, 0])}
        # the point lies in camera 1's imaging plane but in front of camera 0
        X = np.array([1.0, 0, 0]) + 2.0 * R1[0]
        bad = Track("virtual-local", ((0, 50.0, 24.0), (1, 10.0, 24.0)), point=tuple(X))
        good = Track("classical", ((0, 32.0, 24.0), (1, 12.0, 24.0)))
        problem = BAProblem(poses, {0: cam, 1: cam}, [good, bad], [np.array([0.0, 0.0, 5.0]), None])
        with pytest.raises(ValueError, match="non-finite residual at observation 3"):
            bundle_adjust(problem)

    def test_disconnected(self):
        cam = PinholeCamera(100.0, 64, 48)
        poses = {k: Pose.from_center(np.eye(3), [float(k), 0, 0]) for k in range(4)}
        tracks = [Track("classical", ((0, 30, 20), (1, 10, 20))), Track("classical", ((2, 30, 20), (3, 10, 20)))]
        with pytest.raises(DisconnectedError):
            BAProblem(poses, {k: cam for k in poses}, tracks, [np.zeros(3), np.zeros(3)])

    def test_get_params(self):
        assert BundleAdjuster(arctan_scale=2.0).get_params()["arctan_scale"] == 2.0
