import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from starsfm._validation import DegenerateError
from starsfm.geometry import PinholeCamera, Pose, look_at, rot_axis
from starsfm.reconstruction import Track
from starsfm.synthetic import NoiseModel, SceneConfig, _rect, generate_scene, simulate_local_star
from starsfm.tracks import generate_virtual_tracks, mix_tracks, snap_and_merge, triangulate
from starsfm.viewgraph import StarGraph

from test_overlap import star_from_scene
from test_synthetic import custom_scene


def kp(mapping):
    # {image: [(id, u, v), ...]} -> keypoint table
    return {i: (np.array([k[0] for k in v]), np.array([k[1:] for k in v], float)) for i, v in mapping.items()}


def track(*obs, kind="feedforward", star=None):
    return Track(kind, obs, star=star)


class TestSnapAndMerge:
    def test_two_tracks_same_keypoints(self):
        keys = kp({0: [(7, 10.0, 10.0)], 1: [(3, 20.0, 20.0)]})
        out = snap_and_merge([track((0, 10.2, 10.1), (1, 20.3, 19.8), star=0),
                              track((0, 9.9, 10.0), (1, 20.0, 20.4), star=1)], keys)
        assert len(out) == 1
        assert out[0].obs == ((0, 10.0, 10.0), (1, 20.0, 20.0))
        assert out[0].keypoints == (7, 3)

    def test_outside_beta_unsnapped(self):
        keys = kp({0: [(0, 10.0, 10.0)], 1: [(0, 20.0, 20.0)]})
        a = track((0, 11.5, 10.0), (1, 30.0, 30.0))
        b = track((0, 8.5, 10.0), (1, 40.0, 40.0))
        out = snap_and_merge([a, b], keys, beta=1.0)
        assert len(out) == 2
        assert sorted(t.obs for t in out) == sorted([a.obs, b.obs])
        assert all(t.keypoints == (-1, -1) for t in out)

    def test_nearest_keypoint_wins(self):
        keys = kp({0: [(0, 10.0, 10.0), (1, 10.6, 10.0)]})
        out = snap_and_merge([track((0, 10.4, 10.0), (1, 0.0, 0.0))], keys)
        assert out[0].obs[0] == (0, 10.6, 10.0)

    def test_chain_merge(self):
        keys = kp({0: [(0, 0.0, 0.0)], 1: [(0, 5.0, 5.0)], 2: [(0, 9.0, 9.0)]})
        out = snap_and_merge([track((0, 0.0, 0.0), (1, 5.0, 5.0)), track((1, 5.0, 5.0), (2, 9.0, 9.0))], keys)
        assert len(out) == 1 and out[0].images == (0, 1, 2)

    def test_conflict_resolved_by_weight(self):
        keys = kp({0: [(0, 0.0, 0.0)], 1: [(0, 5.0, 5.0), (1, 50.0, 50.0)], 2: [(0, 9.0, 9.0)]})
        a = track((0, 0.0, 0.0), (1, 5.0, 5.0), star=4)
        b = track((0, 0.0, 0.0), (1, 50.0, 50.0), (2, 9.0, 9.0), star=2)
        out = snap_and_merge([a, b], keys, star_weights={(4, 1): 0.3, (2, 1): 0.9})
        assert len(out) == 1 and out[0].pixel(1).tolist() == [50.0, 50.0]
        out = snap_and_merge([a, b], keys, star_weights={(4, 1): 0.95, (2, 1): 0.9})
        assert out[0].pixel(1).tolist() == [5.0, 5.0]

    def test_bad_beta(self):
        with pytest.raises(ValueError):
            snap_and_merge([], {}, beta=0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_closure_and_is_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        n_img, n_kp = 4, 5
        pos = {i: rng.uniform(0, 100, size=(n_kp, 2)) for i in range(n_img)}
        keys = {i: (np.arange(n_kp), pos[i]) for i in range(n_img)}
        tracks, nodes = [], []
        for _ in range(rng.integers(1, 10)):
            imgs = rng.choice(n_img, size=2, replace=False)
            ks = rng.integers(0, n_kp, size=2)
            obs = [(int(i), *(pos[i][k] + rng.uniform(-0.3, 0.3, 2))) for i, k in zip(imgs, ks)]
            tracks.append(Track("feedforward", obs))
            # keypoints may nearly coincide, so the oracle snaps by brute force
            nodes.append({(i, int(np.argmin(np.linalg.norm(pos[i] - (u, v), axis=1)))) for i, u, v in obs})
        # brute-force closure over shared (image, keypoint) nodes
        groups = [set(n) for n in nodes]
        merged = True
        while merged:
            merged = False
            for a, b in itertools.combinations(range(len(groups)), 2):
                if groups[a] & groups[b]:
                    groups[a] |= groups.pop(b)
                    merged = True
                    break
        out = snap_and_merge(tracks, keys)
        expected = sorted(sorted({i for i, _ in g}) for g in groups)
        assert sorted(list(t.images) for t in out) == expected
        for t in out:
            # every surviving observation comes from one closure group
            nodes_t = set(zip(t.images, t.keypoints))
            assert sum(nodes_t <= g for g in groups) == 1
        assert snap_and_merge(out, keys) == out


def pair_track(a, b, k=0, kind="feedforward"):
    return Track(kind, ((a, float(k), 0.0), (b, float(k), 1.0)))


class TestMixTracks:
    def test_empty_classical_admits_fresh_pairs(self):
        ff = [pair_track(0, 1), pair_track(1, 2), pair_track(2, 3)]
        out, counts = mix_tracks([], ff, [])
        assert len(out) == 3 and counts == Counter({(0, 1): 1, (1, 2): 1, (2, 3): 1})

    def test_full_pair_rejects(self):
        classical = [pair_track(0, 1, k, "classical") for k in range(512)]
        out, counts = mix_tracks(classical, [pair_track(0, 1, 999)], [])
        assert len(out) == 512 and counts[(0, 1)] == 512
        out, _ = mix_tracks(classical[:511], [pair_track(0, 1, 999)], [])
        assert len(out) == 512

    def test_multi_view_track_admitted_if_any_pair_open(self):
        classical = [pair_track(0, 1, k, "classical") for k in range(3)]
        t = Track("virtual-local", ((0, 0, 0), (1, 0, 0), (2, 0, 0)), point=(0, 0, 1))
        out, counts = mix_tracks(classical, [], [t], pair_budget=3)
        assert t in out and counts[(0, 1)] == 4

    def test_feedforward_before_virtual(self):
        v = Track("virtual-local", ((0, 0, 0), (1, 0, 0)), point=(0, 0, 1))
        out, _ = mix_tracks([], [pair_track(0, 1)], [v], pair_budget=1)
        assert [t.kind for t in out] == ["feedforward"]

    def test_bad_budget(self):
        with pytest.raises(ValueError):
            mix_tracks([], [], [], 0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_recount_and_order_independence(self, seed):
        rng = np.random.default_rng(seed)

        def rand_tracks(kind, n):
            out = []
            for k in range(n):
                imgs = rng.choice(5, size=rng.integers(2, 5), replace=False)
                point = (0.0, 0.0, 1.0) if kind.startswith("virtual") else None
                out.append(Track(kind, [(int(i), float(k), float(i)) for i in imgs], point=point))
            return out

        groups = [rand_tracks("classical", 5), rand_tracks("feedforward", 15), rand_tracks("virtual-local", 15)]
        out, counts = mix_tracks(*groups, pair_budget=4)
        recount = Counter(p for t in out for p in itertools.combinations(sorted(t.images), 2))
        assert recount == counts
        shuffled = [list(rng.permutation(np.array(g, dtype=object))) for g in groups]
        out2, counts2 = mix_tracks(*shuffled, pair_budget=4)
        assert out2 == out and counts2 == counts


@pytest.fixture(scope="module")
def exact_star():
    scene = generate_scene(SceneConfig(n_cameras=10, seed=2))
    star = simulate_local_star(scene, StarGraph(3, (2, 3, 4, 5)), NoiseModel(scale_range=(0.5, 2.0)), seed=1)
    return scene, star


class TestVirtualTracks:
    def test_counts_and_split(self, exact_star):
        scene, star = exact_star
        tracks = generate_virtual_tracks(star, dict(enumerate(scene.poses)), dict(enumerate(scene.cameras)),
                                         star.gauge.scale, rng=np.random.default_rng(0))
        kinds = Counter(t.kind for t in tracks)
        assert 95 <= len(tracks) <= 100
        assert kinds["virtual-global"] == round(0.1 * len(tracks))
        assert all(t.star == 3 and t.point is not None and 3 in t.images for t in tracks)

    def test_zero_residual_at_exact_poses(self, exact_star):
        scene, star = exact_star
        poses, cams = dict(enumerate(scene.poses)), dict(enumerate(scene.cameras))
        tracks = generate_virtual_tracks(star, poses, cams, star.gauge.scale, rng=np.random.default_rng(1))
        worst = 0.0
        for t in tracks:
            for i, u, v in t.obs:
                uv, _ = cams[i].project(poses[i].apply(np.array(t.point)), eps=-np.inf)
                worst = max(worst, float(np.linalg.norm(uv - [u, v])))
        assert worst <= 1e-6
        # the point lies on the true surface
        for t in tracks[:20]:
            d = scene.poses[3].apply(np.array(t.point))[2]
            assert d > 0

    def test_behind_camera_kept_and_flagged(self):
        plane = _rect([0, 0, 4.0], [1, 0, 0], [0, 1, 0], 100.0, 100.0)
        front = Pose.identity()
        # a neighbor ahead of the plane looking back toward the origin sees it, one looking further away does not
        away = Pose.from_center(rot_axis([0, 1, 0], np.pi), [0.0, 0.0, 1.0])
        scene = custom_scene([front, away], [plane])
        star = star_from_scene(scene, (0, 1))
        star = star.with_depths({0: star.depths[0], 1: star.depths[0]})
        cams = dict(enumerate(scene.cameras))
        tracks = generate_virtual_tracks(star, dict(enumerate(scene.poses)), cams, 1.0, samples=20, global_ratio=0.0)
        assert tracks
        for t in tracks:
            X = away.apply(np.array(t.point))
            _, ok = cams[1].project(X)
            assert t.behind == (False, not ok)
            assert t.behind[1]
        assert generate_virtual_tracks(star, dict(enumerate(scene.poses)), cams, 1.0, samples=20, eps=1e9) == []

    def test_outside_image_kept(self):
        plane = _rect([0, 0, 4.0], [1, 0, 0], [0, 1, 0], 100.0, 100.0)
        poses = [Pose.identity(), Pose.from_center(np.eye(3), [3.0, 0, 0])]
        scene = custom_scene(poses, [plane])
        star = star_from_scene(scene, (0, 1))
        tracks = generate_virtual_tracks(star, dict(enumerate(poses)), dict(enumerate(scene.cameras)), 1.0)
        us = [t.pixel(1)[0] for t in tracks]
        assert min(us) < 0

    def test_validation(self, exact_star):
        scene, star = exact_star
        poses, cams = dict(enumerate(scene.poses)), dict(enumerate(scene.cameras))
        with pytest.raises(ValueError):
            generate_virtual_tracks(star, poses, cams, 1.0, samples=0)
        with pytest.raises(ValueError):
            generate_virtual_tracks(star, poses, cams, 1.0, global_ratio=1.5)
        empty = star.with_depths({**star.depths, 3: star.depths[3].scaled(0.0)})
        with pytest.raises(DegenerateError):
            generate_virtual_tracks(empty, poses, cams, 1.0)


class TestTriangulate:
    def test_two_views(self):
        cam = PinholeCamera(100.0, 128, 96)
        X = np.array([0.3, -0.2, 5.0])
        poses = {0: Pose.identity(), 1: Pose.from_center(np.eye(3), [1.0, 0, 0])}
        obs = [(i, *cam.project(p.apply(X))[0]) for i, p in poses.items()]
        out = triangulate(Track("classical", obs), poses, {0: cam, 1: cam})
        np.testing.assert_allclose(out, X, atol=1e-8)

    def test_identical_centers(self):
        cam = PinholeCamera(100.0, 128, 96)
        poses = {0: Pose.identity(), 1: Pose.from_center(rot_axis([0, 1, 0], 0.1), [0, 0, 0])}
        with pytest.raises(DegenerateError):
            triangulate(Track("classical", [(0, 60, 40), (1, 70, 40)]), poses, {0: cam, 1: cam})

    def test_tiny_parallax(self):
        cam = PinholeCamera(100.0, 128, 96)
        X = np.array([0.0, 0.0, 1e6])
        poses = {0: Pose.identity(), 1: Pose.from_center(np.eye(3), [1.0, 0, 0])}
        obs = [(i, *cam.project(p.apply(X))[0]) for i, p in poses.items()]
        with pytest.raises(DegenerateError):
            triangulate(Track("classical", obs), poses, {0: cam, 1: cam})

    def test_five_views(self):
        rng = np.random.default_rng(0)
        cam = PinholeCamera(120.0, 128, 96)
        X = np.array([0.5, 0.2, 0.1])
        poses = {}
        for k in range(5):
            c = rng.normal(size=3) * 2 + [0, 0, -6]
            poses[k] = Pose.from_center(look_at(c, X + rng.normal(size=3) * 0.2), c)
        obs = [(k, *cam.project(p.apply(X))[0]) for k, p in poses.items()]
        cams = {k: cam for k in poses}
        out = triangulate(Track("classical", obs), poses, cams)
        for k, u, v in obs:
            assert np.linalg.norm(cam.project(poses[k].apply(out))[0] - [u, v]) <= 1e-7
