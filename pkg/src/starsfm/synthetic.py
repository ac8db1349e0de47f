"""Synthetic ground truth: piecewise-planar scenes and a stand-in for
feedforward local inference.

Scenes are built from finite rectangles, so depth rendering and visibility
reduce to closed-form ray/plane intersection. Every image id is its index
in ``scene.poses``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PLANE_EPS, DepthMap, PinholeCamera, Pose, exp_so3, look_at, random_rotation
from .reconstruction import LocalStarReconstruction, Sim3, Track
from .viewgraph import CandidateScores, StarGraph

TRAJECTORIES = ("loop", "corridor", "cluster", "rooms")

BRIDGE_ROOM = 2
ROOM_B_FLOOR = 1.5


@dataclass(frozen=True)
class Rectangle:
    center: np.ndarray
    u: np.ndarray
    v: np.ndarray
    half_u: float
    half_v: float

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    @property
    def area(self) -> float:
        return 4.0 * self.half_u * self.half_v


def _rect(center, u, v, hu, hv) -> Rectangle:
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    return Rectangle(np.asarray(center, float), u / np.linalg.norm(u), v / np.linalg.norm(v), hu, hv)


def box_faces(center, half, yaw: float = 0.0) -> list[Rectangle]:
    c = np.asarray(center, float)
    hx, hy, hz = half
    cy, sy = math.cos(yaw), math.sin(yaw)
    ex = np.array([cy, sy, 0.0])
    ey = np.array([-sy, cy, 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    return [
        _rect(c + hx * ex, ey, ez, hy, hz),
        _rect(c - hx * ex, ey, ez, hy, hz),
        _rect(c + hy * ey, ex, ez, hx, hz),
        _rect(c - hy * ey, ex, ez, hx, hz),
        _rect(c + hz * ez, ex, ey, hx, hy),
    ]


def first_hit(surfaces, origins, directions) -> np.ndarray:
    """Smallest positive ray parameter hitting any surface (inf if none).

    ``origins`` broadcasts against ``directions`` of shape ``(N, 3)``.
    """
    directions = np.asarray(directions, float)
    origins = np.broadcast_to(np.asarray(origins, float), directions.shape)
    best = np.full(directions.shape[0], np.inf)
    for s in surfaces:
        n = s.normal
        denom = directions @ n
        ok = np.abs(denom) > 1e-15
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(ok, ((s.center - origins) @ n) / np.where(ok, denom, 1.0), -1.0)
        ok &= t > 1e-12
        rel = origins + t[:, None] * directions - s.center
        ok &= np.abs(rel @ s.u) <= s.half_u
        ok &= np.abs(rel @ s.v) <= s.half_v
        best = np.where(ok & (t < best), t, best)
    return best


@dataclass(frozen=True)
class SceneConfig:
    trajectory: str = "loop"
    n_cameras: int = 30
    width: int = 128
    height: int = 96
    focal: float = 100.0
    candidate_window: int | None = 4
    landmarks_per_image: int = 60
    seed: int = 0
    n_physical_cameras: int | None = None
    focal_spread: float = 0.0
    bridge: bool = False
    n_bridge: int = 9
    doppelganger_band: tuple[float, float] = (0.3, 0.6)
    corridor_wall_distance: float = 15.0

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.n_cameras < 2:
            raise ValueError("at least two cameras are required")
        if self.width <= 0 or self.height <= 0 or not self.focal > 0:
            raise ValueError("image dimensions and focal must be positive")


@dataclass(frozen=True)
class SyntheticScene:
    config: SceneConfig
    poses: tuple[Pose, ...]
    cameras: tuple[PinholeCamera, ...]
    camera_of: tuple[int, ...]
    surfaces: tuple[Rectangle, ...]
    landmarks: np.ndarray
    room_of: tuple[int, ...]
    room_centers: np.ndarray
    candidates: tuple[tuple[int, int], ...]
    doppelgangers: frozenset
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_images(self) -> int:
        return len(self.poses)

    @property
    def images(self) -> list[int]:
        return list(range(len(self.poses)))

    @property
    def scale(self) -> float:
        """Scene diameter from the camera centers."""
        c = np.array([p.center for p in self.poses])
        return float(np.linalg.norm(c.max(0) - c.min(0))) or 1.0

    def relative_pose(self, i: int, j: int) -> Pose:
        return self.poses[j].compose(self.poses[i].inverse())

    def depth(self, i: int) -> DepthMap:
        key = ("depth", i)
        if key not in self._cache:
            self._cache[key] = render_depth(self, i)
        return self._cache[key]

    def visibility(self) -> np.ndarray:
        """Boolean ``(n_images, n_landmarks)`` unoccluded in-bounds visibility."""
        if "vis" not in self._cache:
            vis = np.zeros((self.n_images, len(self.landmarks)), bool)
            for i in range(self.n_images):
                vis[i] = _points_visible(self, i, self.landmarks)
            self._cache["vis"] = vis
        return self._cache["vis"]

    def project_landmarks(self, i: int) -> np.ndarray:
        uv, _ = self.cameras[i].project(self.poses[i].apply(self.landmarks))
        return uv

    def truth(self):
        from .reconstruction import GlobalReconstruction

        return GlobalReconstruction(
            {i: p for i, p in enumerate(self.poses)},
            {i: c for i, c in enumerate(self.cameras)},
            {i: c for i, c in enumerate(self.camera_of)},
        )


def _points_visible(scene: SyntheticScene, i: int, X) -> np.ndarray:
    pose, cam = scene.poses[i], scene.cameras[i]
    X = np.asarray(X, float).reshape(-1, 3)
    x = pose.apply(X)
    uv, front = cam.project(x)
    ok = front & cam.in_bounds(np.where(front[:, None], uv, -1.0))
    c = pose.center
    t = first_hit(scene.surfaces, c, X - c)
    return ok & (t >= 1.0 - 1e-7)


def render_depth(scene: SyntheticScene, i: int) -> DepthMap:
    """Exact per-pixel z-depth by ray casting; 0 where nothing is hit."""
    pose, cam = scene.poses[i], scene.cameras[i]
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
    uv = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    rays = cam.normalized(uv) @ pose.R  # world directions with unit camera z
    t = first_hit(scene.surfaces, pose.center, rays)
    depth = np.where(np.isfinite(t), t, 0.0)
    return DepthMap(depth.reshape(cam.height, cam.width))


def _loop_cameras(n, radius, height, target, phase=0.0):
    poses = []
    for k in range(n):
        a = phase + 2 * math.pi * k / n
        c = np.array([target[0] + radius * math.cos(a), target[1] + radius * math.sin(a), height])
        poses.append(Pose.from_center(look_at(c, target), c))
    return poses


def _window_pairs(order, w, cyclic):
    n = len(order)
    pairs = set()
    w = n - 1 if w is None else min(w, n - 1)
    for a in range(n):
        for d in range(1, w + 1):
            b = a + d
            if b >= n:
                if not cyclic:
                    break
                b %= n
            if order[a] != order[b]:
                pairs.add((min(order[a], order[b]), max(order[a], order[b])))
    return pairs


def generate_scene(config: SceneConfig | None = None, **kwargs) -> SyntheticScene:
    """Build a deterministic scene for ``config.seed``."""
    if config is None:
        config = SceneConfig(**kwargs)
    elif kwargs:
        raise TypeError("pass either a config or keyword arguments")
    rng = np.random.default_rng(config.seed)
    n = config.n_cameras
    w = config.candidate_window
    surfaces: list[Rectangle] = []
    room_of = [0] * n
    room_centers = np.zeros((1, 3))
    doppel: set = set()

    if config.trajectory == "loop":
        surfaces += box_faces([0, 0, 1.0], (1.0, 1.0, 1.0))
        surfaces.append(_rect([0, 0, 0], [1, 0, 0], [0, 1, 0], 30.0, 30.0))
        poses = _loop_cameras(n, 6.0, 4.0, np.array([0.0, 0.0, 0.5]))
        candidates = _window_pairs(list(range(n)), w, cyclic=True)
    elif config.trajectory == "corridor":
        d = config.corridor_wall_distance
        length = float(n - 1)
        surfaces.append(_rect([length / 2, d, 4.0], [1, 0, 0], [0, 0, 1], length / 2 + 30, 4.0))
        surfaces.append(_rect([length / 2, d / 2 - 2.5, 0.0], [1, 0, 0], [0, 1, 0], length / 2 + 30, d / 2 + 2.5))
        poses = []
        for k in range(n):
            c = np.array([float(k), 0.0, 2.0])
            poses.append(Pose.from_center(look_at(c, c + [0.0, d, 0.0]), c))
        candidates = _window_pairs(list(range(n)), w, cyclic=False)
    elif config.trajectory == "cluster":
        surfaces += box_faces([0, 0, 1.0], (1.0, 1.0, 1.0))
        surfaces.append(_rect([0, 0, 0], [1, 0, 0], [0, 1, 0], 30.0, 30.0))
        poses = []
        for k in range(n):
            a = -math.pi / 2 + rng.uniform(-0.5, 0.5)
            r = rng.uniform(5.5, 7.0)
            c = np.array([r * math.cos(a), r * math.sin(a), rng.uniform(3.0, 4.5)])
            target = np.array([0.0, 0.0, 0.5]) + rng.normal(scale=0.3, size=3)
            poses.append(Pose.from_center(look_at(c, target), c))
        candidates = _window_pairs(list(range(n)), w, cyclic=False)
    else:  # rooms
        n_bridge = config.n_bridge if config.bridge else 0
        n_room = (n - n_bridge) // 2
        if n_room < 3:
            raise ValueError("rooms scene needs at least three cameras per room")
        room_centers = np.array([[-15.0, 0.0, 0.0], [15.0, 0.0, 0.0]])
        # room B differs in floor level, object and camera path
        floor_b = room_centers[1] + [0, 0, ROOM_B_FLOOR]
        surfaces += box_faces(room_centers[0] + [0, 0, 1.0], (1.0, 1.0, 1.0))
        surfaces += box_faces(floor_b + [0, 0, 0.8], (1.5, 0.6, 0.8), yaw=0.5)
        surfaces.append(_rect(room_centers[0], [1, 0, 0], [0, 1, 0], 8.0, 8.0))
        surfaces.append(_rect(floor_b, [1, 0, 0], [0, 1, 0], 8.0, 8.0))
        poses = _loop_cameras(n_room, 6.0, 5.0, room_centers[0])
        room_of = [0] * n_room
        if n_bridge:
            surfaces.append(_rect([0, 0, 0], [1, 0, 0], [0, 1, 0], 7.0, 3.0))
            for x in np.linspace(-15.0, 15.0, n_bridge):
                c = np.array([x, 0.0, 12.0])
                poses.append(Pose.from_center(look_at(c, [x, 0.0, 0.0], up=(1.0, 0.0, 0.0)), c))
            room_of += [BRIDGE_ROOM] * n_bridge
        n_b = n - n_room - n_bridge
        poses += _loop_cameras(n_b, 5.0, 6.5, floor_b, phase=math.pi / n_b)
        room_of += [1] * (n - n_room - n_bridge)
        a_ids = [i for i in range(len(room_of)) if room_of[i] == 0]
        b_ids = [i for i in range(len(room_of)) if room_of[i] == 1]
        bridge_ids = [i for i in range(len(room_of)) if room_of[i] == BRIDGE_ROOM]
        candidates = _window_pairs(a_ids, w, cyclic=True) | _window_pairs(b_ids, w, cyclic=True)
        if bridge_ids:
            candidates |= _window_pairs(a_ids[-(w or 1):] + bridge_ids + b_ids[: (w or 1)], w, cyclic=False)
        for a, b in zip(a_ids, b_ids):
            doppel.add((min(a, b), max(a, b)))
        candidates |= doppel

    n_phys = config.n_physical_cameras or n
    camera_of = tuple(i % n_phys for i in range(n))
    phys_focal = [config.focal * (1.0 + config.focal_spread * rng.uniform(-1, 1)) for _ in range(n_phys)]
    cameras = tuple(PinholeCamera(phys_focal[camera_of[i]], config.width, config.height) for i in range(n))

    scene = SyntheticScene(
        config=config,
        poses=tuple(poses),
        cameras=cameras,
        camera_of=camera_of,
        surfaces=tuple(surfaces),
        landmarks=np.zeros((0, 3)),
        room_of=tuple(room_of),
        room_centers=room_centers,
        candidates=tuple(sorted(candidates)),
        doppelgangers=frozenset(doppel),
    )
    coverage = [float(scene.depth(i).valid.mean()) for i in range(n)]
    if min(coverage) == 0.0:
        raise ValueError("infeasible scene: a camera sees no surface")

    # landmarks: surface points behind random valid pixels of each image
    pts = []
    for i in range(n):
        depth = scene.depth(i)
        vy, vx = np.nonzero(depth.valid)
        pick = rng.choice(len(vx), size=min(config.landmarks_per_image, len(vx)), replace=False)
        uv = np.stack([vx[pick], vy[pick]], axis=1) + rng.uniform(-0.5, 0.5, size=(len(pick), 2))
        d_ok = depth.sample_bilinear(uv)[1]
        uv = uv[d_ok]
        cam, pose = scene.cameras[i], scene.poses[i]
        rays = cam.normalized(uv) @ pose.R
        t = first_hit(scene.surfaces, pose.center, rays)
        ok = np.isfinite(t)
        pts.append(pose.center + t[ok, None] * rays[ok])
    landmarks = np.concatenate(pts) if pts else np.zeros((0, 3))
    object.__setattr__(scene, "landmarks", landmarks)
    return scene


def _grid(cam: PinholeCamera, stride: int) -> np.ndarray:
    ys, xs = np.mgrid[0 : cam.height : stride, 0 : cam.width : stride]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)


def covisible_fraction(scene: SyntheticScene, i: int, j: int, stride: int = 4) -> float:
    """Fraction of surface pixels of ``i`` (on a grid) that ``j`` also sees."""
    key = ("covis", i, j, stride)
    if key in scene._cache:
        return scene._cache[key]
    cam, pose = scene.cameras[i], scene.poses[i]
    uv = _grid(cam, stride)
    d = scene.depth(i).values[uv[:, 1].astype(int), uv[:, 0].astype(int)]
    ok = d > 0
    if not ok.any():
        out = 0.0
    else:
        X = pose.inverse().apply(cam.unproject(uv[ok], d[ok]))
        out = float(_points_visible(scene, j, X).mean())
    scene._cache[key] = out
    return out


def simulate_similarity(scene: SyntheticScene, pair, seed: int | None = None) -> float:
    """Stand-in for a learned overlap classifier score.

    Regular pairs score ``sqrt`` of their symmetric co-visible fraction;
    designated doppelganger pairs get a score drawn from the configured band.
    """
    i, j = sorted(int(x) for x in pair)
    if i == j:
        return 1.0
    if (i, j) in scene.doppelgangers:
        lo, hi = scene.config.doppelganger_band
        seed = scene.config.seed if seed is None else seed
        rng = np.random.default_rng([seed, i, j, 7])
        return float(rng.uniform(lo, hi))
    covis = min(covisible_fraction(scene, i, j), covisible_fraction(scene, j, i))
    return float(min(1.0, math.sqrt(max(covis, 0.0))))


def simulate_scores(scene: SyntheticScene) -> CandidateScores:
    triples = [(i, j, simulate_similarity(scene, (i, j))) for i, j in scene.candidates]
    return CandidateScores.from_directed(scene.images, triples)


@dataclass(frozen=True)
class NoiseModel:
    """Perturbations applied to simulated local reconstructions.

    ``rotation_deg`` is the expected rotation error angle per member;
    ``center_frac`` the RMS center error as a fraction of the star's mean
    baseline; ``depth_rel`` and ``focal_rel`` are relative standard
    deviations. ``track_px`` jitters feedforward track observations and
    ``keypoint_px`` the synthesized keypoints.
    """

    rotation_deg: float = 0.0
    center_frac: float = 0.0
    depth_rel: float = 0.0
    focal_rel: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    outlier_prob: float = 0.0
    track_px: float = 0.0
    keypoint_px: float = 0.0

    def __post_init__(self):
        values = (self.rotation_deg, self.center_frac, self.depth_rel, self.focal_rel,
                  self.outlier_prob, self.track_px, self.keypoint_px)
        if any(v < 0 for v in values):
            raise ValueError("noise parameters must be non-negative")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError("scale range must be positive and ordered")
        if self.outlier_prob > 1:
            raise ValueError("outlier probability must be at most 1")


def _hallucinated_center(scene: SyntheticScene, center: int, m: int) -> np.ndarray:
    """Where a confused model would put ``m``: inside the center's room."""
    c = scene.poses[m].center
    pair = (min(center, m), max(center, m))
    if pair in scene.doppelgangers:
        ra, rb = scene.room_of[center], scene.room_of[m]
        return c + scene.room_centers[ra] - scene.room_centers[rb]
    return c


def simulate_local_star(
    scene: SyntheticScene, star: StarGraph, noise: NoiseModel | None = None, seed: int = 0
) -> LocalStarReconstruction:
    """Simulate a local reconstruction of ``star`` in a random similarity gauge."""
    noise = noise or NoiseModel()
    members = tuple(sorted(star.members))
    if any(m < 0 or m >= scene.n_images for m in members):
        raise ValueError("star member outside the scene")
    rng = np.random.default_rng([seed, star.center])
    lo, hi = noise.scale_range
    scale = float(math.exp(rng.uniform(math.log(lo), math.log(hi)))) if hi > lo else float(lo)
    gauge = Sim3(random_rotation(rng), rng.normal(scale=scene.scale, size=3), scale)

    centers = {m: _hallucinated_center(scene, star.center, m) for m in members}
    c0 = scene.poses[star.center].center
    others = [np.linalg.norm(centers[m] - c0) for m in members if m != star.center]
    baseline = float(np.mean(others)) if others else 1.0

    axis_sigma = math.radians(noise.rotation_deg) * math.sqrt(math.pi / 8.0)
    center_sigma = noise.center_frac * baseline / math.sqrt(3.0)
    poses, cameras, depths = {}, {}, {}
    for m in members:
        true_pose = Pose.from_center(scene.poses[m].R, centers[m])
        R = exp_so3(rng.normal(scale=axis_sigma, size=3)) @ true_pose.R if axis_sigma else true_pose.R
        c = true_pose.center + (rng.normal(scale=center_sigma, size=3) if center_sigma else 0.0)
        poses[m] = gauge.to_local_pose(Pose.from_center(R, c))
        f = scene.cameras[m].focal * (1.0 + noise.focal_rel * rng.normal()) if noise.focal_rel else scene.cameras[m].focal
        cameras[m] = scene.cameras[m].with_focal(max(f, 1e-3))
        d = scene.depth(m).values * scale
        if noise.depth_rel:
            d = d * np.clip(1.0 + noise.depth_rel * rng.normal(size=d.shape), 0.1, None)
        depths[m] = DepthMap(d)

    neighbors = [m for m in members if m != star.center]
    if neighbors and noise.outlier_prob and rng.uniform() < noise.outlier_prob:
        m = neighbors[int(rng.integers(len(neighbors)))]
        c = c0 + rng.normal(scale=baseline, size=3)
        poses[m] = gauge.to_local_pose(Pose.from_center(random_rotation(rng), c))

    tracks = _star_tracks(scene, members, noise, rng, star.center)
    return LocalStarReconstruction(star.center, members, poses, cameras, depths, tracks, gauge)


def _star_tracks(scene, members, noise, rng, center) -> list[Track]:
    vis = scene.visibility()[list(members)]
    shared = np.nonzero(vis.sum(0) >= 2)[0]
    if len(shared) == 0:
        return []
    uv = np.stack([scene.project_landmarks(m)[shared] for m in members])
    if noise.track_px:
        uv = uv + rng.normal(scale=noise.track_px, size=uv.shape)
    uv = uv.tolist()
    sub = vis[:, shared]
    tracks = []
    for col in range(len(shared)):
        obs = [(m, *uv[row][col]) for row, m in enumerate(members) if sub[row, col]]
        tracks.append(Track("feedforward", tuple(obs), star=center))
    return tracks


def synthesize_keypoints(scene: SyntheticScene, noise: NoiseModel | None = None, seed: int = 0):
    """Per-image keypoints at the projections of visible landmarks.

    Returns ``{image: (ids, positions)}``; ids index ``scene.landmarks``.
    """
    noise = noise or NoiseModel()
    vis = scene.visibility()
    out = {}
    for i in range(scene.n_images):
        ids = np.nonzero(vis[i])[0]
        uv = scene.project_landmarks(i)[ids]
        if noise.keypoint_px:
            rng = np.random.default_rng([seed, i, 11])
            uv = uv + rng.normal(scale=noise.keypoint_px, size=uv.shape)
        out[i] = (ids, uv)
    return out


def classical_tracks(scene: SyntheticScene, keypoints, fraction: float = 0.25, seed: int = 0,
                     images=None) -> list[Track]:
    """Classical tracks for a random subset of landmarks, using keypoint positions."""
    rng = np.random.default_rng([seed, 13])
    allowed = set(scene.images if images is None else images)
    chosen = np.nonzero(rng.uniform(size=len(scene.landmarks)) < fraction)[0]
    per_landmark: dict[int, list] = {int(k): [] for k in chosen}
    for i in sorted(keypoints):
        if i not in allowed:
            continue
        ids, uv = keypoints[i]
        for k, p in zip(ids, uv):
            k = int(k)
            if k in per_landmark:
                per_landmark[k].append((i, p[0], p[1]))
    return [Track("classical", tuple(obs)) for k, obs in sorted(per_landmark.items()) if len(obs) >= 2]


def ground_truth_graph_pairs(scene: SyntheticScene) -> list[tuple[int, int]]:
    """Candidate pairs that genuinely share visible surface."""
    return [
        (i, j) for i, j in scene.candidates
        if (i, j) not in scene.doppelgangers and min(covisible_fraction(scene, i, j), covisible_fraction(scene, j, i)) > 0
    ]


def plane_eps(scene: SyntheticScene) -> float:
    return PLANE_EPS * scene.scale
