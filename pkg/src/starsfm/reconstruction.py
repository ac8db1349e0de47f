"""Data containers shared across stages and their file formats.

Star bundle directory layout (the ingestion format for local reconstructions)::

    star_<l>/meta.json      member ids, poses (quaternion + translation), cameras
    star_<l>/depth_<i>.dpth binary depth raster per member
    star_<l>/tracks.json    feedforward tracks
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DepthMap, PinholeCamera, Pose, quat_to_matrix, read_depth, write_depth

TRACK_CLASSES = ("classical", "feedforward", "virtual-local", "virtual-global")


@dataclass(frozen=True)
class Track:
    """Observations of one 3D point, at most one per image.

    ``keypoints`` holds the snapped keypoint id per observation (or -1).
    ``star`` records which local reconstruction produced the track.
    """

    kind: str
    obs: tuple[tuple[int, float, float], ...]
    point: tuple[float, float, float] | None = None
    star: int | None = None
    keypoints: tuple[int, ...] | None = None
    behind: tuple[bool, ...] | None = None

    def __post_init__(self):
        if self.kind not in TRACK_CLASSES:
            raise ValueError(f"unknown track class {self.kind!r}")
        obs = tuple((int(i), float(u), float(v)) for i, u, v in self.obs)
        if len(obs) < 2:
            raise ValueError("a track needs at least two observations")
        images = [o[0] for o in obs]
        if len(set(images)) != len(images):
            raise ValueError("a track may observe each image at most once")
        object.__setattr__(self, "obs", obs)
        if self.point is not None:
            object.__setattr__(self, "point", tuple(float(x) for x in self.point))
        if self.kind.startswith("virtual") and self.point is None:
            raise ValueError("virtual tracks carry their point")

    @property
    def images(self) -> tuple[int, ...]:
        return tuple(o[0] for o in self.obs)

    @property
    def is_virtual(self) -> bool:
        return self.kind.startswith("virtual")

    @property
    def loss_class(self) -> str:
        return "arctan" if self.is_virtual else "huber"

    def pixel(self, image: int) -> np.ndarray:
        for i, u, v in self.obs:
            if i == image:
                return np.array([u, v])
        raise KeyError(image)

    def to_json(self) -> dict:
        out = {
            "class": self.kind,
            "point": list(self.point) if self.point is not None else None,
            "obs": [{"img": i, "u": u, "v": v} for i, u, v in self.obs],
        }
        if self.star is not None:
            out["star"] = self.star
        return out

    @classmethod
    def from_json(cls, d: dict) -> Track:
        return cls(
            d["class"],
            tuple((o["img"], o["u"], o["v"]) for o in d["obs"]),
            d.get("point"),
            d.get("star"),
        )


def save_tracks(path, tracks) -> None:
    Path(path).write_text(json.dumps([t.to_json() for t in tracks]))


def load_tracks(path) -> list[Track]:
    return [Track.from_json(d) for d in json.loads(Path(path).read_text())]


@dataclass(frozen=True)
class Sim3:
    """``x_local = scale * R @ x_world + t``."""

    R: np.ndarray
    t: np.ndarray
    scale: float

    def apply(self, X) -> np.ndarray:
        return self.scale * np.asarray(X) @ self.R.T + self.t

    def to_local_pose(self, pose: Pose) -> Pose:
        return Pose.from_center(pose.R @ self.R.T, self.apply(pose.center))

    def to_world_pose(self, pose: Pose) -> Pose:
        c = self.R.T @ (pose.center - self.t) / self.scale
        return Pose.from_center(pose.R @ self.R, c)

    def to_json(self) -> dict:
        return {"R": self.R.tolist(), "t": self.t.tolist(), "scale": self.scale}

    @classmethod
    def from_json(cls, d) -> Sim3:
        return cls(np.array(d["R"]), np.array(d["t"]), float(d["scale"]))


@dataclass
class LocalStarReconstruction:
    """One star's local reconstruction in its own (arbitrary) gauge."""

    star: int
    members: tuple[int, ...]
    poses: dict[int, Pose]
    cameras: dict[int, PinholeCamera]
    depths: dict[int, DepthMap]
    tracks: list[Track] = field(default_factory=list)
    gauge: Sim3 | None = None

    def __post_init__(self):
        self.members = tuple(sorted(int(m) for m in self.members))
        if self.star not in self.members:
            raise ValueError("star center must be a member")
        for name, d in (("poses", self.poses), ("cameras", self.cameras), ("depths", self.depths)):
            if set(d) != set(self.members):
                raise ValueError(f"{name} must cover exactly the star members")
        for m in self.members:
            cam, depth = self.cameras[m], self.depths[m]
            if (depth.width, depth.height) != (cam.width, cam.height):
                raise ValueError(f"depth map of image {m} does not match its camera")

    @property
    def neighbors(self) -> tuple[int, ...]:
        return tuple(m for m in self.members if m != self.star)

    def relative(self, i: int, j: int) -> Pose:
        return self.poses[j].compose(self.poses[i].inverse())

    def canonical(self) -> LocalStarReconstruction:
        """The star exactly as it reads back from disk: quaternion poses and
        float32 depths."""
        poses = {m: _pose_from_json(_pose_json(m, p)) for m, p in self.poses.items()}
        depths = {m: d.as_float32() for m, d in self.depths.items()}
        tracks = [Track.from_json(t.to_json()) for t in self.tracks]
        return LocalStarReconstruction(self.star, self.members, poses, self.cameras, depths, tracks, self.gauge)

    def with_depths(self, depths: dict[int, DepthMap]) -> LocalStarReconstruction:
        return LocalStarReconstruction(
            self.star, self.members, self.poses, self.cameras, depths, self.tracks, self.gauge
        )


def _pose_json(i, pose: Pose) -> dict:
    return {"id": i, "q": pose.quat().tolist(), "t": pose.t.tolist()}


def _pose_from_json(d) -> Pose:
    return Pose(quat_to_matrix(d["q"]), d["t"])


def save_star(root, star: LocalStarReconstruction, include_gauge: bool = True) -> Path:
    d = Path(root) / f"star_{star.star}"
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "star": star.star,
        "members": list(star.members),
        "poses": [_pose_json(m, star.poses[m]) for m in star.members],
        "focals": {str(m): star.cameras[m].focal for m in star.members},
        "cameras": {
            str(m): {
                "width": star.cameras[m].width,
                "height": star.cameras[m].height,
                "cx": star.cameras[m].cx,
                "cy": star.cameras[m].cy,
            }
            for m in star.members
        },
    }
    if include_gauge and star.gauge is not None:
        meta["gauge"] = star.gauge.to_json()
    (d / "meta.json").write_text(json.dumps(meta, indent=1))
    for m in star.members:
        write_depth(d / f"depth_{m}.dpth", star.depths[m])
    save_tracks(d / "tracks.json", star.tracks)
    return d


def load_star(path) -> LocalStarReconstruction:
    d = Path(path)
    meta = json.loads((d / "meta.json").read_text())
    members = [int(m) for m in meta["members"]]
    poses = {int(p["id"]): _pose_from_json(p) for p in meta["poses"]}
    cameras = {}
    for m in members:
        c = meta["cameras"][str(m)]
        cameras[m] = PinholeCamera(meta["focals"][str(m)], c["width"], c["height"], c["cx"], c["cy"])
    depths = {m: read_depth(d / f"depth_{m}.dpth") for m in members}
    tracks_file = d / "tracks.json"
    tracks = load_tracks(tracks_file) if tracks_file.exists() else []
    tracks = [t if t.star is not None else Track(t.kind, t.obs, t.point, int(meta["star"])) for t in tracks]
    gauge = Sim3.from_json(meta["gauge"]) if "gauge" in meta else None
    return LocalStarReconstruction(int(meta["star"]), tuple(members), poses, cameras, depths, tracks, gauge)


def load_star_bundles(root) -> list[LocalStarReconstruction]:
    dirs = sorted(Path(root).glob("star_*"), key=lambda p: int(p.name.split("_")[1]))
    return [load_star(p) for p in dirs]


@dataclass
class GlobalReconstruction:
    """Registered cameras, intrinsics, per-star scales and scene points."""

    poses: dict[int, Pose]
    cameras: dict[int, PinholeCamera] = field(default_factory=dict)
    camera_of: dict[int, int] = field(default_factory=dict)
    scales: dict[int, float] = field(default_factory=dict)
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.poses = {int(k): self.poses[k] for k in sorted(self.poses)}
        for i in self.poses:
            self.camera_of.setdefault(i, i)
        for p in self.poses.values():
            if not (np.all(np.isfinite(p.R)) and np.all(np.isfinite(p.t))):
                raise ValueError("non-finite pose in reconstruction")
        if any(s <= 0 for s in self.scales.values()):
            raise ValueError("star scales must be positive")

    @property
    def registered(self) -> list[int]:
        return list(self.poses)

    @property
    def focals(self) -> dict[int, float]:
        out = {}
        for i, cam in self.cameras.items():
            out.setdefault(self.camera_of.get(i, i), cam.focal)
        return dict(sorted(out.items()))

    def centers(self) -> np.ndarray:
        return np.array([p.center for p in self.poses.values()])

    def to_json(self) -> dict:
        cams = {}
        for i, cam in self.cameras.items():
            cams.setdefault(
                self.camera_of.get(i, i),
                {"id": self.camera_of.get(i, i), "focal": cam.focal, "width": cam.width,
                 "height": cam.height, "cx": cam.cx, "cy": cam.cy},
            )
        return {
            "images": [
                {"id": i, "camera": self.camera_of.get(i, i), "quaternion": p.quat().tolist(),
                 "center": p.center.tolist()}
                for i, p in self.poses.items()
            ],
            "cameras": [cams[k] for k in sorted(cams)],
            "stars": [{"id": k, "scale": s} for k, s in sorted(self.scales.items())],
            "points": np.asarray(self.points).tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> GlobalReconstruction:
        cams = {c["id"]: c for c in d.get("cameras", [])}
        poses, cameras, camera_of = {}, {}, {}
        for im in d["images"]:
            i = int(im["id"])
            poses[i] = Pose.from_center(quat_to_matrix(im["quaternion"]), im["center"])
            camera_of[i] = int(im.get("camera", i))
            c = cams.get(camera_of[i])
            if c is not None:
                cameras[i] = PinholeCamera(c["focal"], c["width"], c["height"], c["cx"], c["cy"])
        scales = {int(s["id"]): float(s["scale"]) for s in d.get("stars", [])}
        points = np.array(d.get("points", []), dtype=float).reshape(-1, 3)
        return cls(poses, cameras, camera_of, scales, points)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> GlobalReconstruction:
        return cls.from_json(json.loads(Path(path).read_text()))
