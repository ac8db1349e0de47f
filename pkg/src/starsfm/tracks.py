"""Track snapping and merging, priority mixing, virtual tracks, triangulation."""

from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ._validation import DegenerateError, check_unit_interval
from .geometry import PLANE_EPS, DepthMap, PinholeCamera, Pose
from .reconstruction import LocalStarReconstruction, Track


def _canonical(tracks):
    return sorted(tracks, key=lambda t: (t.kind, t.obs, t.star if t.star is not None else -1))


def snap_and_merge(tracks, keypoints, beta: float = 1.0, star_weights=None) -> list[Track]:
    """Snap observations onto keypoints within ``beta`` px and merge tracks
    that share a snapped keypoint.

    ``keypoints`` maps image id to ``(ids, positions)``. ``star_weights``
    maps ``(star, image)`` to an overlap weight used to choose between
    conflicting observations of one image in a merged track (higher wins,
    then smaller star id).
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    tracks = _canonical(tracks)
    if not tracks:
        return []
    lengths = np.array([len(t.obs) for t in tracks])
    owner = np.repeat(np.arange(len(tracks)), lengths)
    flat = np.array([o for t in tracks for o in t.obs], dtype=float)
    img = flat[:, 0].astype(int)
    uv = flat[:, 1:].copy()
    kp = np.full(len(flat), -1, dtype=int)
    for i in np.unique(img):
        if i not in keypoints:
            continue
        ids, pos = keypoints[i]
        pos = np.asarray(pos, float).reshape(-1, 2)
        if not len(pos):
            continue
        sel = np.nonzero(img == i)[0]
        dist, idx = cKDTree(pos).query(uv[sel])
        hit = dist <= beta
        kp[sel[hit]] = np.asarray(ids)[idx[hit]]
        uv[sel[hit]] = pos[idx[hit]]

    # merge: tracks are connected through shared (image, keypoint) nodes
    snapped = np.nonzero(kp >= 0)[0]
    keys = {}
    key_of = np.array([keys.setdefault((img[k], kp[k]), len(keys)) for k in snapped], dtype=int)
    n = len(tracks) + len(keys)
    adj = sparse.coo_matrix(
        (np.ones(len(snapped)), (owner[snapped], len(tracks) + key_of)), shape=(n, n)
    )
    _, group = connected_components(adj, directed=False)
    group = group[: len(tracks)]

    stars = np.array([t.star if t.star is not None else -1 for t in tracks])
    if star_weights is None:
        weight = np.zeros(len(flat))
    else:
        weight = np.array([star_weights.get((int(stars[o]), int(i)), 0.0) for o, i in zip(owner, img)])
    g = group[owner]
    # per (group, image) keep the best observation; the last lexsort key is primary
    order = np.lexsort((owner, kp < 0, stars[owner], -weight, img, g))
    first = np.ones(len(order), bool)
    first[1:] = (g[order][1:] != g[order][:-1]) | (img[order][1:] != img[order][:-1])
    best = order[first]

    out = []
    bounds = np.nonzero(np.diff(g[best]))[0] + 1
    for chunk in np.split(best, bounds):
        if len(chunk) < 2:
            continue
        head = tracks[int(owner[chunk].min())]
        out.append(
            Track(
                head.kind,
                tuple((int(img[k]), float(uv[k, 0]), float(uv[k, 1])) for k in chunk),
                head.point,
                head.star,
                tuple(int(kp[k]) for k in chunk),
            )
        )
    return _canonical(out)


def _pairs(track: Track):
    return itertools.combinations(sorted(track.images), 2)


def _mix_order(tracks):
    return sorted(tracks, key=lambda t: (-len(t.obs), min(t.images), t.obs))


def mix_tracks(classical, feedforward, virtual, pair_budget: int = 512):
    """Priority mixing: every classical track, then feedforward and virtual
    tracks that still touch an image pair with fewer than ``pair_budget``
    matches.

    Returns ``(tracks, pair_counts)``.
    """
    if pair_budget <= 0:
        raise ValueError("pair budget must be positive")
    counts: Counter = Counter()
    out = []
    for t in _mix_order(classical):
        out.append(t)
        counts.update(_pairs(t))
    for group in (feedforward, virtual):
        for t in _mix_order(group):
            pairs = list(_pairs(t))
            if any(counts[p] < pair_budget for p in pairs):
                out.append(t)
                counts.update(pairs)
    return out, counts


def _stratified_pixels(depth: DepthMap, samples: int, rng) -> np.ndarray:
    H, W = depth.height, depth.width
    valid_frac = max(float(depth.valid.mean()), 1e-9)
    cells = samples / valid_frac
    ny = max(1, int(round(math.sqrt(cells * H / W))))
    nx = max(1, int(math.ceil(cells / ny)))
    gy, gx = np.mgrid[0:ny, 0:nx]
    jitter = rng.uniform(size=(ny * nx, 2))
    x = (gx.ravel() + jitter[:, 0]) * (W - 1) / nx
    y = (gy.ravel() + jitter[:, 1]) * (H - 1) / ny
    uv = np.stack([x, y], axis=1)
    _, ok = depth.sample_bilinear(uv)
    uv = uv[ok]
    if len(uv) > samples:
        uv = uv[np.sort(rng.choice(len(uv), size=samples, replace=False))]
    return uv


def generate_virtual_tracks(
    star: LocalStarReconstruction,
    global_poses: dict[int, Pose],
    cameras: dict[int, PinholeCamera],
    scale: float,
    samples: int = 100,
    global_ratio: float = 0.1,
    rng=None,
    depth: DepthMap | None = None,
    eps: float = PLANE_EPS,
) -> list[Track]:
    """Virtual tracks from depth-lifted pixels of the star's center image.

    Each sampled pixel of the center ``l`` is lifted with the globally
    rescaled depth and placed in the world with ``l``'s global pose. It is
    then projected into every neighbor either through the star's own
    relative pose (translation divided by ``scale``) or, for a
    ``global_ratio`` fraction of the tracks, through the current global
    poses. Projections outside the image or behind the camera are kept
    (``behind`` flags the latter); projections within ``eps`` of a
    neighbor's imaging plane are dropped.
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    check_unit_interval(global_ratio, "global_ratio")
    rng = np.random.default_rng(0) if rng is None else rng
    l = star.star
    depth = depth if depth is not None else star.depths[l].scaled(1.0 / scale)
    if not depth.valid.any():
        raise DegenerateError(f"star {l}: center image has no valid depth")
    neighbors = [m for m in star.neighbors if m in global_poses and m in cameras]
    if l not in global_poses or not neighbors:
        return []
    uv = _stratified_pixels(depth, samples, rng)
    if len(uv) == 0:
        raise DegenerateError(f"star {l}: no valid depth samples")
    d, _ = depth.sample_bilinear(uv)
    cam_l = cameras[l]
    X_cam = cam_l.unproject(uv, d)
    X_world = global_poses[l].inverse().apply(X_cam)

    n = len(uv)
    n_global = int(round(global_ratio * n))
    is_global = np.zeros(n, bool)
    is_global[rng.choice(n, size=n_global, replace=False)] = True

    per_neighbor = {}
    for m in neighbors:
        rel = star.relative(l, m)
        local = Pose(rel.R, rel.t / scale)
        x_local = local.apply(X_cam)
        x_global = global_poses[m].apply(X_world)
        x = np.where(is_global[:, None], x_global, x_local)
        uv_m, _ = cameras[m].project(x, eps=-np.inf)
        keep = np.abs(x[:, 2]) >= eps
        per_neighbor[m] = (uv_m, keep, x[:, 2] < 0)

    tracks = []
    for k in range(n):
        obs = [(l, uv[k, 0], uv[k, 1])]
        behind = [False]
        for m in neighbors:
            uv_m, keep, back = per_neighbor[m]
            if keep[k]:
                obs.append((m, uv_m[k, 0], uv_m[k, 1]))
                behind.append(bool(back[k]))
        if len(obs) < 2:
            continue
        order = np.argsort([o[0] for o in obs])
        tracks.append(
            Track(
                "virtual-global" if is_global[k] else "virtual-local",
                tuple(obs[o] for o in order),
                tuple(X_world[k]),
                l,
                behind=tuple(behind[o] for o in order),
            )
        )
    return tracks


def _projection_matrix(pose: Pose, cam: PinholeCamera) -> np.ndarray:
    K = np.array([[cam.focal, 0, cam.cx], [0, cam.focal, cam.cy], [0, 0, 1.0]])
    return K @ np.hstack([pose.R, pose.t[:, None]])


def triangulate(track: Track, poses: dict[int, Pose], cameras: dict[int, PinholeCamera],
                min_parallax: float = 1e-4) -> np.ndarray:
    """Linear (DLT) triangulation followed by one Gauss-Newton polish of the
    reprojection error. Cheirality is not enforced."""
    obs = [(i, u, v) for i, u, v in track.obs if i in poses and i in cameras]
    if len(obs) < 2:
        raise DegenerateError("need at least two posed observations")
    centers = np.array([poses[i].center for i, _, _ in obs])
    spread = np.max(np.linalg.norm(centers[:, None] - centers[None], axis=-1))
    scale = max(np.max(np.linalg.norm(centers, axis=1)), 1.0)
    if spread <= 1e-12 * scale:
        raise DegenerateError("camera centers coincide")
    rows = []
    for i, u, v in obs:
        P = _projection_matrix(poses[i], cameras[i])
        r1, r2 = u * P[2] - P[0], v * P[2] - P[1]
        rows += [r1 / np.linalg.norm(r1), r2 / np.linalg.norm(r2)]
    _, _, vt = np.linalg.svd(np.array(rows))
    Xh = vt[-1]
    if abs(Xh[3]) < 1e-14:
        raise DegenerateError("point at infinity")
    X = Xh[:3] / Xh[3]

    rays = X[None] - centers
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    cosines = np.clip(rays @ rays.T, -1.0, 1.0)
    if np.arccos(np.min(cosines)) < min_parallax:
        raise DegenerateError("insufficient parallax")

    J, r = [], []
    for i, u, v in obs:
        pose, cam = poses[i], cameras[i]
        x = pose.apply(X)
        if abs(x[2]) < PLANE_EPS:
            continue
        z = x[2]
        r += [cam.focal * x[0] / z + cam.cx - u, cam.focal * x[1] / z + cam.cy - v]
        dp = cam.focal * np.array([[1 / z, 0, -x[0] / z**2], [0, 1 / z, -x[1] / z**2]])
        J.append(dp @ pose.R)
    if len(r) >= 4:
        J = np.vstack(J)
        step = np.linalg.lstsq(J, -np.array(r), rcond=None)[0]
        X = X + step
    return X
