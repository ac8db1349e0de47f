"""Depth-consistency overlap inside each star and overlap-based edge filtering."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import DisconnectedError
from .geometry import PLANE_EPS
from .reconstruction import LocalStarReconstruction
from .viewgraph import UnionFind, ViewGraph, _key


def forward_backward_errors(star: LocalStarReconstruction, i: int, j: int, pixels, eps: float = PLANE_EPS):
    """Round-trip reprojection error ``i -> j -> i`` for an ``(N, 2)`` pixel array.

    Returns ``(errors, valid)``. A pixel is invalid when its own depth is
    invalid, when it lands outside or behind ``j``, or when the depth
    sampled in ``j`` is invalid.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    cam_i, cam_j = star.cameras[i], star.cameras[j]
    rel = star.relative(i, j)
    back = rel.inverse()

    d_i, ok = star.depths[i].sample_bilinear(pixels)
    X_i = cam_i.unproject(pixels, d_i)
    uv_j, front = cam_j.project(rel.apply(X_i), eps)
    ok &= front
    uv_j = np.where(ok[:, None], uv_j, -1.0)
    d_j, ok_j = star.depths[j].sample_bilinear(uv_j)
    ok &= ok_j
    X_j = cam_j.unproject(uv_j, d_j)
    uv_back, front_back = cam_i.project(back.apply(X_j), eps)
    ok &= front_back
    err = np.linalg.norm(uv_back - pixels, axis=1)
    return np.where(ok, err, np.inf), ok


def forward_backward_error(star, i, j, pixel, eps: float = PLANE_EPS) -> float | None:
    """Scalar form; ``None`` marks an invalid pixel."""
    err, ok = forward_backward_errors(star, i, j, [pixel], eps)
    return float(err[0]) if ok[0] else None


def sample_grid(width: int, height: int, stride: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height:stride, 0:width:stride]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)


def raw_overlap(star: LocalStarReconstruction, i: int, j: int, tau: float = 3.0, stride: int = 4) -> float:
    """Fraction of grid pixels of ``i`` passing the depth-consistency check into ``j``.

    Invalid pixels count as failures, so the ratio is normalized by the
    whole sampled image.
    """
    if not tau > 0 or stride < 1:
        raise ValueError("tau must be positive and stride at least 1")
    if i == j:
        return 1.0
    cam = star.cameras[i]
    grid = sample_grid(cam.width, cam.height, stride)
    err, ok = forward_backward_errors(star, i, j, grid)
    return float(np.count_nonzero(ok & (err < tau))) / len(grid)


def transitive_overlap(raw) -> np.ndarray:
    """Max-product path closure of an overlap matrix.

    Entry ``(i, j)`` is the largest product of ratios along any path from
    ``i`` to ``j``; a shortest-path problem in ``-log`` space, solved here by
    Floyd-Warshall in product form.
    """
    o = np.array(raw, dtype=float)
    if o.ndim != 2 or o.shape[0] != o.shape[1]:
        raise ValueError("overlap matrix must be square")
    if np.any(o < 0) or np.any(o > 1):
        raise ValueError("overlap ratios must lie in [0, 1]")
    np.fill_diagonal(o, 1.0)
    for k in range(o.shape[0]):
        o = np.maximum(o, o[:, k, None] * o[None, k, :])
    return o


@dataclass
class OverlapResult:
    star: int
    members: tuple[int, ...]
    raw: np.ndarray
    transitive: np.ndarray
    tau: float

    @property
    def symmetric_raw(self) -> np.ndarray:
        return np.minimum(self.raw, self.raw.T)

    def pair(self, i: int, j: int) -> float:
        a, b = self.members.index(i), self.members.index(j)
        return float(self.transitive[a, b])

    def to_json(self) -> dict:
        return {
            "star": self.star,
            "members": list(self.members),
            "tau": self.tau,
            "raw": self.raw.tolist(),
            "transitive": self.transitive.tolist(),
        }

    @classmethod
    def from_json(cls, d) -> OverlapResult:
        return cls(int(d["star"]), tuple(d["members"]), np.array(d["raw"]), np.array(d["transitive"]), float(d["tau"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> OverlapResult:
        return cls.from_json(json.loads(Path(path).read_text()))


def star_overlap(star: LocalStarReconstruction, tau: float = 3.0, stride: int = 4) -> OverlapResult:
    """Directed raw ratios for all member pairs, then the closure of their
    ``min``-symmetrized version."""
    members = star.members
    n = len(members)
    raw = np.eye(n)
    for a in range(n):
        for b in range(n):
            if a != b:
                raw[a, b] = raw_overlap(star, members[a], members[b], tau, stride)
    trans = transitive_overlap(np.minimum(raw, raw.T))
    return OverlapResult(star.star, members, raw, trans, tau)


def compute_overlaps(stars, tau: float = 3.0, stride: int = 4, workers: int = 1) -> list[OverlapResult]:
    """Per-star overlaps; stars are independent and may run concurrently."""
    if workers <= 1:
        return [star_overlap(s, tau, stride) for s in stars]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: star_overlap(s, tau, stride), stars))


def pair_weights(overlaps) -> dict[tuple[int, int], float]:
    """Per image pair, the largest transitive overlap over all stars."""
    out: dict[tuple[int, int], float] = {}
    for res in overlaps:
        m = res.members
        for a in range(len(m)):
            for b in range(a + 1, len(m)):
                k = _key(m[a], m[b])
                w = float(min(res.transitive[a, b], res.transitive[b, a]))
                out[k] = max(out.get(k, 0.0), w)
    return out


def _connected_without(vertices, edges, drop) -> bool:
    uf = UnionFind(vertices)
    n = len(vertices)
    for e in edges:
        if e != drop and uf.union(*e):
            n -= 1
    return n == 1


def filter_edges(g: ViewGraph, overlaps, min_overlap: float = 0.05) -> ViewGraph:
    """Drop low-overlap edges, weakest first, unless that disconnects the graph.

    Surviving edges carry their merged overlap as weight; edges no star
    covers get weight 0.
    """
    if not g.is_connected():
        raise DisconnectedError("filter_edges needs a connected view graph")
    weights = pair_weights(overlaps)
    out = g.copy()
    for e in out.edges:
        out.overlap[e] = weights.get(e, 0.0)
    weak = sorted((w, e) for e, w in out.overlap.items() if w < min_overlap)
    for w, e in weak:
        if _connected_without(out.vertices, out.edges, e):
            out.remove_edge(*e)
    assert out.is_connected()
    return out
