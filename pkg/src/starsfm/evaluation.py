"""Pairwise pose errors and AUC of the recall curve."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import geodesic_distance
from .reconstruction import GlobalReconstruction

AUC_THRESHOLDS = (1, 3, 5, 10, 20, 30)


def _scene_scale(recon: GlobalReconstruction, images) -> float:
    c = np.array([recon.poses[i].center for i in images])
    return float(np.max(np.linalg.norm(c - c.mean(0), axis=1))) if len(c) else 0.0


def _direction_error(a, b, tiny_a, tiny_b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    small_a, small_b = na < tiny_a, nb < tiny_b
    if small_a and small_b:
        return 0.0
    if small_a or small_b:
        return math.pi
    return float(math.atan2(np.linalg.norm(np.cross(a, b)), a @ b))


def pairwise_pose_errors(estimate: GlobalReconstruction, truth: GlobalReconstruction) -> dict:
    """Angular error (radians) per unordered pair of ground-truth images.

    The error of a pair is the larger of its relative-rotation error and the
    angle between relative translation directions. Pairs with an image
    missing from ``estimate`` score ``pi``.
    """
    images = sorted(truth.poses)
    common = [i for i in images if i in estimate.poses]
    if len(common) < 2:
        raise ValueError("need at least two commonly registered images")
    tiny_e = 1e-9 * max(_scene_scale(estimate, common), 1e-300)
    tiny_t = 1e-9 * max(_scene_scale(truth, common), 1e-300)
    out = {}
    for a, i in enumerate(images):
        for j in images[a + 1 :]:
            if i not in estimate.poses or j not in estimate.poses:
                out[(i, j)] = math.pi
                continue
            pe_i, pe_j = estimate.poses[i], estimate.poses[j]
            pt_i, pt_j = truth.poses[i], truth.poses[j]
            rot = geodesic_distance(pe_j.R @ pe_i.R.T, pt_j.R @ pt_i.R.T)
            # relative translation of i -> j, i.e. R_j (c_i - c_j)
            te = pe_j.R @ (pe_i.center - pe_j.center)
            tt = pt_j.R @ (pt_i.center - pt_j.center)
            out[(i, j)] = max(rot, _direction_error(te, tt, tiny_e, tiny_t))
    return out


def auc_at(errors, threshold_deg: float) -> float:
    """Area under the recall curve up to ``threshold_deg``, in percent.

    ``errors`` are in radians. Recall uses the strict comparison ``e < t``;
    the integral of a step recall has the closed form
    ``sum(max(0, X - e)) / (N X)``.
    """
    if not threshold_deg > 0:
        raise ValueError("threshold must be positive")
    e = np.degrees(np.asarray(list(errors.values()) if isinstance(errors, dict) else errors, float))
    if e.size == 0:
        raise ValueError("empty error list")
    return float(100.0 * np.sum(np.clip(threshold_deg - e, 0.0, None)) / (e.size * threshold_deg))


def auc_table(errors, thresholds=AUC_THRESHOLDS) -> dict[str, float]:
    return {str(t): auc_at(errors, t) for t in thresholds}


@dataclass
class EvalReport:
    auc: dict
    errors: dict = field(default_factory=dict)
    radius: int | None = None
    fiedler: float | None = None
    timings: dict | None = None

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else float("nan")

    def to_json(self) -> dict:
        out = {"auc": self.auc, "radius": self.radius, "fiedler": self.fiedler}
        if self.timings is not None:
            out["timings"] = self.timings
        out["max_error"] = self.max_error if self.errors else None
        out["pairs"] = [[i, j, e] for (i, j), e in sorted(self.errors.items())]
        return out

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def evaluate(estimate, truth, thresholds=AUC_THRESHOLDS, stats=None, timings=None) -> EvalReport:
    errors = pairwise_pose_errors(estimate, truth)
    return EvalReport(
        auc_table(errors, thresholds),
        errors,
        None if stats is None else stats.radius,
        None if stats is None else stats.fiedler,
        timings,
    )


def align_similarity(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares similarity ``dst ~ s R src + t`` between point sets (Umeyama)."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3 or len(src) < 2:
        raise ValueError("need matching (N, 3) point sets with N >= 2")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    U, S, Vt = np.linalg.svd(xd.T @ xs / len(src))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    var = np.mean(np.sum(xs**2, axis=1))
    s = float(np.trace(np.diag(S) @ D) / var) if var > 0 else 1.0
    return s, R, mu_d - s * R @ mu_s


def wrong_room_cameras(estimate, truth, room_of, frac: float = 0.1) -> list[int]:
    """Registered cameras that land near another room after alignment to truth.

    ``room_of`` maps image -> room label; labels other than rooms (e.g. a
    bridge) still count as rooms of their own. A camera is flagged when its
    aligned center lies within ``frac`` of the scene diameter of some truth
    center belonging to a different room.
    """
    images = sorted(i for i in estimate.poses if i in truth.poses)
    if len(images) < 3:
        return []
    est = np.array([estimate.poses[i].center for i in images])
    ref = np.array([truth.poses[i].center for i in images])
    s, R, t = align_similarity(est, ref)
    aligned = s * est @ R.T + t
    all_truth = np.array([truth.poses[i].center for i in sorted(truth.poses)])
    labels = np.array([room_of[i] for i in sorted(truth.poses)])
    diam = float(np.max(np.linalg.norm(all_truth[:, None] - all_truth[None], axis=-1)))
    out = []
    for i, c in zip(images, aligned):
        other = all_truth[labels != room_of[i]]
        if len(other) and np.min(np.linalg.norm(other - c, axis=1)) < frac * diam:
            out.append(i)
    return out
