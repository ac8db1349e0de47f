"""Bundle adjustment over classical, feedforward and virtual tracks.

Poses use left perturbations ``R <- exp(d) R`` and camera centers;
``x_cam = R (X - c)``. Virtual-track points are constants. The gauge is
fixed by freezing the lowest-id pose and constraining the second-lowest
camera center to a sphere around the first one.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from sklearn.base import BaseEstimator

from ._validation import DegenerateError, DisconnectedError, check_fitted
from .geometry import PLANE_EPS, PinholeCamera, Pose, RobustLoss, exp_so3_batch, hat_batch
from .reconstruction import GlobalReconstruction, Track
from .tracks import triangulate

LOSS_ORDER = ("huber", "arctan")


# -- residual model -------------------------------------------------------------


def project_batch(R, C, f, pp, X):
    """Pixels of points ``X`` in cameras ``(R, C, f, pp)``; all arrays are
    per-observation. Returns ``(pixels, camera-frame points)``."""
    x = np.einsum("nab,nb->na", R, X - C)
    z = x[:, 2:3]
    # points on an imaging plane give inf/nan here; callers mask them
    with np.errstate(divide="ignore", invalid="ignore"):
        return f[:, None] * x[:, :2] / z + pp, x


def reprojection_jacobians(R, C, f, pp, X):
    """Per-observation Jacobians of the projected pixel w.r.t. the rotation
    tangent (left), the center, the focal and the point.

    Returns ``(J_rot (N,2,3), J_c (N,2,3), J_f (N,2), J_X (N,2,3))``.
    """
    x = np.einsum("nab,nb->na", R, X - C)
    z = x[:, 2]
    dp = np.zeros((len(x), 2, 3))
    dp[:, 0, 0] = f / z
    dp[:, 1, 1] = f / z
    dp[:, 0, 2] = -f * x[:, 0] / z**2
    dp[:, 1, 2] = -f * x[:, 1] / z**2
    J_rot = -dp @ hat_batch(x)
    J_X = dp @ R
    return J_rot, -J_X, x[:, :2] / z[:, None], J_X


def reprojection_residual(pose: Pose, camera: PinholeCamera, X, uv) -> np.ndarray:
    """Single-observation residual ``project(pose, camera, X) - uv``."""
    R, C = pose.R[None], pose.center[None]
    pix, _ = project_batch(R, C, np.array([camera.focal]), camera.principal_point[None], np.asarray(X)[None])
    return pix[0] - np.asarray(uv, float)


def robust_gradient(loss: RobustLoss, r, J) -> np.ndarray:
    """Gradient of ``rho(|r|^2)`` given the residual ``r`` and its Jacobian."""
    _, d = loss.evaluate(float(r @ r))
    return 2.0 * float(d) * J.T @ r


# -- problem --------------------------------------------------------------------


@dataclass
class BAProblem:
    """Flattened bundle-adjustment problem.

    ``poses``/``cameras`` are keyed by image id; ``camera_of`` groups images
    sharing intrinsics. Non-virtual tracks need an entry in ``points``
    (same order as ``tracks``; ``None`` for virtual tracks).
    """

    poses: dict[int, Pose]
    cameras: dict[int, PinholeCamera]
    tracks: list[Track]
    points: list = field(default_factory=list)
    camera_of: dict[int, int] = field(default_factory=dict)
    scales: dict[int, float] = field(default_factory=dict)
    eps: float = PLANE_EPS

    def __post_init__(self):
        self.images = sorted(self.poses)
        if len(self.images) < 2:
            raise DegenerateError("bundle adjustment needs at least two images")
        missing = [i for i in self.images if i not in self.cameras]
        if missing:
            raise ValueError(f"no camera for images {missing}")
        if len(self.points) != len(self.tracks):
            raise ValueError("points must align with tracks")
        self.camera_of = {i: int(self.camera_of.get(i, i)) for i in self.images}
        self.camera_ids = sorted(set(self.camera_of.values()))
        index = {v: k for k, v in enumerate(self.images)}
        cam_index = {c: k for k, c in enumerate(self.camera_ids)}

        img, uv, pidx, fixed, cls, tid = [], [], [], [], [], []
        variable_points = []
        for k, (t, p) in enumerate(zip(self.tracks, self.points)):
            if t.is_virtual:
                X = np.asarray(t.point, float)
                slot = -1
            else:
                if p is None:
                    raise ValueError(f"track {k} has no initial point")
                X = np.asarray(p, float)
                slot = len(variable_points)
                variable_points.append(X)
            for i, u, v in t.obs:
                if i not in index:
                    raise ValueError(f"track {k} observes unknown image {i}")
                img.append(index[i])
                uv.append((u, v))
                pidx.append(slot)
                fixed.append(X)
                cls.append(LOSS_ORDER.index(t.loss_class))
                tid.append(k)
        if not img:
            raise ValueError("problem has no observations")
        self.obs_image = np.array(img, dtype=int)
        self.obs_uv = np.array(uv, dtype=float)
        self.obs_point = np.array(pidx, dtype=int)
        self.obs_fixed = np.array(fixed, dtype=float).reshape(-1, 3)
        self.obs_class = np.array(cls, dtype=int)
        self.obs_track = np.array(tid, dtype=int)
        self.obs_cam = np.array([cam_index[self.camera_of[self.images[k]]] for k in self.obs_image], dtype=int)
        self.points0 = np.array(variable_points, dtype=float).reshape(-1, 3)
        self.R0 = np.array([self.poses[i].R for i in self.images])
        self.C0 = np.array([self.poses[i].center for i in self.images])
        self.f0 = np.array([self.cameras[min(i for i in self.images if self.camera_of[i] == c)].focal
                            for c in self.camera_ids])
        self.pp = np.array([self.cameras[i].principal_point for i in self.images])
        if not (np.all(np.isfinite(self.points0)) and np.all(np.isfinite(self.obs_fixed))
                and np.all(np.isfinite(self.C0))):
            raise ValueError("non-finite initial values")
        self._check_connected()

    def _check_connected(self):
        # images are linked through shared tracks
        n_img = len(self.images)
        n = n_img + len(self.tracks)
        adj = sparse.coo_matrix(
            (np.ones(len(self.obs_image)), (self.obs_image, n_img + self.obs_track)), shape=(n, n)
        )
        _, labels = connected_components(adj, directed=False)
        if len(set(labels[:n_img])) != 1:
            raise DisconnectedError("bundle adjustment problem is not connected over its images")

    @property
    def n_observations(self) -> int:
        return len(self.obs_image)


def build_problem(recon: GlobalReconstruction, tracks, min_parallax: float = 1e-4,
                  eps: float = PLANE_EPS) -> BAProblem:
    """Restrict tracks to registered images, triangulate non-virtual ones and
    drop tracks that are degenerate or behind every camera."""
    poses, cameras = recon.poses, recon.cameras
    kept, points = [], []
    for t in tracks:
        obs = tuple(o for o in t.obs if o[0] in poses)
        if len(obs) < 2:
            continue
        if t.is_virtual:
            X = np.asarray(t.point)
            z = np.array([poses[i].apply(X)[2] for i, _, _ in obs])
            obs = tuple(o for o, zz in zip(obs, z) if abs(zz) >= eps)
            if len(obs) < 2:
                continue
            kept.append(Track(t.kind, obs, t.point, t.star))
            points.append(None)
            continue
        t = Track(t.kind, obs, t.point, t.star)
        try:
            X = triangulate(t, poses, cameras, min_parallax)
        except DegenerateError:
            continue
        z = np.array([poses[i].apply(X)[2] for i, _, _ in obs])
        if np.all(z <= eps):
            continue
        obs = tuple(o for o, zz in zip(obs, z) if zz > eps)
        if len(obs) < 2:
            continue
        kept.append(Track(t.kind, obs, t.point, t.star))
        points.append(X)
    return BAProblem(dict(poses), dict(cameras), kept, points, dict(recon.camera_of), dict(recon.scales), eps)


# -- solver ---------------------------------------------------------------------


@dataclass
class _State:
    R: np.ndarray
    C: np.ndarray
    f: np.ndarray
    X: np.ndarray


class BundleAdjuster(BaseEstimator):
    """Levenberg-Marquardt bundle adjustment with point elimination.

    Costs are ``sum rho_class(|r|^2)`` with Huber for classical and
    feedforward tracks and Arctan for virtual tracks. Residuals and
    Jacobians are evaluated in fixed-size chunks (optionally on
    ``workers`` threads) and reduced in chunk order, so results do not
    depend on the thread count.

    Fitted attributes: ``reconstruction_``, ``report_``, ``cost_history_``.
    """

    def __init__(self, huber_scale=1.0, arctan_scale=4.0, max_iter=100, function_tol=1e-12,
                 gradient_tol=1e-12, cost_tol=1e-16, initial_damping=1e-4, refine_focals=True,
                 workers=1, chunk_size=4096):
        self.huber_scale = huber_scale
        self.arctan_scale = arctan_scale
        self.max_iter = max_iter
        self.function_tol = function_tol
        self.gradient_tol = gradient_tol
        self.cost_tol = cost_tol
        self.initial_damping = initial_damping
        self.refine_focals = refine_focals
        self.workers = workers
        self.chunk_size = chunk_size

    # ---- evaluation

    def _losses(self):
        return (RobustLoss("huber", self.huber_scale), RobustLoss("arctan", self.arctan_scale))

    def _chunks(self, n):
        return [slice(a, min(a + self.chunk_size, n)) for a in range(0, n, self.chunk_size)]

    def _map(self, fn, n):
        chunks = self._chunks(n)
        if self.workers <= 1 or len(chunks) == 1:
            return [fn(c) for c in chunks]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, chunks))

    def _gather(self, P: BAProblem, st: _State, sl):
        img = P.obs_image[sl]
        pidx = P.obs_point[sl]
        X = np.where((pidx >= 0)[:, None], st.X[np.maximum(pidx, 0)] if len(st.X) else 0.0, P.obs_fixed[sl])
        return st.R[img], st.C[img], st.f[P.obs_cam[sl]], P.pp[img], X

    def _residuals(self, P, st, sl):
        R, C, f, pp, X = self._gather(P, st, sl)
        pix, x = project_batch(R, C, f, pp, X)
        r = pix - P.obs_uv[sl]
        bad = np.abs(x[:, 2]) < P.eps
        r[bad] = np.nan
        return r

    def _cost_terms(self, P, st):
        r = np.concatenate(self._map(lambda sl: self._residuals(P, st, sl), P.n_observations))
        s = np.sum(r * r, axis=1)
        value = np.zeros(len(s))
        deriv = np.zeros(len(s))
        ok = np.isfinite(s)
        for k, loss in enumerate(self._losses()):
            sel = ok & (P.obs_class == k)
            value[sel], deriv[sel] = loss.evaluate(s[sel])
        value[~ok] = np.inf
        return r, value, deriv

    def _linearize(self, P, st, sl):
        R, C, f, pp, X = self._gather(P, st, sl)
        return reprojection_jacobians(R, C, f, pp, X)

    # ---- parameter layout

    def _layout(self, P, st):
        n_img = len(P.images)
        col_rot = np.full((n_img, 3), -1, dtype=int)
        col_c = np.full((n_img, 3), -1, dtype=int)
        k = 0
        for a in range(1, n_img):
            col_rot[a] = np.arange(k, k + 3)
            k += 3
            m = 2 if a == 1 else 3
            col_c[a, :m] = np.arange(k, k + m)
            k += m
        col_f = np.full(len(P.camera_ids), -1, dtype=int)
        if self.refine_focals:
            col_f[:] = np.arange(k, k + len(P.camera_ids))
            k += len(P.camera_ids)
        return col_rot, col_c, col_f, k

    @staticmethod
    def _sphere_basis(st):
        d = st.C[1] - st.C[0]
        n = d / np.linalg.norm(d)
        u, _, _ = np.linalg.svd(n[:, None])
        return u[:, 1:]

    def _assemble(self, P, st, r, deriv, layout):
        col_rot, col_c, col_f, n_cam = layout
        parts = self._map(lambda sl: self._linearize(P, st, sl), P.n_observations)
        J_rot = np.concatenate([p[0] for p in parts])
        J_c = np.concatenate([p[1] for p in parts])
        J_f = np.concatenate([p[2] for p in parts])
        J_X = np.concatenate([p[3] for p in parts])
        img = P.obs_image
        B = self._sphere_basis(st)
        on_sphere = img == 1
        J_c[on_sphere, :, :2] = J_c[on_sphere] @ B
        J_c[on_sphere, :, 2] = 0.0

        A = np.concatenate([J_rot, J_c, J_f[:, :, None]], axis=2)
        cols = np.concatenate([col_rot[img], col_c[img], col_f[P.obs_cam][:, None]], axis=1)
        A = np.where((cols >= 0)[:, None, :], A, 0.0)
        cols_safe = np.maximum(cols, 0)
        w = deriv
        Wr = w[:, None] * r

        At = np.transpose(A, (0, 2, 1))
        g_c = np.bincount(cols_safe.ravel(), (At @ Wr[:, :, None]).ravel(), minlength=n_cam)
        U = sparse.coo_matrix(
            ((w[:, None, None] * At @ A).ravel(),
             (np.repeat(cols_safe, 7, axis=1).ravel(), np.tile(cols_safe, (1, 7)).ravel())),
            shape=(n_cam, n_cam),
        ).toarray()

        n_pts = len(st.X)
        var = P.obs_point >= 0
        pidx = P.obs_point[var]
        JXt = np.transpose(J_X[var], (0, 2, 1))
        wv = w[var][:, None, None]
        V = np.zeros((n_pts, 3, 3))
        np.add.at(V, pidx, wv * JXt @ J_X[var])
        g_p = np.zeros((n_pts, 3))
        np.add.at(g_p, pidx, (JXt @ Wr[var][:, :, None])[:, :, 0])
        Wcp = wv * At[var] @ J_X[var]
        prow = (3 * pidx)[:, None, None] + np.arange(3)[None, None, :]
        Wm = sparse.coo_matrix(
            (Wcp.ravel(),
             (np.broadcast_to(cols_safe[var][:, :, None], Wcp.shape).ravel(),
              np.broadcast_to(prow, Wcp.shape).ravel())),
            shape=(n_cam, 3 * n_pts),
        ).tocsr()
        return U, g_c, V, g_p.ravel(), Wm

    @staticmethod
    def _solve(U, g_c, V, g_p, Wm, lam):
        n_pts = len(V)
        dU = np.maximum(np.diag(U), 1e-12)
        Ud = U + lam * np.diag(dU)
        dV = np.maximum(np.einsum("nii->ni", V), 1e-12)
        Vd = V.copy()
        idx = np.arange(3)
        Vd[:, idx, idx] += lam * dV
        if n_pts:
            Vinv = np.linalg.inv(Vd)
            Vi = sparse.bsr_matrix(
                (Vinv, np.arange(n_pts), np.arange(n_pts + 1)), shape=(3 * n_pts, 3 * n_pts)
            ).tocsr()
            WV = Wm @ Vi
            S = Ud - (WV @ Wm.T).toarray()
            rhs = -g_c + WV @ g_p
        else:
            Vi = None
            S, rhs = Ud, -g_c
        try:
            h_c = np.linalg.solve(S, rhs)
        except np.linalg.LinAlgError:
            h_c = np.linalg.lstsq(S, rhs, rcond=None)[0]
        if n_pts:
            h_p = Vi @ (-g_p - Wm.T @ h_c)
        else:
            h_p = np.zeros(0)
        D = np.concatenate([dU, dV.ravel()])
        return h_c, h_p, D

    def _apply(self, P, st, h_c, h_p, layout):
        col_rot, col_c, col_f, _ = layout
        R, C, f = st.R.copy(), st.C.copy(), st.f.copy()
        rot_step = np.where(col_rot >= 0, h_c[np.maximum(col_rot, 0)], 0.0)
        R = exp_so3_batch(rot_step) @ R
        c_step = np.where(col_c >= 0, h_c[np.maximum(col_c, 0)], 0.0)
        B = self._sphere_basis(st)
        radius = np.linalg.norm(st.C[1] - st.C[0])
        c1 = st.C[1] + B @ c_step[1, :2]
        C = C + c_step
        C[1] = st.C[0] + radius * (c1 - st.C[0]) / np.linalg.norm(c1 - st.C[0])
        if self.refine_focals:
            f = f + h_c[col_f]
        X = st.X + h_p.reshape(-1, 3)
        return _State(R, C, f, X)

    # ---- main loop

    def fit(self, problem: BAProblem, y=None):
        P = problem
        st = _State(P.R0.copy(), P.C0.copy(), P.f0.copy(), P.points0.copy())
        if np.linalg.norm(st.C[1] - st.C[0]) <= 1e-12 * max(1.0, np.abs(st.C).max()):
            raise DegenerateError("the two gauge cameras share a center")
        layout = self._layout(P, st)
        r, value, deriv = self._cost_terms(P, st)
        if not np.all(np.isfinite(value)):
            k = int(np.nonzero(~np.isfinite(value))[0][0])
            raise ValueError(
                f"non-finite residual at observation {k} (track {P.obs_track[k]}, "
                f"image {P.images[P.obs_image[k]]})"
            )
        cost = float(value.sum())
        history = [cost]
        lam, nu = self.initial_damping, 2.0
        n_iter = 0
        reason = None
        U, g_c, V, g_p, Wm = self._assemble(P, st, r, deriv, layout)
        while reason is None:
            grad = 2.0 * np.concatenate([g_c, g_p])
            if cost <= self.cost_tol:
                reason = "cost_tolerance"
                break
            if grad.size == 0 or np.abs(grad).max() < self.gradient_tol:
                reason = "gradient_tolerance"
                break
            if n_iter >= self.max_iter:
                reason = "max_iterations"
                break
            n_iter += 1
            h_c, h_p, D = self._solve(U, g_c, V, g_p, Wm, lam)
            h = np.concatenate([h_c, h_p])
            g = np.concatenate([g_c, g_p])
            predicted = float(-g @ h + lam * h @ (D * h))
            trial = self._apply(P, st, h_c, h_p, layout)
            r_t, value_t, deriv_t = self._cost_terms(P, trial)
            new_cost = float(value_t.sum())
            gain = (cost - new_cost) / predicted if predicted > 0 and np.isfinite(new_cost) else -1.0
            if gain > 0:
                change = (cost - new_cost) / max(cost, 1e-300)
                st, r, deriv, cost = trial, r_t, deriv_t, new_cost
                history.append(cost)
                lam *= max(1.0 / 3.0, 1.0 - (2.0 * gain - 1.0) ** 3)
                nu = 2.0
                U, g_c, V, g_p, Wm = self._assemble(P, st, r, deriv, layout)
                if change < self.function_tol:
                    reason = "function_tolerance"
            else:
                lam *= nu
                nu *= 2.0
                if lam > 1e32:
                    reason = "damping_limit"

        poses = {i: Pose.from_center(st.R[k], st.C[k]) for k, i in enumerate(P.images)}
        cam_index = {c: k for k, c in enumerate(P.camera_ids)}
        cameras = {i: P.cameras[i].with_focal(float(st.f[cam_index[P.camera_of[i]]])) for i in P.images}
        self.reconstruction_ = GlobalReconstruction(poses, cameras, dict(P.camera_of), dict(P.scales), st.X.copy())
        self.cost_history_ = history
        self.report_ = BAReport(n_iter, len(history) - 1, history[0], cost, reason, list(history))
        return self

    def transform(self, X=None):
        check_fitted(self, "reconstruction_")
        return self.reconstruction_


@dataclass
class BAReport:
    iterations: int
    accepted: int
    initial_cost: float
    final_cost: float
    termination: str
    cost_history: list

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "accepted_steps": self.accepted,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "termination": self.termination,
            "cost_history": self.cost_history,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def bundle_adjust(problem: BAProblem, **kwargs):
    """Returns ``(GlobalReconstruction, BAReport)``."""
    est = BundleAdjuster(**kwargs).fit(problem)
    return est.reconstruction_, est.report_

