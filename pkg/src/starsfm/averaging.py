"""Global motion averaging over star-local relative poses.

Intrinsics are averaged by median, rotations by robust optimization on
SO(3), and camera centers jointly with one scale per star. Gauge: the
lowest image id sits at the identity rotation and the origin, and the star
centered on the lowest star id keeps scale 1.
"""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator

from ._validation import DegenerateError, DisconnectedError, check_fitted, check_unit_interval
from .geometry import (
    DepthMap,
    RobustLoss,
    exp_so3_batch,
    log_so3_batch,
    orthonormalize,
    right_jacobian_inv_batch,
)
from .reconstruction import LocalStarReconstruction
from .viewgraph import UnionFind


@dataclass(frozen=True)
class RelativeMeasurement:
    """Relative pose ``i -> j`` observed in star ``star`` (star units)."""

    star: int
    i: int
    j: int
    R: np.ndarray
    t: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("measurement endpoints must differ")
        check_unit_interval(self.weight, "weight")
        object.__setattr__(self, "R", orthonormalize(self.R))
        object.__setattr__(self, "t", np.asarray(self.t, float).reshape(3))


@dataclass(frozen=True)
class StarScale:
    star: int
    scale: float
    anchored: bool = False


def star_measurements(star: LocalStarReconstruction, weights=None, allowed_pairs=None, images=None):
    """Center-to-neighbor measurements of one star.

    ``weights`` maps ``(i, j)`` with ``i < j`` to the overlap weight;
    ``allowed_pairs`` and ``images`` restrict which edges are emitted.
    """
    out = []
    for m in star.neighbors:
        i, j = min(star.star, m), max(star.star, m)
        if allowed_pairs is not None and (i, j) not in allowed_pairs:
            continue
        if images is not None and (i not in images or j not in images):
            continue
        w = 1.0 if weights is None else float(weights.get((i, j), 0.0))
        rel = star.relative(i, j)
        out.append(RelativeMeasurement(star.star, i, j, rel.R, rel.t, w))
    return out


def average_intrinsics(stars, camera_of=None) -> dict[int, float]:
    """Median focal per physical camera over all observations in all stars."""
    obs: dict[int, list[float]] = defaultdict(list)
    for s in stars:
        for m in s.members:
            cam = m if camera_of is None else camera_of[m]
            obs[cam].append(s.cameras[m].focal)
    if camera_of is not None:
        missing = sorted(set(camera_of.values()) - set(obs))
        if missing:
            raise ValueError(f"no focal observations for cameras {missing}")
    return {c: float(np.median(v)) for c, v in sorted(obs.items())}


def _nodes(measurements) -> list[int]:
    return sorted({m.i for m in measurements} | {m.j for m in measurements})


def _check_connected(nodes, measurements):
    uf = UnionFind(nodes)
    n = len(nodes)
    for m in measurements:
        if m.weight > 0 and uf.union(m.i, m.j):
            n -= 1
    if n != 1:
        raise DisconnectedError("measurement graph is not connected")


def max_spanning_tree(measurements) -> list[RelativeMeasurement]:
    """Kruskal on the heaviest measurement per pair; ties broken by ids."""
    best: dict[tuple[int, int], RelativeMeasurement] = {}
    for m in sorted(measurements, key=lambda m: (-m.weight, m.i, m.j, m.star)):
        best.setdefault((m.i, m.j), m)
    uf = UnionFind(_nodes(measurements))
    tree = []
    for m in sorted(best.values(), key=lambda m: (-m.weight, m.i, m.j, m.star)):
        if uf.union(m.i, m.j):
            tree.append(m)
    return tree


def _tree_walk(root, tree):
    """Tree edges in BFS order as ``(measurement, forward)`` from a placed end."""
    adj = defaultdict(list)
    for m in tree:
        adj[m.i].append(m)
        adj[m.j].append(m)
    seen = {root}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for m in sorted(adj[u], key=lambda m: (m.i, m.j)):
            v = m.j if m.i == u else m.i
            if v not in seen:
                seen.add(v)
                queue.append(v)
                yield m, m.i == u


def spanning_tree_rotations(measurements) -> dict[int, np.ndarray]:
    nodes = _nodes(measurements)
    root = nodes[0]
    rot = {root: np.eye(3)}
    for m, forward in _tree_walk(root, max_spanning_tree(measurements)):
        if forward:
            rot[m.j] = orthonormalize(m.R @ rot[m.i])
        else:
            rot[m.i] = orthonormalize(m.R.T @ rot[m.j])
    return rot


# -- rotation averaging -------------------------------------------------------


def _stack(rotations, nodes) -> np.ndarray:
    return np.array([rotations[v] for v in nodes]).reshape(-1, 3, 3)


def _rotation_terms(Rs, index_i, index_j, Rij, w):
    M = Rs[index_j] @ np.transpose(Rs[index_i], (0, 2, 1))
    e = log_so3_batch(np.transpose(Rij, (0, 2, 1)) @ M)
    Jinv = right_jacobian_inv_batch(e)
    W = w[:, None, None]
    return w[:, None] * e, -W * Jinv, W * Jinv @ np.transpose(M, (0, 2, 1))


def _measurement_arrays(measurements, nodes):
    index = {v: k for k, v in enumerate(nodes)}
    ii = np.array([index[m.i] for m in measurements], dtype=int)
    jj = np.array([index[m.j] for m in measurements], dtype=int)
    w = np.array([m.weight for m in measurements], dtype=float)
    return ii, jj, w


def rotation_residuals(rotations, measurements):
    """Weighted tangent residuals ``w * log(R_ij^T R_j R_i^T)`` and their
    Jacobians w.r.t. left perturbations ``R_k <- exp(d_k) R_k``."""
    if not measurements:
        return np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3, 3))
    nodes = _nodes(measurements)
    ii, jj, w = _measurement_arrays(measurements, nodes)
    Rij = np.array([m.R for m in measurements])
    return _rotation_terms(_stack(rotations, nodes), ii, jj, Rij, w)


def rotation_cost(rotations, measurements, loss: RobustLoss) -> float:
    r, _, _ = rotation_residuals(rotations, measurements)
    return float(np.sum(loss(np.sum(r * r, axis=1))))


def rotation_gradient(rotations, measurements, loss: RobustLoss, nodes=None) -> np.ndarray:
    """Gradient of :func:`rotation_cost` over stacked tangent perturbations."""
    nodes = nodes or _nodes(measurements)
    index = {v: k for k, v in enumerate(nodes)}
    r, Ji, Jj = rotation_residuals(rotations, measurements)
    _, d = loss.evaluate(np.sum(r * r, axis=1))
    g = np.zeros((len(nodes), 3))
    ii = np.array([index[m.i] for m in measurements], dtype=int)
    jj = np.array([index[m.j] for m in measurements], dtype=int)
    np.add.at(g, ii, 2 * d[:, None] * np.einsum("nba,nb->na", Ji, r))
    np.add.at(g, jj, 2 * d[:, None] * np.einsum("nba,nb->na", Jj, r))
    return g.ravel()


def _block_normal_equations(n_vars, blocks, r, d):
    """Assemble ``H = sum d J^T J`` and ``g = sum d J^T r`` from per-residual
    blocks ``[(var index array, J array), ...]`` (negative index = fixed)."""
    dim = blocks[0][1].shape[2]
    rows, cols, vals = [], [], []
    g = np.zeros((n_vars, dim))
    for a, Ja in blocks:
        ok = a >= 0
        np.add.at(g, a[ok], d[ok, None] * np.einsum("nba,nb->na", Ja[ok], r[ok]))
        for b, Jb in blocks:
            ok2 = ok & (b >= 0)
            blk = d[ok2, None, None] * np.einsum("nka,nkb->nab", Ja[ok2], Jb[ok2])
            ra = (dim * a[ok2])[:, None, None] + np.arange(dim)[None, :, None]
            cb = (dim * b[ok2])[:, None, None] + np.arange(dim)[None, None, :]
            rows.append(np.broadcast_to(ra, blk.shape).ravel())
            cols.append(np.broadcast_to(cb, blk.shape).ravel())
            vals.append(blk.ravel())
    n = dim * n_vars
    H = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).toarray()
    return H, g.ravel()


class RotationAveraging(BaseEstimator):
    """Robust rotation averaging.

    Minimizes ``sum rho((w * d(R_ij, R_j R_i^T))**2)`` with Huber ``rho``,
    starting from spanning-tree chaining and refining with damped
    Gauss-Newton steps on the manifold.

    Fitted attributes: ``rotations_``, ``init_rotations_``, ``cost_``,
    ``n_iter_``.
    """

    def __init__(self, huber_scale=0.1, max_iter=200, tol=1e-10):
        self.huber_scale = huber_scale
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, measurements, y=None):
        measurements = list(measurements)
        if not measurements:
            raise ValueError("no measurements")
        nodes = _nodes(measurements)
        _check_connected(nodes, measurements)
        active = [m for m in measurements if m.weight > 0]
        loss = RobustLoss("huber", self.huber_scale)
        rot = spanning_tree_rotations(active)
        self.init_rotations_ = {k: v.copy() for k, v in rot.items()}

        ii, jj, w = _measurement_arrays(active, nodes)
        Rij = np.array([m.R for m in active])
        # variable k -> node k + 1; the lowest id is fixed
        vi, vj = ii - 1, jj - 1
        Rs = _stack(rot, nodes)

        def cost_of(Rs):
            r = _rotation_terms(Rs, ii, jj, Rij, w)[0]
            return float(np.sum(loss(np.sum(r * r, axis=1))))

        cost = cost_of(Rs)
        lam = 1e-4
        n_iter = 0
        n_free = len(nodes) - 1
        for n_iter in range(1, self.max_iter + 1):
            if n_free == 0:
                break
            r, Ji, Jj = _rotation_terms(Rs, ii, jj, Rij, w)
            _, d = loss.evaluate(np.sum(r * r, axis=1))
            H, g = _block_normal_equations(n_free, [(vi, Ji), (vj, Jj)], r, d)
            step_taken = False
            while lam < 1e12:
                A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
                delta = -np.linalg.solve(A, g)
                trial = Rs.copy()
                trial[1:] = exp_so3_batch(delta.reshape(-1, 3)) @ Rs[1:]
                new_cost = cost_of(trial)
                if new_cost <= cost:
                    Rs, cost = trial, new_cost
                    lam = max(lam / 10.0, 1e-12)
                    step_taken = True
                    break
                lam *= 10.0
            if not step_taken or np.linalg.norm(delta) < self.tol:
                break
        self.rotations_ = {v: orthonormalize(Rs[k]) for k, v in enumerate(nodes)}
        self.cost_ = cost
        self.n_iter_ = n_iter
        return self

    def transform(self, X=None):
        check_fitted(self, "rotations_")
        return self.rotations_


def rotation_averaging(measurements, huber_scale=0.1, max_iter=200, tol=1e-10):
    """Returns ``(rotations, final_cost)``."""
    est = RotationAveraging(huber_scale, max_iter, tol).fit(measurements)
    return est.rotations_, est.cost_


# -- similarity averaging -------------------------------------------------------


def world_directions(rotations, measurements) -> np.ndarray:
    """Relative translations rotated into the world frame: ``R_j^T t_ij``.

    For an exact star these equal ``s_l * (c_i - c_j)``.
    """
    return np.array([rotations[m.j].T @ m.t for m in measurements]).reshape(-1, 3)


def similarity_residuals(centers, log_scales, directions, measurements):
    """``w * (v - s (c_i - c_j))`` plus Jacobians w.r.t. ``c_i``, ``c_j`` and ``log s``."""
    n = len(measurements)
    w = np.array([m.weight for m in measurements], dtype=float)
    ci = np.array([centers[m.i] for m in measurements], dtype=float).reshape(n, 3)
    cj = np.array([centers[m.j] for m in measurements], dtype=float).reshape(n, 3)
    s = np.exp(np.array([log_scales[m.star] for m in measurements], dtype=float))
    diff = ci - cj
    ws = (w * s)[:, None, None] * np.eye(3)
    res = w[:, None] * (np.asarray(directions).reshape(n, 3) - s[:, None] * diff)
    return res, -ws, ws, -(w * s)[:, None] * diff


def similarity_cost(centers, log_scales, directions, measurements, loss) -> float:
    r = similarity_residuals(centers, log_scales, directions, measurements)[0]
    return float(np.sum(loss(np.sum(r * r, axis=1))))


def _star_order(measurements):
    return sorted({m.star for m in measurements})


def spanning_tree_centers(rotations, measurements, anchor=None):
    """Chain centers along the maximum spanning tree.

    A star's scale is first estimated from one of its measurements whose
    endpoints are already placed; the anchor star has scale 1.
    """
    nodes = _nodes(measurements)
    root = nodes[0]
    stars = _star_order(measurements)
    anchor = stars[0] if anchor is None else anchor
    dirs = dict(zip(range(len(measurements)), world_directions(rotations, measurements)))
    by_pair = defaultdict(list)
    by_star = defaultdict(list)
    for k, m in enumerate(measurements):
        by_pair[(m.i, m.j)].append(k)
        by_star[m.star].append(k)
    centers = {root: np.zeros(3)}
    scales = {anchor: 1.0}

    def try_scale(star):
        if star in scales:
            return True
        for k in sorted(by_star[star], key=lambda k: (-measurements[k].weight, k)):
            m = measurements[k]
            if m.i in centers and m.j in centers:
                base = np.linalg.norm(centers[m.i] - centers[m.j])
                if base > 0 and np.linalg.norm(dirs[k]) > 0:
                    scales[star] = float(np.linalg.norm(dirs[k]) / base)
                    return True
        return False

    for tm, forward in _tree_walk(root, max_spanning_tree(measurements)):
        cands = sorted(by_pair[(tm.i, tm.j)], key=lambda k: (-measurements[k].weight, measurements[k].star))
        known = [k for k in cands if try_scale(measurements[k].star)]
        if known:
            k = known[0]
            s = scales[measurements[k].star]
        else:
            k = cands[0]
            s = float(np.median(list(scales.values())))
        v = dirs[k]
        if forward:
            centers[tm.j] = centers[tm.i] - v / s
        else:
            centers[tm.i] = centers[tm.j] + v / s
    for star in stars:
        if not try_scale(star):
            scales[star] = float(np.median(list(scales.values())))
    return centers, scales


def _huber_scale(directions, factor):
    norms = np.linalg.norm(directions, axis=1)
    med = float(np.median(norms)) if len(norms) else 1.0
    return factor * (med if med > 0 else 1.0)


class SimilarityAveraging(BaseEstimator):
    """Joint camera centers and per-star scales from relative translations.

    ``variant=False`` minimizes ``sum rho(|w (v - s_l (c_i - c_j))|^2)`` over
    ``c`` and ``log s``; ``variant=True`` minimizes
    ``sum rho(|w (s~_l v - (c_i - c_j))|^2)``, which is linear in its
    unknowns and solved by (reweighted) least squares. ``loss`` is
    ``"huber"`` or ``"trivial"``.

    Fitted attributes: ``centers_``, ``scales_`` (dict of :class:`StarScale`,
    always in the ``s`` convention), ``init_centers_``, ``init_scales_``,
    ``cost_``, ``n_iter_``.
    """

    def __init__(self, loss="huber", huber_factor=0.01, max_iter=200, tol=1e-12, variant=False):
        self.loss = loss
        self.huber_factor = huber_factor
        self.max_iter = max_iter
        self.tol = tol
        self.variant = variant

    def _loss(self, directions):
        if self.loss == "trivial":
            return RobustLoss("trivial")
        return RobustLoss("huber", _huber_scale(directions, self.huber_factor))

    def fit(self, rotations, measurements):
        measurements = [m for m in measurements if m.weight > 0]
        if not measurements:
            raise ValueError("no measurements")
        nodes = _nodes(measurements)
        _check_connected(nodes, measurements)
        missing = [v for v in nodes if v not in rotations]
        if missing:
            raise ValueError(f"no rotation estimate for images {missing}")
        dirs = world_directions(rotations, measurements)
        loss = self._loss(dirs)
        stars = _star_order(measurements)
        anchor = stars[0]
        init_c, init_s = spanning_tree_centers(rotations, measurements, anchor)
        self.init_centers_ = init_c
        self.init_scales_ = dict(init_s)
        if self.variant:
            centers, scales, cost, n_iter = self._fit_variant(nodes, stars, dirs, measurements, loss)
        else:
            centers, scales, cost, n_iter = self._fit_sa(nodes, stars, dirs, measurements, loss, init_c, init_s)
        bad = [l for l in stars if not (0 < scales[l] < np.inf)]
        if bad:
            raise DegenerateError(f"star scales degenerated (underflow/overflow) for stars {bad}")
        spread = max(np.linalg.norm(centers[v] - centers[nodes[0]]) for v in nodes)
        if spread < 1e-12 and np.linalg.norm(dirs, axis=1).max() > 0:
            raise DegenerateError("all centers collapsed although measurements have a baseline")
        self.centers_ = centers
        self.scales_ = {l: StarScale(l, float(scales[l]), l == anchor) for l in stars}
        self.cost_ = cost
        self.n_iter_ = n_iter
        return self

    @staticmethod
    def _layout(nodes, stars, ms):
        """Column layout: 3 per free center, then 1 per free star scale."""
        free_c = {v: 3 * k for k, v in enumerate(nodes[1:])}
        free_s = {l: 3 * len(free_c) + k for k, l in enumerate(stars[1:])}
        col_i = np.array([free_c.get(m.i, -1) for m in ms], dtype=int)
        col_j = np.array([free_c.get(m.j, -1) for m in ms], dtype=int)
        col_s = np.array([free_s.get(m.star, -1) for m in ms], dtype=int)
        return free_c, free_s, col_i, col_j, col_s, 3 * len(free_c) + len(free_s)

    @staticmethod
    def _jacobian(n_rows, n_cols, col_i, col_j, col_s, di, dj, ds):
        rows, cols, vals = [], [], []
        base = 3 * np.arange(len(col_i))
        for col, blk in ((col_i, di), (col_j, dj)):
            ok = col >= 0
            for a in range(3):
                for b in range(3):
                    rows.append(base[ok] + a)
                    cols.append(col[ok] + b)
                    vals.append(blk[ok, a, b])
        ok = col_s >= 0
        for a in range(3):
            rows.append(base[ok] + a)
            cols.append(col_s[ok])
            vals.append(ds[ok, a])
        return sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_rows, n_cols)
        ).tocsr()

    def _fit_sa(self, nodes, stars, dirs, ms, loss, init_c, init_s):
        free_c, free_s, col_i, col_j, col_s, n = self._layout(nodes, stars, ms)
        centers = {v: np.asarray(init_c[v], float) for v in nodes}
        logs = {l: float(np.log(init_s[l])) for l in stars}
        logs[stars[0]] = 0.0
        cost = similarity_cost(centers, logs, dirs, ms, loss)
        lam = 1e-4
        n_iter = 0
        for n_iter in range(1, self.max_iter + 1):
            r, dci, dcj, dls = similarity_residuals(centers, logs, dirs, ms)
            _, d = loss.evaluate(np.sum(r * r, axis=1))
            J = self._jacobian(3 * len(ms), n, col_i, col_j, col_s, dci, dcj, dls)
            wts = np.repeat(d, 3)
            H = (J.T @ sparse.diags(wts) @ J).toarray()
            g = J.T @ (wts * r.ravel())
            accepted = False
            while lam < 1e12:
                A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
                delta = -np.linalg.solve(A, g)
                tc = {v: centers[v] + (delta[free_c[v] : free_c[v] + 3] if v in free_c else 0.0) for v in nodes}
                ts = {l: logs[l] + (delta[free_s[l]] if l in free_s else 0.0) for l in stars}
                new_cost = similarity_cost(tc, ts, dirs, ms, loss)
                if new_cost <= cost:
                    accepted = True
                    break
                lam *= 10.0
            if not accepted:
                break
            change = (cost - new_cost) / max(cost, 1e-300)
            centers, logs, cost = tc, ts, new_cost
            lam = max(lam / 10.0, 1e-12)
            if change < self.tol or cost == 0.0:
                break
        return centers, {l: float(np.exp(v)) for l, v in logs.items()}, cost, n_iter

    def _fit_variant(self, nodes, stars, dirs, ms, loss):
        free_c, free_s, col_i, col_j, col_s, n = self._layout(nodes, stars, ms)
        # residual w (s~ v - c_i + c_j) = A x - b
        w = np.array([m.weight for m in ms])
        eye = np.broadcast_to(np.eye(3), (len(ms), 3, 3))
        A = self._jacobian(3 * len(ms), n, col_i, col_j, col_s,
                           -w[:, None, None] * eye, w[:, None, None] * eye, w[:, None] * dirs)
        b = np.where((col_s < 0)[:, None], -w[:, None] * dirs, 0.0).ravel()
        wts = np.ones(len(ms))
        prev = np.inf
        n_iter = 0
        for n_iter in range(1, self.max_iter + 1):
            W = sparse.diags(np.repeat(wts, 3))
            N = (A.T @ W @ A).toarray()
            rhs = A.T @ (W @ b)
            try:
                x = np.linalg.solve(N, rhs)
            except np.linalg.LinAlgError:
                x = np.linalg.lstsq(N, rhs, rcond=None)[0]
            r = (A @ x - b).reshape(-1, 3)
            s2 = np.sum(r * r, axis=1)
            cost = float(np.sum(loss(s2)))
            if loss.kind == "trivial" or abs(prev - cost) <= self.tol * max(cost, 1e-300):
                break
            prev = cost
            wts = loss.evaluate(s2)[1]
        centers = {nodes[0]: np.zeros(3)}
        for v, k in free_c.items():
            centers[v] = x[k : k + 3].copy()
        tilde = {stars[0]: 1.0}
        for l, k in free_s.items():
            tilde[l] = float(x[k])
        if any(t <= 0 for t in tilde.values()):
            raise DegenerateError("variant solve produced a non-positive star scale")
        return centers, {l: 1.0 / t for l, t in tilde.items()}, cost, n_iter

    def transform(self, X=None):
        check_fitted(self, "centers_")
        return self.centers_


def similarity_averaging(rotations, measurements, **kwargs):
    """Returns ``(centers, {star: StarScale})``."""
    est = SimilarityAveraging(**kwargs).fit(rotations, measurements)
    return est.centers_, est.scales_


def similarity_averaging_variant(rotations, measurements, **kwargs):
    est = SimilarityAveraging(variant=True, **kwargs).fit(rotations, measurements)
    return est.centers_, est.scales_


def rescale_depths(stars, scales) -> dict[int, dict[int, DepthMap]]:
    """Divide every depth map of star ``l`` by its scale ``s_l``."""
    out = {}
    for s in stars:
        if s.star not in scales:
            raise KeyError(f"no scale for star {s.star}")
        sc = scales[s.star]
        sc = sc.scale if isinstance(sc, StarScale) else float(sc)
        if not sc > 0:
            raise ValueError("star scales must be positive")
        out[s.star] = {m: s.depths[m].scaled(1.0 / sc) for m in s.members}
    return out
