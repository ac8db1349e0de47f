"""Rigid-body geometry, the pinhole camera, depth rasters and robust losses.

Conventions used throughout the package:

* rotations are orthonormal 3x3 ``numpy`` arrays;
* poses map world to camera, ``x_cam = R @ x_world + t``, and the camera
  center is ``c = -R.T @ t``;
* pixel centers sit at integer coordinates; the x axis points right, y down
  and the optical axis along +z.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PLANE_EPS = 1e-8

_SMALL_ANGLE = 1e-7


def hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def orthonormalize(R) -> np.ndarray:
    """Project a near-rotation onto SO(3) (closest in Frobenius norm)."""
    u, _, vt = np.linalg.svd(np.asarray(R, dtype=float))
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def exp_so3(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def log_so3(R) -> np.ndarray:
    """Rotation vector of ``R``; stable near 0 and near pi."""
    R = np.asarray(R, dtype=float)
    cos_t = min(1.0, max(-1.0, 0.5 * (np.trace(R) - 1.0)))
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_t = 0.5 * np.linalg.norm(v)
    theta = math.atan2(sin_t, cos_t)
    if theta < _SMALL_ANGLE:
        return 0.5 * v
    if math.pi - theta > 1e-4:
        return theta / (2.0 * math.sin(theta)) * v
    # near pi: recover the axis from the symmetric part
    B = 0.5 * (R + R.T) - cos_t * np.eye(3)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ v < 0:
        axis = -axis
    return theta * axis


def right_jacobian_inv(w) -> np.ndarray:
    """Inverse right Jacobian of SO(3): ``log(exp(w) exp(d)) ~ w + Jr^-1(w) d``."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    coef = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + coef * K @ K


def hat_batch(w) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1, 3)
    K = np.zeros((len(w), 3, 3))
    K[:, 0, 1], K[:, 0, 2], K[:, 1, 2] = -w[:, 2], w[:, 1], -w[:, 0]
    K[:, 1, 0], K[:, 2, 0], K[:, 2, 1] = w[:, 2], -w[:, 1], w[:, 0]
    return K


def exp_so3_batch(w) -> np.ndarray:
    """Vectorized :func:`exp_so3` over an ``(N, 3)`` array."""
    w = np.asarray(w, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(w, axis=1)
    K = hat_batch(w)
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(t) / t)
    b = np.where(small, 0.5, (1.0 - np.cos(t)) / t**2)
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def log_so3_batch(R) -> np.ndarray:
    """Vectorized :func:`log_so3` over an ``(N, 3, 3)`` array."""
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    cos_t = np.clip(0.5 * (np.trace(R, axis1=1, axis2=2) - 1.0), -1.0, 1.0)
    v = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    sin_t = 0.5 * np.linalg.norm(v, axis=1)
    theta = np.arctan2(sin_t, cos_t)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, np.sin(np.where(small, 1.0, theta)))
    coef = np.where(small, 0.5, theta / (2.0 * safe))
    out = coef[:, None] * v
    for k in np.nonzero(math.pi - theta <= 1e-4)[0]:
        out[k] = log_so3(R[k])
    return out


def right_jacobian_inv_batch(w) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(w, axis=1)
    K = hat_batch(w)
    small = theta < 1e-5
    t = np.where(small, 1.0, theta)
    coef = np.where(small, 1.0 / 12.0, 1.0 / t**2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)))
    return np.eye(3) + 0.5 * K + coef[:, None, None] * (K @ K)


def rot_axis(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    return exp_so3(axis / np.linalg.norm(axis) * angle)


def rot_x(angle: float) -> np.ndarray:
    return rot_axis([1.0, 0.0, 0.0], angle)


def rot_y(angle: float) -> np.ndarray:
    return rot_axis([0.0, 1.0, 0.0], angle)


def rot_z(angle: float) -> np.ndarray:
    return rot_axis([0.0, 0.0, 1.0], angle)


def rotation_angle(R) -> float:
    return float(np.linalg.norm(log_so3(R)))


def geodesic_distance(a, b) -> float:
    """Angle in radians of ``a @ b.T``, in ``[0, pi]``."""
    return rotation_angle(np.asarray(a) @ np.asarray(b).T)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return quat_to_matrix(q / np.linalg.norm(q))


def quat_to_matrix(q) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` to rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Rotation matrix to unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * math.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0))
        q = [0.0, 0.0, 0.0, 0.0]
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-from-world rotation for a camera at ``center`` facing ``target``."""
    z = np.asarray(target, dtype=float) - np.asarray(center, dtype=float)
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


@dataclass(frozen=True)
class Pose:
    """Camera-from-world rigid transform."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-13 or np.linalg.det(R) < 0:
            R = orthonormalize(R)
        t = np.asarray(self.t, dtype=float).reshape(3)
        R.flags.writeable = False
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_center(cls, R, c) -> Pose:
        R = np.asarray(R, dtype=float)
        return cls(R, -R @ np.asarray(c, dtype=float))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def inverse(self) -> Pose:
        return Pose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def quat(self) -> np.ndarray:
        return matrix_to_quat(self.R)


def relative_pose(p_i: Pose, p_j: Pose) -> Pose:
    """Transform from camera-i to camera-j coordinates.

    Satisfies ``relative_pose(p_i, p_j).compose(p_i) == p_j``.
    """
    return p_j.compose(p_i.inverse())


@dataclass(frozen=True)
class PinholeCamera:
    focal: float
    width: int
    height: int
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.cx is None:
            object.__setattr__(self, "cx", self.width / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height / 2.0)
        object.__setattr__(self, "focal", float(self.focal))

    @property
    def principal_point(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    def with_focal(self, focal: float) -> PinholeCamera:
        return PinholeCamera(focal, self.width, self.height, self.cx, self.cy)

    def project(self, x_cam, eps: float = PLANE_EPS):
        """Perspective projection.

        Returns ``(uv, valid)``; ``valid`` is false for points whose depth is
        at or below ``eps``. Works on a single point or an ``(N, 3)`` array.
        """
        x = np.asarray(x_cam, dtype=float)
        z = x[..., 2]
        valid = z > eps
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack(
                [self.focal * x[..., 0] / z + self.cx, self.focal * x[..., 1] / z + self.cy],
                axis=-1,
            )
        return uv, valid

    def normalized(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        u = (uv[..., 0] - self.cx) / self.focal
        v = (uv[..., 1] - self.cy) / self.focal
        return np.stack([u, v, np.ones_like(u)], axis=-1)

    def unproject(self, uv, depth) -> np.ndarray:
        """Lift pixels to camera coordinates at z-depth ``depth``."""
        return self.normalized(uv) * np.asarray(depth, dtype=float)[..., None]

    def in_bounds(self, uv) -> np.ndarray:
        uv = np.asarray(uv)
        return (
            (uv[..., 0] >= 0)
            & (uv[..., 0] <= self.width - 1)
            & (uv[..., 1] >= 0)
            & (uv[..., 1] <= self.height - 1)
        )


_DEPTH_MAGIC = b"DPTH"


@dataclass(frozen=True)
class DepthMap:
    """Row-major depth raster; 0 marks an invalid pixel."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("depth raster must be 2-D")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("depth values must be finite and non-negative")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0

    def scaled(self, factor: float) -> DepthMap:
        return DepthMap(self.values * factor)

    def as_float32(self) -> DepthMap:
        """The map at on-disk precision."""
        return DepthMap(self.values.astype("<f4").astype(float))

    def sample_bilinear(self, uv) -> tuple[np.ndarray, np.ndarray]:
        """Interpolate depth at sub-pixel positions.

        Interpolation runs on inverse depth, which is affine in pixel
        coordinates over a plane, so planar surfaces are sampled exactly.
        A sample is invalid when any of its four neighbors is invalid or
        out of bounds.
        """
        uv = np.asarray(uv, dtype=float)
        x, y = uv[..., 0], uv[..., 1]
        H, W = self.values.shape
        ok = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
        xs = np.where(ok, x, 0.0)
        ys = np.where(ok, y, 0.0)
        x0 = np.minimum(np.floor(xs).astype(int), W - 2) if W > 1 else np.zeros_like(xs, int)
        y0 = np.minimum(np.floor(ys).astype(int), H - 2) if H > 1 else np.zeros_like(ys, int)
        x1 = np.minimum(x0 + 1, W - 1)
        y1 = np.minimum(y0 + 1, H - 1)
        ax = xs - x0
        ay = ys - y0
        d00 = self.values[y0, x0]
        d01 = self.values[y0, x1]
        d10 = self.values[y1, x0]
        d11 = self.values[y1, x1]
        ok &= (d00 > 0) & (d01 > 0) & (d10 > 0) & (d11 > 0)
        with np.errstate(divide="ignore"):
            inv = (
                (1 - ax) * (1 - ay) / np.where(d00 > 0, d00, 1.0)
                + ax * (1 - ay) / np.where(d01 > 0, d01, 1.0)
                + (1 - ax) * ay / np.where(d10 > 0, d10, 1.0)
                + ax * ay / np.where(d11 > 0, d11, 1.0)
            )
        depth = np.where(ok, 1.0 / inv, 0.0)
        return depth, ok


def write_depth(path, depth: DepthMap) -> None:
    """Write the binary raster: 16-byte header then little-endian f32 values."""
    header = _DEPTH_MAGIC + struct.pack("<III", depth.width, depth.height, 0)
    Path(path).write_bytes(header + depth.values.astype("<f4").tobytes(order="C"))


def read_depth(path) -> DepthMap:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _DEPTH_MAGIC:
        raise ValueError(f"{path}: not a depth raster")
    width, height, _ = struct.unpack("<III", raw[4:16])
    expected = 16 + 4 * width * height
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=16).reshape(height, width)
    return DepthMap(values.astype(float))


LOSS_KINDS = ("huber", "arctan", "trivial")


@dataclass(frozen=True)
class RobustLoss:
    """Robustifier applied to a squared residual ``s``.

    ``scale`` is in residual units: Huber is quadratic up to ``|r| = scale``
    and Arctan saturates at ``scale**2 * pi / 2``.
    """

    kind: str = "trivial"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("loss scale must be positive")

    def evaluate(self, s):
        """Value and first derivative ``d rho / d s``; vectorized over ``s``."""
        s = np.asarray(s, dtype=float)
        if np.any(s < 0):
            raise ValueError("squared residual must be non-negative")
        k2 = self.scale**2
        if self.kind == "trivial":
            return s.copy(), np.ones_like(s)
        if self.kind == "huber":
            inlier = s <= k2
            root = np.sqrt(np.where(inlier, k2, s))
            value = np.where(inlier, s, 2.0 * self.scale * root - k2)
            deriv = np.where(inlier, 1.0, self.scale / root)
            return value, deriv
        value = k2 * np.arctan(s / k2)
        deriv = 1.0 / (1.0 + (s / k2) ** 2)
        return value, deriv

    def __call__(self, s):
        return self.evaluate(s)[0]


def robust_loss_eval(loss: RobustLoss, squared_residual):
    value, deriv = loss.evaluate(squared_residual)
    if np.ndim(value) == 0:
        return float(value), float(deriv)
    return value, deriv
