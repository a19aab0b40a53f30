"""Rigid and similarity transforms, pinhole projection, triangulation and
trajectory alignment.

Conventions used throughout the package:

* A :class:`Pose` maps points from its local (camera) frame into the world
  frame: ``x_w = R @ x_c + t``.
* Quaternions are stored scalar-last ``(x, y, z, w)``, matching the TUM
  trajectory format.
* On-manifold increments are ``R <- R @ Exp(dtheta)`` and ``t <- t + dt``,
  with the 6-vector ordered ``(dt, dtheta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

Z_MIN = 1e-6
PARALLAX_MIN_DEG = 1.0


class GeometryError(ValueError):
    pass


class NonPositiveDepth(GeometryError):
    pass


class NonPositiveInverseDepth(GeometryError):
    pass


class InsufficientParallax(GeometryError):
    pass


class NegativeDepth(GeometryError):
    pass


class DegenerateConfiguration(GeometryError):
    pass


# --------------------------------------------------------------------------
# SO(3) helpers

def hat(v):
    """Skew-symmetric matrix(es) of shape (..., 3, 3) from vector(s) (..., 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(w):
    """Rodrigues formula, batched over leading dimensions."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    K = hat(w)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R):
    """Axis-angle vector of a rotation matrix.

    At exactly pi the axis is taken from the dominant column of ``R + I`` and
    oriented so that its largest component is positive.
    """
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos)
    if theta < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if math.pi - theta < 1e-6:
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if axis[np.argmax(np.abs(axis))] < 0:
            axis = -axis
        return axis * theta
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return v * (theta / (2.0 * math.sin(theta)))


def so3_right_jacobian_inv(w):
    """Inverse right Jacobian of SO(3): d Log(R Exp(d)) / d d at d = 0."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    c = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + c * (K @ K)


def quat_to_matrix(q):
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Shepperd's method; returns (x, y, z, w) with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s,
                      (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s,
                      0.25 * s, (R[1, 0] - R[0, 1]) / s])
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


# --------------------------------------------------------------------------
# Value types

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform from a local frame into the world frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("rotation quaternion must be non-zero and finite")
        q = q / n
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_Rt(cls, R, t) -> Pose:
        pose = cls(matrix_to_quat(R), t)
        # keep the exact matrix; the quaternion round trip costs ~1e-16
        R = np.array(R, dtype=float)
        R.flags.writeable = False
        pose.__dict__["R"] = R
        return pose

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls.from_Rt(T[:3, :3], T[:3, 3])

    @cached_property
    def R(self) -> np.ndarray:
        R = quat_to_matrix(self.rotation)
        R.flags.writeable = False
        return R

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: Pose) -> Pose:
        return Pose.from_Rt(self.R @ other.R, self.R @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> Pose:
        Rt = self.R.T
        return Pose.from_Rt(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Map point(s) of shape (3,) or (N, 3) from local to world frame."""
        return np.asarray(points, dtype=float) @ self.R.T + self.translation

    def apply_inverse(self, points) -> np.ndarray:
        """Map point(s) from the world frame into this local frame."""
        return (np.asarray(points, dtype=float) - self.translation) @ self.R

    def retract(self, delta) -> Pose:
        """Apply a local increment ``(dt, dtheta)``."""
        delta = np.asarray(delta, dtype=float)
        return Pose.from_Rt(self.R @ so3_exp(delta[3:]), self.translation + delta[:3])

    def log(self) -> np.ndarray:
        """``(t, Log(R))`` coordinates on SO(3) x R^3."""
        return np.concatenate([self.translation, so3_log(self.R)])

    def isclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.R, other.R, atol=atol)
                    and np.allclose(self.translation, other.translation, atol=atol))

    def __repr__(self):
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"Pose(q={q}, t={t})"


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def bearing(self, pixels) -> np.ndarray:
        """Rays with unit z through pixel(s) of shape (2,) or (N, 2)."""
        pixels = np.asarray(pixels, dtype=float)
        x = (pixels[..., 0] - self.cx) / self.fx
        y = (pixels[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def in_bounds(self, pixels, margin: float = 0.0) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=float)
        return ((pixels[..., 0] >= margin) & (pixels[..., 0] <= self.width - 1 - margin)
                & (pixels[..., 1] >= margin) & (pixels[..., 1] <= self.height - 1 - margin))


@dataclass(frozen=True, eq=False)
class Sim3:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("Sim3 scale must be positive")
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        object.__setattr__(self, "rotation", q / np.linalg.norm(q))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def from_sRt(cls, s, R, t) -> Sim3:
        sim = cls(float(s), matrix_to_quat(R), t)
        sim.__dict__["_R"] = np.array(R, dtype=float)
        return sim

    @property
    def R(self) -> np.ndarray:
        if "_R" not in self.__dict__:
            self.__dict__["_R"] = quat_to_matrix(self.rotation)
        return self.__dict__["_R"]

    def apply(self, points) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=float) @ self.R.T) + self.translation

    def apply_pose(self, pose: Pose) -> Pose:
        return Pose.from_Rt(self.R @ pose.R, self.apply(pose.translation))


# --------------------------------------------------------------------------
# Projection

def project(cam: Camera, point_cam, z_min: float = Z_MIN) -> np.ndarray:
    p = np.asarray(point_cam, dtype=float)
    if p[2] <= z_min:
        raise NonPositiveDepth(f"point depth {p[2]:.3g} <= {z_min:g}")
    return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])


def project_many(cam: Camera, points) -> np.ndarray:
    """Unchecked vectorised projection of (N, 3) points."""
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    return np.stack([cam.fx * p[..., 0] / z + cam.cx, cam.fy * p[..., 1] / z + cam.cy], axis=-1)


def back_project(cam: Camera, pixel, inv_depth: float) -> np.ndarray:
    if not inv_depth > 0:
        raise NonPositiveInverseDepth(f"inverse depth {inv_depth!r} must be positive")
    return cam.bearing(pixel) / inv_depth


def transfer_inverse_depth(cam: Camera, pixel, inv_depth, pose_src: Pose, pose_dst: Pose):
    """Inverse depth, in ``pose_dst``'s frame, of the point seen at ``pixel``
    with ``inv_depth`` in ``pose_src``'s frame.  Also returns the point."""
    p_src = back_project(cam, pixel, inv_depth)
    p_dst = pose_dst.inverse().apply(pose_src.apply(p_src))
    if p_dst[2] <= Z_MIN:
        raise NonPositiveDepth("point is behind the destination camera")
    return 1.0 / p_dst[2], p_dst


# --------------------------------------------------------------------------
# Triangulation

def ray_parallax_deg(pose_a: Pose, pose_b: Pose, cam: Camera, obs_a, obs_b) -> float:
    ra = pose_a.R @ cam.bearing(obs_a)
    rb = pose_b.R @ cam.bearing(obs_b)
    c = ra @ rb / (np.linalg.norm(ra) * np.linalg.norm(rb))
    return math.degrees(math.acos(float(np.clip(c, -1.0, 1.0))))


def _reprojection_cost(point_w, poses, cam, obs):
    total = 0.0
    for pose, u in zip(poses, obs):
        pc = pose.apply_inverse(point_w)
        if pc[2] <= Z_MIN:
            return math.inf
        total += float(np.sum((project_many(cam, pc) - u) ** 2))
    return total


def triangulate(pose_a: Pose, pose_b: Pose, cam: Camera, obs_a, obs_b,
                parallax_min_deg: float = PARALLAX_MIN_DEG) -> float:
    """Two-view triangulation; returns the inverse depth in frame ``a``.

    Both the linear (DLT) solution and the ray-midpoint solution are
    computed and the one with the smaller reprojection error is kept.
    """
    obs_a = np.asarray(obs_a, dtype=float)
    obs_b = np.asarray(obs_b, dtype=float)
    baseline = np.linalg.norm(pose_a.translation - pose_b.translation)
    if baseline < 1e-12:
        raise InsufficientParallax("zero baseline")
    parallax = ray_parallax_deg(pose_a, pose_b, cam, obs_a, obs_b)
    if parallax < parallax_min_deg:
        raise InsufficientParallax(f"parallax {parallax:.3f} deg < {parallax_min_deg} deg")

    candidates = []
    rows = []
    for pose, u in ((pose_a, obs_a), (pose_b, obs_b)):
        Rt = pose.R.T
        P = cam.K @ np.hstack([Rt, (-Rt @ pose.translation)[:, None]])
        rows.append(u[0] * P[2] - P[0])
        rows.append(u[1] * P[2] - P[1])
    _, _, Vt = np.linalg.svd(np.array(rows))
    X = Vt[-1]
    if abs(X[3]) > 1e-15:
        candidates.append(X[:3] / X[3])

    # midpoint of the closest points of the two rays
    da = pose_a.R @ cam.bearing(obs_a)
    db = pose_b.R @ cam.bearing(obs_b)
    w0 = pose_a.translation - pose_b.translation
    a, b, c = da @ da, da @ db, db @ db
    d, e = da @ w0, db @ w0
    den = a * c - b * b
    if den > 1e-15:
        sa = (b * e - c * d) / den
        sb = (a * e - b * d) / den
        candidates.append(0.5 * (pose_a.translation + sa * da + pose_b.translation + sb * db))

    best, best_cost = None, math.inf
    for X in candidates:
        cost = _reprojection_cost(X, (pose_a, pose_b), cam, (obs_a, obs_b))
        if cost < best_cost:
            best, best_cost = X, cost
    if best is None:
        raise NegativeDepth("triangulated point lies behind a camera")
    z = pose_a.apply_inverse(best)[2]
    if z <= Z_MIN:
        raise NegativeDepth("triangulated point lies behind the anchor camera")
    return 1.0 / z


# --------------------------------------------------------------------------
# Alignment

def umeyama_sim3(traj_est, traj_gt) -> Sim3:
    """Least-squares similarity mapping ``traj_est`` onto ``traj_gt``."""
    src = np.asarray(traj_est, dtype=float).reshape(-1, 3)
    dst = np.asarray(traj_gt, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("trajectories must have equal length")
    n = len(src)
    if n < 3:
        raise DegenerateConfiguration(f"need at least 3 positions, got {n}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] < 1e-12 or sv[1] < 1e-9 * sv[0]:
        raise DegenerateConfiguration("estimated positions are collinear or coincident")
    var_s = np.sum(xs**2) / n
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S) / var_s)
    if not scale > 0:
        raise DegenerateConfiguration("alignment produced a non-positive scale")
    t = mu_d - scale * R @ mu_s
    return Sim3.from_sRt(scale, R, t)
