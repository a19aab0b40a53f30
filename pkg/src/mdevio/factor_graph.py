"""Sliding-window nonlinear least squares over poses and inverse depths.

The cost is the sum of four residual families::

    J = sum w_C * huber(|r_C|) + sum r_I' Info r_I + sum w_D w_g r_D^2 + sum w_O r_O^2

* ``r_C`` reprojection of an anchored inverse-depth landmark (pixels),
* ``r_I`` relative-motion factor between two keyframes,
* ``r_D`` unary prior on a landmark's inverse depth from aligned network depth,
* ``r_O`` soft hinge on the depth order of two landmarks, evaluated on their
  inverse depths in the frame where the pair was selected.

All residuals are evaluated in batches; the Jacobian is assembled as a sparse
matrix and the damped normal equations are solved densely (a window has a few
hundred unknowns).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .depth_prior import AffineState, align
from .geometry import (Z_MIN, Camera, Pose, hat, project_many, so3_exp, so3_log)
from .ordinal import hinge

log = logging.getLogger(__name__)

INV_DEPTH_MIN = 1e-4
INV_DEPTH_MAX = 1e3

REPROJECTION, ODOMETRY, DEPTH, ORDINAL = "reprojection", "odometry", "depth", "ordinal"
FAMILIES = (REPROJECTION, ODOMETRY, DEPTH, ORDINAL)


class PointBehindCamera(ValueError):
    pass


class SingularNormalEquations(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 8
    lm_lambda_init: float = 1e-4
    rel_tol: float = 1e-4
    cost_floor: float = 1e-20
    depth_weight: float = 300.0
    ordinal_weight: float = 10.0
    huber_delta: float = 1.0
    ordinal_epsilon: float = 0.02
    # information of one pixel of reprojection error (1 / sigma_px^2)
    reprojection_weight: float = 1.0 / 1.5**2
    inv_depth_bounds: tuple = (INV_DEPTH_MIN, INV_DEPTH_MAX)
    # relative pivot below which the Jacobi-scaled normal matrix is rank deficient
    rank_tol: float = 1e-10

    def __post_init__(self):
        if self.max_iterations < 1 or self.lm_lambda_init <= 0 or self.rel_tol <= 0:
            raise ValueError("invalid solver iteration settings")
        if self.depth_weight < 0 or self.ordinal_weight < 0 or self.huber_delta <= 0:
            raise ValueError("weights must be non-negative and huber_delta positive")

    @classmethod
    def synthetic_urban(cls, **kw) -> SolverConfig:
        return cls(**{"depth_weight": 300.0, "ordinal_weight": 10.0, **kw})

    @classmethod
    def real_world(cls, **kw) -> SolverConfig:
        return cls(**{"depth_weight": 100.0, "ordinal_weight": 10.0, **kw})


# --------------------------------------------------------------------------
# State

@dataclass(frozen=True, eq=False)
class Landmark:
    """Inverse-depth landmark anchored in keyframe ``anchor``.

    ``bearing`` is the anchor ray with unit z, so the point in the anchor
    frame is ``bearing / inv_depth``.
    """

    anchor: int
    inv_depth: float
    bearing: np.ndarray
    observations: dict = field(default_factory=dict)

    @classmethod
    def from_pixel(cls, cam: Camera, anchor: int, pixel, inv_depth: float, observations=None):
        return cls(anchor, float(inv_depth), cam.bearing(pixel), dict(observations or {}))

    def point_in_anchor(self) -> np.ndarray:
        return self.bearing / self.inv_depth


@dataclass(eq=False)
class WindowState:
    """Keyframes keyed by frame id plus landmarks keyed by feature id."""

    frame_ids: list
    poses: list
    landmarks: dict = field(default_factory=dict)
    fixed: set = field(default_factory=set)
    capacity: int = 10

    def index(self, frame_id: int) -> int:
        return self.frame_ids.index(frame_id)

    def pose(self, frame_id: int) -> Pose:
        return self.poses[self.index(frame_id)]

    def copy(self) -> WindowState:
        return WindowState(list(self.frame_ids), list(self.poses), dict(self.landmarks),
                           set(self.fixed), self.capacity)

    def check(self) -> None:
        ids = set(self.frame_ids)
        for fid, lm in self.landmarks.items():
            if lm.anchor not in ids:
                raise ValueError(f"landmark {fid} anchored outside the window")
        if not self.fixed & ids:
            raise ValueError("at least one pose must be fixed")


# --------------------------------------------------------------------------
# Single-block residuals (reference API; the solver uses batched kernels)

def reprojection_residual(pose_anchor: Pose, pose_obs: Pose, cam: Camera, landmark: Landmark,
                          pixel_obs) -> np.ndarray:
    if not landmark.inv_depth > 0:
        raise PointBehindCamera("inverse depth must be positive")
    xw = pose_anchor.apply(landmark.point_in_anchor())
    xc = pose_obs.inverse().apply(xw)
    if xc[2] <= Z_MIN:
        raise PointBehindCamera("landmark is behind the observing camera")
    return project_many(cam, xc) - np.asarray(pixel_obs, dtype=float)


def odometry_residual(pose_a: Pose, pose_b: Pose, measured_relative: Pose) -> np.ndarray:
    """``(t, Log R)`` of ``measured^-1 * (pose_a^-1 * pose_b)``."""
    Rab = pose_a.R.T @ pose_b.R
    tab = pose_a.R.T @ (pose_b.translation - pose_a.translation)
    Rm = measured_relative.R
    t_err = Rm.T @ (tab - measured_relative.translation)
    return np.concatenate([t_err, so3_log(Rm.T @ Rab)])


def depth_residual(d_k: float, d_mde: float, affine: AffineState) -> float:
    return float(d_k - align(affine, d_mde))


def huber_cost(e, delta: float):
    e = np.asarray(e, dtype=float)
    return np.where(e <= delta, e * e, 2.0 * delta * e - delta * delta)


# --------------------------------------------------------------------------
# Depth-assisted initialisation

class MdiResult(NamedTuple):
    accepted: bool
    inv_depth: float
    error_px: float


def mdi_initialize(cam: Camera, pose_i: Pose, pose_j: Pose, u_i, u_j, candidate_inv_depth: float,
                   tau: float = 3.0) -> MdiResult:
    """Accept a network depth hypothesis if it reprojects within ``tau`` pixels.

    ``candidate_inv_depth`` is the aligned network inverse depth at ``u_i``
    (normally the 5x5 patch maximum, see
    :func:`mdevio.depth_prior.sample_depth`).
    """
    if not candidate_inv_depth > 0:
        return MdiResult(False, float(candidate_inv_depth), math.inf)
    if np.linalg.norm(pose_i.translation - pose_j.translation) < 1e-12:
        return MdiResult(False, float(candidate_inv_depth), math.inf)
    x_i = cam.bearing(u_i) / candidate_inv_depth
    x_j = pose_j.inverse().apply(pose_i.apply(x_i))
    if x_j[2] <= Z_MIN:
        return MdiResult(False, float(candidate_inv_depth), math.inf)
    err = float(np.linalg.norm(project_many(cam, x_j) - np.asarray(u_j, dtype=float)))
    return MdiResult(err < tau, float(candidate_inv_depth), err)


# --------------------------------------------------------------------------
# Batched kernels.  Pose increments are ordered (dp, dtheta).

def _matvec(M, v):
    return np.einsum("nij,nj->ni", M, v)


def transform_to_frame(R, p, rho, bearing, a, b, jac=True):
    """Point of landmark (anchored in pose ``a``) in the frame of pose ``b``.

    Returns ``x_b`` and, with ``jac``, the derivatives of ``x_b`` w.r.t. the
    increments of pose ``a`` (N, 3, 6), pose ``b`` (N, 3, 6) and ``rho`` (N, 3).
    """
    Ra, Rb = R[a], R[b]
    RbT = np.transpose(Rb, (0, 2, 1))
    xa = bearing / rho[:, None]
    xw = _matvec(Ra, xa) + p[a]
    xb = _matvec(RbT, xw - p[b])
    if not jac:
        return xb
    RbTRa = RbT @ Ra
    d_rho = -_matvec(RbTRa, bearing) / (rho**2)[:, None]
    Ja = np.concatenate([RbT, -RbTRa @ hat(xa)], axis=2)
    Jb = np.concatenate([-RbT, hat(xb)], axis=2)
    return xb, Ja, Jb, d_rho


def projection_jacobian(cam: Camera, x):
    z = x[:, 2]
    J = np.zeros((len(x), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x[:, 0] / z**2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * x[:, 1] / z**2
    return J


def reprojection_kernel(cam: Camera, R, p, rho, bearing, a, b, pixel, jac=True):
    """Batched reprojection residuals ``pi(x_b) - pixel``.

    Returns ``(r, valid)`` or ``(r, valid, J_a, J_b, J_rho)`` with shapes
    (N, 2), (N,), (N, 2, 6), (N, 2, 6), (N, 2).
    """
    out = transform_to_frame(R, p, rho, bearing, a, b, jac)
    xb = out[0] if jac else out
    valid = xb[:, 2] > Z_MIN
    safe = np.where(valid[:, None], xb, np.array([0.0, 0.0, 1.0]))
    r = project_many(cam, safe) - pixel
    if not jac:
        return r, valid
    _, Ja, Jb, d_rho = out
    P = projection_jacobian(cam, safe)
    return r, valid, P @ Ja, P @ Jb, _matvec(P, d_rho)


def inverse_depth_kernel(R, p, rho, bearing, a, k, jac=True):
    """Inverse depth of landmarks in frame ``k`` with derivatives."""
    out = transform_to_frame(R, p, rho, bearing, a, k, jac)
    xk = out[0] if jac else out
    z = xk[:, 2]
    d = 1.0 / z
    if not jac:
        return d
    _, Ja, Jk, d_rho = out
    s = -1.0 / z**2
    return d, s[:, None] * Ja[:, 2, :], s[:, None] * Jk[:, 2, :], s * d_rho[:, 2]


def _so3_log_batch(R):
    """:func:`so3_log` over (N, 3, 3); the near-pi branch falls back to the scalar version."""
    cos = np.clip((np.trace(R, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    v = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    small = theta < 1e-8
    sin = np.where(small, 1.0, np.sin(theta))
    out = v * np.where(small, 0.5, theta / (2.0 * sin))[:, None]
    for i in np.flatnonzero(math.pi - theta < 1e-6):
        out[i] = so3_log(R[i])
    return out


def _right_jacobian_inv_batch(w):
    theta = np.linalg.norm(w, axis=1)
    K = hat(w)
    small = theta < 1e-6
    th = np.where(small, 1.0, theta)
    c = np.where(small, 1.0 / 12.0, 1.0 / th**2 - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th)))
    return np.eye(3) + 0.5 * K + c[:, None, None] * (K @ K)


def odometry_kernel(R, p, a, b, meas_R, meas_t, jac=True):
    """Batched ``(t_err, Log R_err)`` residuals with Jacobians (N, 6, 6)."""
    n = len(a)
    Ra, Rb = R[a], R[b]
    RaT = np.transpose(Ra, (0, 2, 1))
    MT = np.transpose(meas_R, (0, 2, 1))
    Rab = RaT @ Rb
    tab = _matvec(RaT, p[b] - p[a])
    t_err = _matvec(MT, tab - meas_t)
    Re = MT @ Rab
    phi = _so3_log_batch(Re)
    r = np.concatenate([t_err, phi], axis=1)
    if not jac:
        return r
    Jri = _right_jacobian_inv_batch(phi)
    Ja = np.zeros((n, 6, 6))
    Jb = np.zeros((n, 6, 6))
    MTRaT = MT @ RaT
    Ja[:, :3, :3] = -MTRaT
    Ja[:, :3, 3:] = MT @ hat(tab)
    Ja[:, 3:, 3:] = -Jri @ np.transpose(Rab, (0, 2, 1))
    Jb[:, :3, :3] = MTRaT
    Jb[:, 3:, 3:] = Jri
    return r, Ja, Jb


# --------------------------------------------------------------------------
# Residual blocks

class ResidualBlock(NamedTuple):
    """One residual term; ``keys`` are frame ids / feature ids by kind.

    * reprojection: keys ``(feature_id, frame_id)``, measurement = pixel
    * odometry: keys ``(frame_a, frame_b)``, measurement = relative Pose,
      weight = 6-vector of information
    * depth: keys ``(feature_id,)``, measurement = aligned prior inverse depth
    * ordinal: keys ``(near_id, far_id, frame_id)``, measurement unused
    """

    kind: str
    keys: tuple
    weight: object
    measurement: object = None


class FactorGraph:
    """Residual blocks of one window, stored per family for batch evaluation."""

    def __init__(self):
        self.reproj = {"lm": [], "frame": [], "pixel": [], "weight": []}
        self.odom = {"a": [], "b": [], "meas": [], "info": []}
        self.depth = {"lm": [], "target": [], "weight": []}
        self.ordinal = {"near": [], "far": [], "frame": [], "weight": []}

    @classmethod
    def from_blocks(cls, blocks) -> FactorGraph:
        g = cls()
        for b in blocks:
            g.add(b)
        return g

    def add(self, block: ResidualBlock) -> None:
        if block.kind == REPROJECTION:
            self.add_reprojection(block.keys[0], block.keys[1], block.measurement, block.weight)
        elif block.kind == ODOMETRY:
            self.add_odometry(block.keys[0], block.keys[1], block.measurement, block.weight)
        elif block.kind == DEPTH:
            self.add_depth(block.keys[0], block.measurement, block.weight)
        elif block.kind == ORDINAL:
            self.add_ordinal(*block.keys, weight=block.weight)
        else:
            raise ValueError(f"unknown residual kind {block.kind!r}")

    def add_reprojection(self, feature_id, frame_id, pixel, weight):
        if weight < 0:
            raise ValueError("weights must be non-negative")
        self.reproj["lm"].append(feature_id)
        self.reproj["frame"].append(frame_id)
        self.reproj["pixel"].append(np.asarray(pixel, dtype=float))
        self.reproj["weight"].append(float(weight))

    def add_odometry(self, frame_a, frame_b, measured: Pose, info):
        info = np.broadcast_to(np.asarray(info, dtype=float), (6,))
        if np.any(info < 0):
            raise ValueError("information must be positive semi-definite")
        self.odom["a"].append(frame_a)
        self.odom["b"].append(frame_b)
        self.odom["meas"].append(measured)
        self.odom["info"].append(info)

    def add_depth(self, feature_id, target, weight):
        if weight < 0:
            raise ValueError("weights must be non-negative")
        self.depth["lm"].append(feature_id)
        self.depth["target"].append(float(target))
        self.depth["weight"].append(float(weight))

    def add_ordinal(self, near_id, far_id, frame_id, weight):
        if weight < 0:
            raise ValueError("weights must be non-negative")
        self.ordinal["near"].append(near_id)
        self.ordinal["far"].append(far_id)
        self.ordinal["frame"].append(frame_id)
        self.ordinal["weight"].append(float(weight))

    def counts(self) -> dict:
        return {REPROJECTION: len(self.reproj["lm"]), ODOMETRY: len(self.odom["a"]),
                DEPTH: len(self.depth["lm"]), ORDINAL: len(self.ordinal["near"])}

    def blocks(self):
        for lm, fr, px, w in zip(*self.reproj.values()):
            yield ResidualBlock(REPROJECTION, (lm, fr), w, px)
        for a, b, m, info in zip(*self.odom.values()):
            yield ResidualBlock(ODOMETRY, (a, b), info, m)
        for lm, tgt, w in zip(*self.depth.values()):
            yield ResidualBlock(DEPTH, (lm,), w, tgt)
        for n, f, fr, w in zip(*self.ordinal.values()):
            yield ResidualBlock(ORDINAL, (n, f, fr), w)


class _Problem:
    """Index-resolved arrays for one solve."""

    def __init__(self, state: WindowState, graph: FactorGraph, cam: Camera, cfg: SolverConfig):
        self.cam, self.cfg = cam, cfg
        self.frame_ids = list(state.frame_ids)
        slot = {f: i for i, f in enumerate(self.frame_ids)}
        self.lm_ids = list(state.landmarks)
        lslot = {f: i for i, f in enumerate(self.lm_ids)}
        P, L = len(self.frame_ids), len(self.lm_ids)
        self.P, self.L = P, L

        self.R = np.array([ps.R for ps in state.poses]).reshape(P, 3, 3)
        self.p = np.array([ps.translation for ps in state.poses]).reshape(P, 3)
        lms = [state.landmarks[f] for f in self.lm_ids]
        self.rho = np.array([lm.inv_depth for lm in lms], dtype=float)
        self.lm_anchor = np.array([slot[lm.anchor] for lm in lms], dtype=int)
        self.bearing = np.array([lm.bearing for lm in lms], dtype=float).reshape(L, 3)

        fixed = np.array([f in state.fixed for f in self.frame_ids], dtype=bool)
        self.fixed = fixed
        col = np.full(6 * P + L, -1, dtype=int)
        n = 0
        for i in range(P):
            if not fixed[i]:
                col[6 * i:6 * i + 6] = np.arange(n, n + 6)
                n += 6
        col[6 * P:] = np.arange(n, n + L)
        self.col, self.n = col, n + L

        def ints(lst, table):
            return np.array([table[x] for x in lst], dtype=int)

        g = graph
        self.c_lm = ints(g.reproj["lm"], lslot)
        self.c_b = ints(g.reproj["frame"], slot)
        self.c_a = self.lm_anchor[self.c_lm] if len(self.c_lm) else np.zeros(0, dtype=int)
        self.c_px = np.array(g.reproj["pixel"], dtype=float).reshape(-1, 2)
        self.c_w = np.array(g.reproj["weight"], dtype=float)
        keep = self.c_a != self.c_b
        for name in ("c_lm", "c_b", "c_a", "c_px", "c_w"):
            setattr(self, name, getattr(self, name)[keep])

        self.i_a = ints(g.odom["a"], slot)
        self.i_b = ints(g.odom["b"], slot)
        self.i_R = np.array([m.R for m in g.odom["meas"]], dtype=float).reshape(-1, 3, 3)
        self.i_t = np.array([m.translation for m in g.odom["meas"]], dtype=float).reshape(-1, 3)
        self.i_info = np.array(g.odom["info"], dtype=float).reshape(-1, 6)

        self.d_lm = ints(g.depth["lm"], lslot)
        self.d_tgt = np.array(g.depth["target"], dtype=float)
        self.d_w = np.array(g.depth["weight"], dtype=float)

        self.o_near = ints(g.ordinal["near"], lslot)
        self.o_far = ints(g.ordinal["far"], lslot)
        self.o_k = ints(g.ordinal["frame"], slot)
        self.o_w = np.array(g.ordinal["weight"], dtype=float)
        self._scatter = None

    # -- evaluation ---------------------------------------------------------

    def costs(self, R, p, rho) -> dict:
        cfg = self.cfg
        out = dict.fromkeys(FAMILIES, 0.0)
        if len(self.c_lm):
            r, valid = reprojection_kernel(self.cam, R, p, rho[self.c_lm], self.bearing[self.c_lm],
                                           self.c_a, self.c_b, self.c_px, jac=False)
            e = np.linalg.norm(r[valid], axis=1)
            out[REPROJECTION] = float(np.sum(self.c_w[valid] * huber_cost(e, cfg.huber_delta)))
        if len(self.i_a):
            r = odometry_kernel(R, p, self.i_a, self.i_b, self.i_R, self.i_t, jac=False)
            out[ODOMETRY] = float(np.sum(self.i_info * r**2))
        if len(self.d_lm):
            r = rho[self.d_lm] - self.d_tgt
            out[DEPTH] = float(np.sum(self.d_w * r**2))
        if len(self.o_near):
            dn = inverse_depth_kernel(R, p, rho[self.o_near], self.bearing[self.o_near],
                                      self.lm_anchor[self.o_near], self.o_k, jac=False)
            df = inverse_depth_kernel(R, p, rho[self.o_far], self.bearing[self.o_far],
                                      self.lm_anchor[self.o_far], self.o_k, jac=False)
            r, _, _ = hinge(dn, df, cfg.ordinal_epsilon)
            out[ORDINAL] = float(np.sum(self.o_w * r**2))
        return out

    def blocks(self, R, p, rho):
        """Per-family ``(J, cols, r, w)``: Jacobian blocks (N, nres, k), their
        state columns (N, k; -1 for fixed poses), residuals (N, nres) and
        IRLS row weights (N, nres)."""
        P = self.P
        out = []

        def pose_cols(idx):
            return 6 * idx[:, None] + np.arange(6)[None, :]

        def add(J, vc, r, w):
            out.append((J, self.col[vc], r.reshape(len(J), -1), w.reshape(len(J), -1)))

        if len(self.c_lm):
            r, valid, Ja, Jb, Jr = reprojection_kernel(
                self.cam, R, p, rho[self.c_lm], self.bearing[self.c_lm], self.c_a, self.c_b, self.c_px)
            e = np.linalg.norm(r, axis=1)
            delta = self.cfg.huber_delta
            w = self.c_w * np.where(e <= delta, 1.0, delta / np.maximum(e, 1e-300))
            w = np.where(valid, w, 0.0)
            r = np.where(valid[:, None], r, 0.0)
            J = np.concatenate([Ja, Jb, Jr[:, :, None]], axis=2)
            vc = np.concatenate([pose_cols(self.c_a), pose_cols(self.c_b), (6 * P + self.c_lm)[:, None]], axis=1)
            add(J, vc, r, np.repeat(w[:, None], 2, axis=1))
        if len(self.i_a):
            r, Ja, Jb = odometry_kernel(R, p, self.i_a, self.i_b, self.i_R, self.i_t)
            J = np.concatenate([Ja, Jb], axis=2)
            vc = np.concatenate([pose_cols(self.i_a), pose_cols(self.i_b)], axis=1)
            add(J, vc, r, self.i_info)
        if len(self.d_lm):
            r = rho[self.d_lm] - self.d_tgt
            add(np.ones((len(r), 1, 1)), (6 * P + self.d_lm)[:, None], r, self.d_w)
        if len(self.o_near):
            an, af = self.lm_anchor[self.o_near], self.lm_anchor[self.o_far]
            dn, dn_a, dn_k, dn_r = inverse_depth_kernel(R, p, rho[self.o_near], self.bearing[self.o_near], an, self.o_k)
            df, df_a, df_k, df_r = inverse_depth_kernel(R, p, rho[self.o_far], self.bearing[self.o_far], af, self.o_k)
            r, gn, gf = hinge(dn, df, self.cfg.ordinal_epsilon)
            J = np.concatenate([gn[:, None] * dn_a, gf[:, None] * df_a,
                                gn[:, None] * dn_k + gf[:, None] * df_k,
                                (gn * dn_r)[:, None], (gf * df_r)[:, None]], axis=1)[:, None, :]
            vc = np.concatenate([pose_cols(an), pose_cols(af), pose_cols(self.o_k),
                                 (6 * P + self.o_near)[:, None], (6 * P + self.o_far)[:, None]], axis=1)
            add(J, vc, r, self.o_w)
        return out

    def linearize(self, R, p, rho):
        """Sparse Jacobian (free columns), residuals and IRLS row weights."""
        rows, cols, vals, res, wts = [], [], [], [], []
        m = 0
        for J, vc, r, w in self.blocks(R, p, rho):
            N, nres, k = J.shape
            r_idx = m + np.arange(N * nres).reshape(N, nres)
            rows.append(np.repeat(r_idx[:, :, None], k, axis=2).ravel())
            cols.append(np.repeat(vc[:, None, :], nres, axis=1).ravel())
            vals.append(J.ravel())
            res.append(r.ravel())
            wts.append(w.ravel())
            m += N * nres
        if m == 0:
            return sp.csr_matrix((0, self.n)), np.zeros(0), np.zeros(0)
        rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
        keep = cols >= 0
        J = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(m, self.n))
        return J, np.concatenate(res), np.concatenate(wts)

    def normal_equations(self, R, p, rho):
        """Dense ``H = J^T W J`` and ``g = J^T W r``, accumulated block by block."""
        n = self.n
        blocks = self.blocks(R, p, rho)
        if not blocks:
            return np.zeros((n, n)), np.zeros(n)
        if self._scatter is None:
            # the sparsity pattern is fixed for the whole solve
            self._scatter = []
            for _, vc, _, _ in blocks:
                ok = vc >= 0
                pair = ok[:, :, None] & ok[:, None, :]
                self._scatter.append((ok, pair, (vc[:, :, None] * n + vc[:, None, :])[pair], vc[ok]))
            self._h_idx = np.concatenate([s[2] for s in self._scatter])
            self._g_idx = np.concatenate([s[3] for s in self._scatter])
        hv, gv = [], []
        for (J, _, r, w), (ok, pair, _, _) in zip(blocks, self._scatter):
            JWt = (J * w[:, :, None]).transpose(0, 2, 1)
            hv.append((JWt @ J)[pair])
            gv.append((JWt @ r[:, :, None])[:, :, 0][ok])
        H = np.bincount(self._h_idx, weights=np.concatenate(hv), minlength=n * n)
        g = np.bincount(self._g_idx, weights=np.concatenate(gv), minlength=n)
        return H.reshape(n, n), g

    def retract(self, R, p, rho, delta):
        free = np.flatnonzero(~self.fixed)
        dp = delta[:6 * len(free)].reshape(-1, 6)
        R2, p2 = R.copy(), p.copy()
        if len(free):
            R2[free] = R[free] @ so3_exp(dp[:, 3:])
            p2[free] = p[free] + dp[:, :3]
        lo, hi = self.cfg.inv_depth_bounds
        rho2 = np.clip(rho + delta[6 * len(free):], lo, hi)
        return R2, p2, rho2


def _check_rank(H: np.ndarray, tol: float) -> None:
    d = np.diag(H)
    if np.any(d <= 0):
        raise SingularNormalEquations("a state has no information (zero diagonal)")
    s = 1.0 / np.sqrt(d)
    Hs = H * s[:, None] * s[None, :]
    _, _, rank, info = scipy.linalg.lapack.dpstrf(Hs, lower=1, tol=tol)
    if rank < len(H):
        raise SingularNormalEquations(f"normal equations have rank {rank} < {len(H)}")


class SolveResult(NamedTuple):
    state: WindowState
    cost_trace: list
    iterations: int
    family_costs: dict


def solve_window(state: WindowState, graph: FactorGraph, cam: Camera,
                 cfg: SolverConfig = SolverConfig()) -> SolveResult:
    """Levenberg-Marquardt on the window cost.

    The accepted-step cost trace is non-increasing; inverse depths are
    clamped to ``cfg.inv_depth_bounds`` after every step.
    """
    if not state.fixed & set(state.frame_ids):
        raise SingularNormalEquations("no pose is held fixed; the gauge is free")
    prob = _Problem(state, graph, cam, cfg)
    R, p, rho = prob.R, prob.p, prob.rho
    fam = prob.costs(R, p, rho)
    cost = sum(fam.values())
    trace = [cost]
    lam = cfg.lm_lambda_init
    it = 0
    while it < cfg.max_iterations and cost > cfg.cost_floor and prob.n > 0:
        H, g = prob.normal_equations(R, p, rho)
        if it == 0:
            _check_rank(H, cfg.rank_tol)
        it += 1
        diag = np.diag(H).copy()
        accepted = False
        while lam < 1e12:
            A = H + np.diag(lam * diag)
            try:
                c = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
                delta = -scipy.linalg.cho_solve(c, g, check_finite=False)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            R2, p2, rho2 = prob.retract(R, p, rho, delta)
            fam2 = prob.costs(R2, p2, rho2)
            cost2 = sum(fam2.values())
            if np.isfinite(cost2) and cost2 <= cost:
                accepted = True
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
        if not accepted:
            break
        rel = (cost - cost2) / cost if cost > 0 else 0.0
        R, p, rho, cost, fam = R2, p2, rho2, cost2, fam2
        trace.append(cost)
        if rel < cfg.rel_tol:
            break

    new = state.copy()
    new.poses = [Pose.from_Rt(R[i], p[i]) if not prob.fixed[i] else state.poses[i] for i in range(prob.P)]
    new.landmarks = dict(state.landmarks)
    for i, fid in enumerate(prob.lm_ids):
        new.landmarks[fid] = replace(state.landmarks[fid], inv_depth=float(rho[i]))
    return SolveResult(new, trace, it, fam)


def total_cost(state: WindowState, graph: FactorGraph, cam: Camera, cfg: SolverConfig = SolverConfig()) -> dict:
    """Per-family cost subtotals at the given state."""
    prob = _Problem(state, graph, cam, cfg)
    return prob.costs(prob.R, prob.p, prob.rho)


# --------------------------------------------------------------------------
# Window sliding

def marginalize_slide(state: WindowState, cam: Optional[Camera] = None) -> WindowState:
    """Drop the oldest keyframe of a full window.

    Landmarks anchored there move to their next observing keyframe (their
    point is transferred exactly; the bearing becomes that keyframe's
    observation when ``cam`` is given, else the transferred ray) or are
    dropped when no remaining keyframe observes them.  The new oldest pose is
    held fixed in place of a marginalisation prior.
    """
    if len(state.frame_ids) < state.capacity:
        return state
    old = state.frame_ids[0]
    old_pose = state.poses[0]
    new = WindowState(list(state.frame_ids[1:]), list(state.poses[1:]), {}, set(), state.capacity)
    inverses = {}
    for fid, lm in state.landmarks.items():
        obs = {f: u for f, u in lm.observations.items() if f != old}
        if lm.anchor != old:
            new.landmarks[fid] = replace(lm, observations=obs)
            continue
        later = [f for f in new.frame_ids if f in obs]
        if not later:
            continue
        anchor = later[0]
        if anchor not in inverses:
            inverses[anchor] = new.pose(anchor).inverse()
        x_new = inverses[anchor].apply(old_pose.apply(lm.point_in_anchor()))
        if x_new[2] <= Z_MIN:
            continue
        bearing = cam.bearing(obs[anchor]) if cam is not None else x_new / x_new[2]
        new.landmarks[fid] = Landmark(anchor, 1.0 / x_new[2], bearing, obs)
    new.fixed = {new.frame_ids[0]}
    return new
