"""Deterministic synthetic sequences for exercising the estimator.

A scene is a set of textured rectangles (room walls, floor, ceiling and
optional pillars) plus free-floating clutter points.  For each frame the
generator renders the true depth by ray casting, places feature tracks on
scene points, perturbs pixel observations and relative-motion measurements,
and produces a network-like depth map::

    d_hat = (d_true_inv - t_k) / s_k            (affine_inverse mode)

with ``(s_k, t_k)`` following a slow random walk plus per-frame jitter
(flicker), multiplicative per-pixel noise and occasional outlier blobs.
Metric-mode maps hold ``1 / d_hat``.

Every random component draws from its own stream so that, for one seed,
changing the depth-noise model leaves trajectories and tracks untouched.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .depth_prior import (DepthMap, DepthMode, dift_transform, gradient_magnitude, read_depth_map,
                          sample_depth, write_depth_map,
                          to_gray)
from .geometry import Camera, Pose, so3_exp

__all__ = ["SceneConfig", "MdeNoiseModel", "FrameBundle", "SyntheticSequence", "generate_sequence",
           "sample_depth", "default_camera", "SCENE_PRESETS", "NOISE_PRESETS", "InvalidConfig",
           "save_sequence", "load_sequence"]

# typical inverse depth (1/m) used to express shift jitter
SHIFT_JITTER_UNIT = 0.1


class InvalidConfig(ValueError):
    pass


def default_camera() -> Camera:
    return Camera(fx=220.0, fy=220.0, cx=159.5, cy=119.5, width=320, height=240)


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    num_points: int = 2000
    extent: float = 20.0
    height: float = 4.0
    trajectory: str = "circle"
    speed: float = 1.0
    frame_rate: float = 10.0
    low_texture_fraction: float = 0.0
    pillars: int = 0
    clutter_fraction: float = 0.1
    max_features: int = 120
    track_lifetime: float = 15.0
    tracking_sigma: float = 0.5
    odom_sigma_t: float = 0.01
    odom_sigma_r_deg: float = 0.1
    render_images: bool = False
    # "gray" or "dift": image the simulated tracker works on
    tracking_image: str = "gray"

    def validate(self) -> None:
        if self.num_points <= 0:
            raise InvalidConfig("num_points must be positive")
        if not self.frame_rate > 0 or not self.speed > 0:
            raise InvalidConfig("frame_rate and speed must be positive")
        if self.trajectory not in ("circle", "lawnmower", "corridor"):
            raise InvalidConfig(f"unknown trajectory {self.trajectory!r}")
        if not 0.0 <= self.low_texture_fraction <= 1.0:
            raise InvalidConfig("low_texture_fraction must lie in [0, 1]")
        if min(self.tracking_sigma, self.odom_sigma_t, self.odom_sigma_r_deg) < 0:
            raise InvalidConfig("noise levels must be non-negative")
        if self.max_features < 1 or self.track_lifetime < 1:
            raise InvalidConfig("max_features and track_lifetime must be >= 1")
        if self.tracking_image not in ("gray", "dift"):
            raise InvalidConfig(f"unknown tracking image {self.tracking_image!r}")

    @property
    def texture_aware(self) -> bool:
        return self.render_images or self.low_texture_fraction > 0 or self.tracking_image == "dift"


@dataclass(frozen=True)
class MdeNoiseModel:
    mode: str = "affine_inverse"
    scale_true: float = 0.5
    shift_true: float = 0.02
    drift_sigma_s: float = 0.002
    drift_sigma_t: float = 0.0002
    flicker_sigma: float = 0.005
    pixel_noise_sigma: float = 0.02
    outlier_blob_rate: float = 0.3
    blob_radius: tuple = (5.0, 20.0)
    blob_multiplier: tuple = (0.3, 3.0)

    def validate(self) -> None:
        if self.mode not in ("affine_inverse", "metric"):
            raise InvalidConfig(f"unknown depth mode {self.mode!r}")
        if not self.scale_true > 0:
            raise InvalidConfig("scale_true must be positive")
        if min(self.drift_sigma_s, self.drift_sigma_t, self.flicker_sigma,
               self.pixel_noise_sigma, self.outlier_blob_rate) < 0:
            raise InvalidConfig("noise levels must be non-negative")

    @property
    def depth_mode(self) -> DepthMode:
        return DepthMode.METRIC if self.mode == "metric" else DepthMode.AFFINE_INVERSE


NOISE_PRESETS = {
    "noise-free": MdeNoiseModel(drift_sigma_s=0.0, drift_sigma_t=0.0, flicker_sigma=0.0,
                                pixel_noise_sigma=0.0, outlier_blob_rate=0.0),
    "video-like": MdeNoiseModel(flicker_sigma=0.005),
    "zero-shot-like": MdeNoiseModel(flicker_sigma=0.05),
}

SCENE_PRESETS = {
    "room": SceneConfig(),
    "noise-free": SceneConfig(tracking_sigma=0.0, odom_sigma_t=0.0, odom_sigma_r_deg=0.0),
    "layered": SceneConfig(pillars=8),
    "corridor": SceneConfig(trajectory="corridor", extent=60.0),
    "lawnmower": SceneConfig(trajectory="lawnmower"),
    "low-texture": SceneConfig(low_texture_fraction=0.6, pillars=4, render_images=True),
}


@dataclass(eq=False)
class FrameBundle:
    index: int
    timestamp: float
    true_pose: Pose
    feature_ids: np.ndarray
    pixels: np.ndarray
    depth: DepthMap
    # relative motion from the previous frame (None for frame 0)
    odometry: Optional[Pose] = None
    odometry_info: Optional[np.ndarray] = None
    image: Optional[np.ndarray] = None
    low_texture: Optional[np.ndarray] = None

    def observations(self) -> dict:
        return {int(f): self.pixels[i] for i, f in enumerate(self.feature_ids)}


@dataclass(eq=False)
class SyntheticSequence:
    camera: Camera
    scene: SceneConfig
    noise: MdeNoiseModel
    frames: list
    points: np.ndarray
    feature_point: dict
    affine_true: np.ndarray

    def __len__(self):
        return len(self.frames)

    def true_inverse_depth(self, frame_index: int, feature_id: int) -> float:
        pose = self.frames[frame_index].true_pose
        x = pose.inverse().apply(self.points[self.feature_point[feature_id]])
        return 1.0 / x[2]

    def true_inverse_depths(self, frame_index: int, feature_ids) -> np.ndarray:
        pose = self.frames[frame_index].true_pose
        pts = self.points[[self.feature_point[int(f)] for f in feature_ids]].reshape(-1, 3)
        return 1.0 / pose.inverse().apply(pts)[:, 2]

    def true_anchor_inverse_depth(self, feature_id: int) -> float:
        """Inverse depth of a feature in the frame where it was first seen."""
        for fr in self.frames:
            if feature_id in set(fr.feature_ids.tolist()):
                return self.true_inverse_depth(fr.index, feature_id)
        raise KeyError(feature_id)

    def gt_positions(self) -> np.ndarray:
        return np.array([f.true_pose.translation for f in self.frames])

    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])


# --------------------------------------------------------------------------
# Scene geometry

@dataclass(frozen=True, eq=False)
class _Rect:
    center: np.ndarray
    u: np.ndarray
    v: np.ndarray
    hu: float
    hv: float
    color: np.ndarray
    textured: bool

    @property
    def normal(self):
        return np.cross(self.u, self.v)

    @property
    def area(self):
        return 4 * self.hu * self.hv


def _rect(center, u, v, hu, hv, color, textured):
    return _Rect(np.asarray(center, float), np.asarray(u, float), np.asarray(v, float),
                 float(hu), float(hv), np.asarray(color, float), textured)


def _build_scene(cfg: SceneConfig, rng: np.random.Generator):
    L = cfg.extent
    W = L if cfg.trajectory != "corridor" else 6.0
    H = cfg.height
    ex, ey, ez = np.eye(3)
    specs = [
        ((L / 2, 0, H / 2), ey, ez, W / 2, H / 2),    # +x wall
        ((-L / 2, 0, H / 2), ey, ez, W / 2, H / 2),   # -x wall
        ((0, W / 2, H / 2), ex, ez, L / 2, H / 2),    # +y wall
        ((0, -W / 2, H / 2), ex, ez, L / 2, H / 2),   # -y wall
        ((0, 0, 0), ex, ey, L / 2, W / 2),            # floor
        ((0, 0, H), ex, ey, L / 2, W / 2),            # ceiling
    ]
    rects = []
    for c, u, v, hu, hv in specs:
        textured = rng.uniform() >= cfg.low_texture_fraction
        rects.append(_rect(c, u, v, hu, hv, rng.uniform(60, 200, 3), textured))
    # pillars on a ring between the circle trajectory and the walls
    for k in range(cfg.pillars):
        ang = 2 * math.pi * (k + rng.uniform(0.2, 0.8)) / cfg.pillars
        rad = rng.uniform(0.55, 0.8) * (W / 2)
        cx, cy = rad * math.cos(ang), rad * math.sin(ang)
        half = rng.uniform(0.3, 0.6)
        color = rng.uniform(60, 200, 3)
        textured = rng.uniform() >= cfg.low_texture_fraction
        for sgn, nrm, t1 in ((1, ex, ey), (-1, ex, ey), (1, ey, ex), (-1, ey, ex)):
            rects.append(_rect((cx + sgn * half * nrm[0], cy + sgn * half * nrm[1], H * 0.4),
                               t1, ez, half, H * 0.4, color, textured))
    return rects, (L, W, H)


def _sample_points(cfg: SceneConfig, rects, dims, rng: np.random.Generator):
    n_clutter = int(round(cfg.clutter_fraction * cfg.num_points))
    n_surf = cfg.num_points - n_clutter
    areas = np.array([r.area for r in rects])
    # pillars get a density boost so that foreground structure is populated
    weights = areas * np.array([1.0] * 6 + [4.0] * (len(rects) - 6))
    which = rng.choice(len(rects), size=n_surf, p=weights / weights.sum())
    a = rng.uniform(-1, 1, n_surf)
    b = rng.uniform(-1, 1, n_surf)
    pts = np.empty((cfg.num_points, 3))
    for i, r in enumerate(rects):
        m = which == i
        pts[:n_surf][m] = r.center + (a[m] * r.hu * 0.98)[:, None] * r.u + (b[m] * r.hv * 0.98)[:, None] * r.v
    L, W, H = dims
    pts[n_surf:] = np.c_[rng.uniform(-0.45 * L, 0.45 * L, n_clutter),
                         rng.uniform(-0.45 * W, 0.45 * W, n_clutter),
                         rng.uniform(0.3, H - 0.3, n_clutter)]
    if n_clutter:
        # keep clutter away from the camera path
        if cfg.trajectory == "circle":
            r = np.hypot(pts[n_surf:, 0], pts[n_surf:, 1])
            bad = np.abs(r - 0.25 * L) < 1.5
            pts[n_surf:][bad, :2] *= ((0.25 * L + 2.0) / np.maximum(r[bad], 1e-6))[:, None]
        elif cfg.trajectory == "corridor":
            pts[n_surf:, 1] = np.sign(pts[n_surf:, 1] + 1e-9) * np.maximum(np.abs(pts[n_surf:, 1]), 1.5)
    return pts, n_surf


# --------------------------------------------------------------------------
# Trajectories (camera-to-world, camera z forward, x right, y down)

def _look_rotation(forward, up=(0.0, 0.0, 1.0)):
    f = np.asarray(forward, float)
    f = f / np.linalg.norm(f)
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return np.column_stack([right, down, f])


def _trajectory(cfg: SceneConfig, dims, n_frames: int):
    L, W, H = dims
    poses = []
    step = cfg.speed / cfg.frame_rate
    for k in range(n_frames):
        s = k * step
        if cfg.trajectory == "circle":
            r = 0.25 * L
            th = s / r
            pos = np.array([r * math.cos(th), r * math.sin(th), 1.5 + 0.1 * math.sin(0.7 * th * 5)])
            yaw = th + math.radians(35.0) + 0.1 * math.sin(1.3 * th * 4)
            fwd = np.array([math.cos(yaw), math.sin(yaw), -0.05 + 0.03 * math.sin(th * 3)])
        elif cfg.trajectory == "corridor":
            pos = np.array([-0.4 * L + s, 0.6 * math.sin(s / 2.0), 1.5 + 0.1 * math.sin(s)])
            yaw = 0.25 * math.sin(s / 3.0)
            fwd = np.array([math.cos(yaw), math.sin(yaw), -0.03])
        else:
            row_len = 0.6 * L
            lane = int(s // row_len)
            u = s - lane * row_len
            x = -0.3 * L + (u if lane % 2 == 0 else row_len - u)
            y = -0.3 * W + 1.0 * lane + 0.2 * math.sin(s)
            pos = np.array([x, y, 1.5 + 0.1 * math.sin(0.5 * s)])
            fwd = np.array([0.2 * math.sin(0.3 * s), 1.0, -0.05])
        poses.append(Pose.from_Rt(_look_rotation(fwd), pos))
    return poses


# --------------------------------------------------------------------------
# Rendering

def _cast(cam: Camera, pose: Pose, rects, want_surface=False):
    """True metric depth per pixel (inf where no surface) and hit ids."""
    h, w = cam.height, cam.width
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    rays_c = np.stack([((uu - cam.cx) / cam.fx).ravel(), ((vv - cam.cy) / cam.fy).ravel(),
                       np.ones(h * w)], axis=1)
    o = pose.translation
    rays_w = rays_c @ pose.R.T
    depth = np.full(h * w, np.inf)
    hit = np.full(h * w, -1, dtype=int)
    su = np.zeros(h * w)
    sv = np.zeros(h * w)
    inv = pose.inverse()
    all_idx = np.arange(h * w)
    for i, r in enumerate(rects):
        corners = r.center + np.array([[su_, sv_] for su_ in (-1, 1) for sv_ in (-1, 1)]) \
            @ np.array([r.hu * r.u, r.hv * r.v])
        cc = inv.apply(corners)
        if np.all(cc[:, 2] <= 1e-3):
            continue
        if np.all(cc[:, 2] > 1e-3):
            # pixel bounding box of a rectangle fully in front of the camera
            px = cc[:, 0] / cc[:, 2] * cam.fx + cam.cx
            py = cc[:, 1] / cc[:, 2] * cam.fy + cam.cy
            c0, c1 = max(int(np.floor(px.min())), 0), min(int(np.ceil(px.max())), w - 1)
            r0, r1 = max(int(np.floor(py.min())), 0), min(int(np.ceil(py.max())), h - 1)
            if c0 > c1 or r0 > r1:
                continue
            idx = (np.arange(r0, r1 + 1)[:, None] * w + np.arange(c0, c1 + 1)[None, :]).ravel()
        else:
            idx = slice(None)
        # ray directions dotted with the rectangle's normal and in-plane axes
        proj = rays_w[idx] @ np.column_stack([r.normal, r.u, r.v])
        den = proj[:, 0]
        rel0 = o - r.center
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -(rel0 @ r.normal) / den
        ok = (t > 1e-3) & (t < depth[idx])
        if not ok.any():
            continue
        a = rel0 @ r.u + t * proj[:, 1]
        b = rel0 @ r.v + t * proj[:, 2]
        ok &= (np.abs(a) <= r.hu) & (np.abs(b) <= r.hv)
        sel = all_idx[idx][ok]
        depth[sel] = t[ok]
        hit[sel] = i
        if want_surface:
            su[sel] = a[ok]
            sv[sel] = b[ok]
    shape = (h, w)
    return depth.reshape(shape), hit.reshape(shape), su.reshape(shape), sv.reshape(shape)


def _nearest_fill(values, valid):
    if valid.all():
        return values
    if not valid.any():
        return np.full_like(values, 1e-3)
    idx = ndimage.distance_transform_edt(~valid, return_distances=False, return_indices=True)
    return values[tuple(idx)]


def _render_rgb(cam, pose, rects, rng, depth_hit):
    _, hit, su, sv = depth_hit
    img = np.zeros((cam.height, cam.width, 3))
    for i, r in enumerate(rects):
        m = hit == i
        if not m.any():
            continue
        col = np.broadcast_to(r.color, (int(m.sum()), 3)).copy()
        if r.textured:
            pattern = 45.0 * np.sin(2 * math.pi * su[m] / 0.7) * np.sin(2 * math.pi * sv[m] / 0.5)
            col += pattern[:, None]
        img[m] = col
    textured = np.zeros(hit.shape, dtype=bool)
    for i, r in enumerate(rects):
        if r.textured:
            textured |= hit == i
    img += textured[..., None] * rng.normal(0.0, 6.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), ~textured


# --------------------------------------------------------------------------
# Generation

def _validate_camera(cam: Camera):
    if cam.width < 8 or cam.height < 8:
        raise InvalidConfig("camera image too small")


def generate_sequence(cfg: SceneConfig = SceneConfig(), noise: MdeNoiseModel = MdeNoiseModel(),
                      cam: Optional[Camera] = None, n_frames: int = 100) -> SyntheticSequence:
    cfg.validate()
    noise.validate()
    cam = cam or default_camera()
    _validate_camera(cam)
    if n_frames < 1:
        raise InvalidConfig("n_frames must be positive")

    ss = np.random.SeedSequence(cfg.seed)
    (r_scene, r_track, r_obs, r_odom, r_affine, r_pix, r_blob, r_tex) = [
        np.random.default_rng(s) for s in ss.spawn(8)]

    rects, dims = _build_scene(cfg, r_scene)
    points, n_surf = _sample_points(cfg, rects, dims, r_scene)
    poses = _trajectory(cfg, dims, n_frames)

    # affine parameters per frame: slow random walk plus per-frame jitter
    s_walk, t_walk = noise.scale_true, noise.shift_true
    affine = np.zeros((n_frames, 2))
    for k in range(n_frames):
        if k:
            s_walk *= math.exp(noise.drift_sigma_s * r_affine.standard_normal())
            t_walk += noise.drift_sigma_t * r_affine.standard_normal()
        n1, n2 = r_affine.standard_normal(2)
        affine[k] = (s_walk * math.exp(noise.flicker_sigma * n1),
                     t_walk + noise.flicker_sigma * n2 * SHIFT_JITTER_UNIT)

    sig_t = cfg.odom_sigma_t
    sig_r = math.radians(cfg.odom_sigma_r_deg)
    odom_info = 1.0 / np.array([max(sig_t, 1e-3)] * 3 + [max(sig_r, 1e-4)] * 3) ** 2

    active: dict = {}     # feature id -> (point index, last frame)
    cooldown = np.full(len(points), -1)
    next_fid = 0
    feature_point = {}
    frames = []
    margin = 4.0

    for k, pose in enumerate(poses):
        want_img = cfg.texture_aware
        cast = _cast(cam, pose, rects, want_surface=want_img)
        surf_depth = cast[0]
        valid = np.isfinite(surf_depth)
        depth = _nearest_fill(np.where(valid, surf_depth, 0.0), valid)

        # visibility of scene points
        pc = pose.inverse().apply(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([cam.fx * pc[:, 0] / z + cam.cx, cam.fy * pc[:, 1] / z + cam.cy], axis=1)
        vis = (z > 0.3) & cam.in_bounds(np.nan_to_num(uv, nan=-1e9), margin)
        col = np.clip(np.rint(np.nan_to_num(uv[:, 0])).astype(int), 0, cam.width - 1)
        row = np.clip(np.rint(np.nan_to_num(uv[:, 1])).astype(int), 0, cam.height - 1)
        vis &= z <= depth[row, col] * 1.01 + 0.02

        # splat clutter (3x3), then surface landmarks (1 pixel) with exact depth
        inv = 1.0 / depth
        for idx in np.flatnonzero(vis[n_surf:]) + n_surf:
            r0, c0 = row[idx], col[idx]
            sl = (slice(max(r0 - 1, 0), r0 + 2), slice(max(c0 - 1, 0), c0 + 2))
            inv[sl] = np.maximum(inv[sl], 1.0 / z[idx])
        surf = np.zeros(len(points), dtype=bool)
        surf[:n_surf] = True
        vis &= ~surf | (z <= 1.0 / inv[row, col] * 1.01 + 0.02)
        vis_idx = np.flatnonzero(vis)
        # nearest point wins a shared pixel
        order = vis_idx[np.argsort(-z[vis_idx], kind="stable")]
        inv[row[order], col[order]] = np.where(surf[order], 1.0 / z[order],
                                               np.maximum(inv[row[order], col[order]], 1.0 / z[order]))
        # a point is observable only where the map holds its own depth; of two
        # points rounding to one pixel only the nearer can be tracked
        with np.errstate(divide="ignore"):
            vis &= inv[row, col] == 1.0 / z
        vis_idx = np.flatnonzero(vis)

        # tracks: continue, end, then detect
        for fid in list(active):
            pid, last = active[fid]
            if not vis[pid] or k > last:
                del active[fid]
                cooldown[pid] = k + 5
        tracked = {pid for pid, _ in active.values()}
        n_new = cfg.max_features - len(active)
        if n_new > 0:
            cand = [i for i in vis_idx if i not in tracked and cooldown[i] <= k]
            cand = np.array(cand, dtype=int)
            if len(cand):
                pick = r_track.permutation(len(cand))[:n_new]
                for pid in np.sort(cand[pick]):
                    life = max(2, int(r_track.geometric(1.0 / cfg.track_lifetime)))
                    active[next_fid] = (int(pid), k + life - 1)
                    feature_point[next_fid] = int(pid)
                    next_fid += 1

        fids = np.array(sorted(active), dtype=int)
        pids = np.array([active[f][0] for f in fids], dtype=int)
        true_px = uv[pids] if len(pids) else np.zeros((0, 2))

        # network depth map
        s_k, t_k = affine[k]
        d_hat = (inv - t_k) / s_k
        if noise.pixel_noise_sigma > 0:
            d_hat = d_hat * (1.0 + noise.pixel_noise_sigma * r_pix.standard_normal(d_hat.shape))
        n_blobs = r_blob.poisson(noise.outlier_blob_rate) if noise.outlier_blob_rate > 0 else 0
        if n_blobs:
            yy, xx = np.mgrid[0:cam.height, 0:cam.width]
            for _ in range(n_blobs):
                bx, by = r_blob.uniform(0, cam.width), r_blob.uniform(0, cam.height)
                rad = r_blob.uniform(*noise.blob_radius)
                mult = r_blob.uniform(*noise.blob_multiplier)
                m = (xx - bx) ** 2 + (yy - by) ** 2 <= rad * rad
                d_hat = np.where(m, d_hat * mult, d_hat)
        if noise.depth_mode == DepthMode.METRIC:
            values = 1.0 / np.maximum(d_hat, 1e-3)
        else:
            values = d_hat
        dmap = DepthMap(values.astype(np.float32), noise.depth_mode)

        # observations, with texture-dependent tracking noise
        sigma = np.full(len(fids), cfg.tracking_sigma)
        image = low_tex = None
        if want_img:
            image, low_tex = _render_rgb(cam, pose, rects, r_tex, cast)
            gray = dift_transform(image, dmap)[1] if cfg.tracking_image == "dift" else to_gray(image)
            g = ndimage.uniform_filter(gradient_magnitude(gray), size=7, mode="nearest")
            if len(fids):
                gl = g[row[pids], col[pids]]
                sigma = sigma * np.clip(30.0 / np.maximum(gl, 1e-6), 1.0, 6.0)
        noise_px = r_obs.standard_normal((len(fids), 2)) * sigma[:, None]
        pixels = true_px + noise_px
        pixels[:, 0] = np.clip(pixels[:, 0], 0.0, cam.width - 1.0)
        pixels[:, 1] = np.clip(pixels[:, 1], 0.0, cam.height - 1.0)

        odom = None
        if k:
            rel = poses[k - 1].inverse() @ pose
            nt = r_odom.standard_normal(3) * sig_t
            nr = r_odom.standard_normal(3) * sig_r
            odom = rel @ Pose.from_Rt(so3_exp(nr), nt) if (sig_t or sig_r) else rel

        frames.append(FrameBundle(k, k / cfg.frame_rate, pose, fids, pixels, dmap, odom,
                                  odom_info if k else None,
                                  image if cfg.render_images else None,
                                  low_tex if cfg.render_images else None))

    return SyntheticSequence(cam, cfg, noise, frames, points, feature_point, affine)


def track_mde_variances(seq: SyntheticSequence, window: int = 5, min_len: int = 3) -> np.ndarray:
    """Per-track sample variance of network inverse depth, motion removed.

    Every prediction is aligned with the first frame's true parameters, so
    frame-to-frame changes of ``(s_k, t_k)`` show up as variance, and then
    transferred into the track's first frame with the true poses.
    """
    cam = seq.camera
    s0, t0 = seq.affine_true[0]
    per_track: dict = {}
    for fr in seq.frames:
        if len(fr.feature_ids) == 0:
            continue
        vals = sample_depth(fr.depth, fr.pixels, "point")
        if fr.depth.mode == DepthMode.METRIC:
            vals = 1.0 / vals
        aligned = s0 * np.asarray(vals) + t0
        for fid, u, a in zip(fr.feature_ids, fr.pixels, aligned):
            per_track.setdefault(int(fid), []).append((fr.index, u, a))
    out = []
    for fid, obs in per_track.items():
        if len(obs) < min_len:
            continue
        obs = obs[:window]
        k0 = obs[0][0]
        T0inv = seq.frames[k0].true_pose.inverse()
        vals = []
        for k, u, a in obs:
            if a <= 0:
                continue
            x = T0inv.apply(seq.frames[k].true_pose.apply(cam.bearing(u) / a))
            vals.append(1.0 / x[2])
        if len(vals) >= 2:
            out.append(np.var(vals, ddof=1))
    return np.array(out)


# --------------------------------------------------------------------------
# On-disk layout: meta.json, frames/NNNNNN.dpm, tracks.csv, odom.csv, gt.csv
# (TUM), plus features.csv and points.csv for ground-truth depth queries.

def _g(x) -> str:
    return repr(float(x))


def save_sequence(seq: SyntheticSequence, out_dir) -> Path:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    cam = seq.camera
    info = next((f.odometry_info for f in seq.frames if f.odometry_info is not None), None)
    meta = {
        "format": 1,
        "seed": seq.scene.seed,
        "n_frames": len(seq.frames),
        "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                   "width": cam.width, "height": cam.height},
        "scene": asdict(seq.scene),
        "noise": asdict(seq.noise),
        "odometry_info": None if info is None else [float(v) for v in info],
        "affine_true": [[float(a), float(b)] for a, b in seq.affine_true],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for fr in seq.frames:
        write_depth_map(out / "frames" / f"{fr.index:06d}.dpm", fr.depth)
    with open(out / "tracks.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "feature_id", "u", "v"])
        for fr in seq.frames:
            for fid, (u, v) in zip(fr.feature_ids.tolist(), fr.pixels):
                w.writerow([fr.index, fid, _g(u), _g(v)])
    with open(out / "odom.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "qx", "qy", "qz", "qw", "tx", "ty", "tz"])
        for fr in seq.frames:
            if fr.odometry is not None:
                w.writerow([fr.index] + [_g(v) for v in (*fr.odometry.rotation, *fr.odometry.translation)])
    with open(out / "gt.csv", "w") as fh:
        for fr in seq.frames:
            p, q = fr.true_pose.translation, fr.true_pose.rotation
            fh.write(" ".join([_g(fr.timestamp)] + [_g(v) for v in (*p, *q)]) + "\n")
    with open(out / "features.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_id", "point"])
        for fid in sorted(seq.feature_point):
            w.writerow([fid, seq.feature_point[fid]])
    np.savetxt(out / "points.csv", seq.points, fmt="%.17g", delimiter=",")
    return out


def load_sequence(path) -> SyntheticSequence:
    """Inverse of :func:`save_sequence` (synthetic images are not stored)."""
    root = Path(path)
    meta = json.loads((root / "meta.json").read_text())
    cam = Camera(**meta["camera"])
    scene_kw = dict(meta["scene"])
    scene = SceneConfig(**scene_kw)
    noise_kw = dict(meta["noise"])
    for key in ("blob_radius", "blob_multiplier"):
        noise_kw[key] = tuple(noise_kw[key])
    noise = MdeNoiseModel(**noise_kw)
    n = int(meta["n_frames"])
    info = None if meta["odometry_info"] is None else np.array(meta["odometry_info"], dtype=float)

    obs: dict = {k: ([], []) for k in range(n)}
    with open(root / "tracks.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            ids, px = obs[int(row["frame"])]
            ids.append(int(row["feature_id"]))
            px.append((float(row["u"]), float(row["v"])))
    odom = {}
    with open(root / "odom.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            q = [float(row[k]) for k in ("qx", "qy", "qz", "qw")]
            t = [float(row[k]) for k in ("tx", "ty", "tz")]
            odom[int(row["frame"])] = Pose(np.array(q), np.array(t))
    gt = np.loadtxt(root / "gt.csv", ndmin=2)
    feature_point = {}
    with open(root / "features.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            feature_point[int(row["feature_id"])] = int(row["point"])
    points = np.loadtxt(root / "points.csv", delimiter=",", ndmin=2)

    frames = []
    for k in range(n):
        ids, px = obs[k]
        pose = Pose(gt[k, 4:8], gt[k, 1:4])
        frames.append(FrameBundle(k, float(gt[k, 0]), pose, np.array(ids, dtype=int),
                                  np.array(px, dtype=float).reshape(-1, 2),
                                  read_depth_map(root / "frames" / f"{k:06d}.dpm"),
                                  odom.get(k), info if k in odom else None))
    return SyntheticSequence(cam, scene, noise, frames, points, feature_point,
                             np.array(meta["affine_true"], dtype=float).reshape(-1, 2))
