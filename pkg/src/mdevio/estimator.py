"""Frame-by-frame sliding-window estimator driving the factor graph.

Each frame goes through ingest -> activate -> build -> solve -> update.  With
every prior switched off the graph holds reprojection and odometry blocks
only, which is the baseline all ablations compare against.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .depth_prior import (AffineState, GateConfig, NoValidModel, RansacConfig, TooFewCorrespondences,
                          align, estimate_affine_ransac, sample_depth, to_inverse_value,
                          update_affine_ema)
from .factor_graph import (Landmark, SingularNormalEquations, SolverConfig, WindowState, FactorGraph,
                           marginalize_slide, mdi_initialize, solve_window)
from .geometry import Camera, GeometryError, Pose, Z_MIN, triangulate
from .ordinal import OrdinalConfig, OrdinalHistory, count_violations, select_pairs

log = logging.getLogger(__name__)

TRIANGULATED = "triangulated"
MDI = "mdi"


@dataclass(frozen=True)
class EstimatorConfig:
    depth_residuals: bool = False
    ordinal: bool = False
    mdi: bool = False
    solver: SolverConfig = field(default_factory=SolverConfig.synthetic_urban)
    gate: GateConfig = GateConfig()
    ordinal_cfg: OrdinalConfig = OrdinalConfig()
    ransac: RansacConfig = RansacConfig()
    alpha: float = 0.1
    window: int = 10
    mdi_tau: float = 3.0
    parallax_min_deg: float = 1.0
    # landmarks enter the affine fit once their rays span this parallax,
    # however they were initialised
    affine_parallax_deg: float = 3.0
    min_affine_corrs: int = 8
    # landmarks whose mean reprojection error exceeds this are dropped
    outlier_px: float = 5.0

    @property
    def uses_depth(self) -> bool:
        return self.depth_residuals and self.solver.depth_weight > 0

    @property
    def uses_ordinal(self) -> bool:
        return self.ordinal and self.solver.ordinal_weight > 0


@dataclass
class Track:
    first_frame: int
    pixels: dict = field(default_factory=dict)
    # network inverse-depth samples: point read and 5x5 patch maximum
    mde: dict = field(default_factory=dict)
    mde_patch: dict = field(default_factory=dict)
    status: Optional[str] = None
    activated_at: Optional[int] = None


@dataclass
class RunLog:
    trajectory: dict = field(default_factory=dict)
    frame_costs: list = field(default_factory=list)
    solve_times: list = field(default_factory=list)
    activation_delays: list = field(default_factory=list)
    activation_sources: list = field(default_factory=list)
    ordinal_pairs: int = 0
    ordinal_violations: int = 0
    solver_failures: int = 0
    affine: list = field(default_factory=list)


class Estimator:
    """Sliding-window estimator over a stream of frames.

    ``truth_inv_depth(frame, feature_ids) -> array``, when given, is used
    only to count ordinal violations for reporting.
    """

    def __init__(self, cam: Camera, cfg: EstimatorConfig = EstimatorConfig(), truth_inv_depth=None):
        self.cam = cam
        self.cfg = cfg
        self.state = WindowState([], [], {}, set(), cfg.window)
        self.tracks: dict = {}
        self.affine = AffineState(alpha=cfg.alpha)
        self.history = OrdinalHistory()
        self.pairs: dict = {}     # frame id -> list of (near, far)
        self.odom: dict = {}      # frame id -> (measured Pose from previous frame, info)
        self.truth = truth_inv_depth
        self.log = RunLog()
        self._rng = np.random.default_rng(cfg.ransac.seed)

    # -- ingest ------------------------------------------------------------

    def process(self, k: int, feature_ids, pixels, depth_map, odometry: Optional[Pose] = None,
                odometry_info=None) -> Pose:
        st = self.state
        if len(st.frame_ids) >= self.cfg.window:
            st = marginalize_slide(st, self.cam)
            self.pairs = {f: p for f, p in self.pairs.items() if f in st.frame_ids}
        if not st.frame_ids:
            pose = Pose.identity()
            st.fixed = {k}
        else:
            if odometry is None:
                raise ValueError(f"frame {k} lacks an odometry measurement")
            pose = st.poses[-1] @ odometry
            self.odom[k] = (st.frame_ids[-1], odometry, np.asarray(odometry_info, dtype=float))
        st.frame_ids.append(k)
        st.poses.append(pose)
        self.state = st

        feature_ids = np.asarray(feature_ids, dtype=int)
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        if len(feature_ids):
            point = to_inverse_value(sample_depth(depth_map, pixels, "point"), depth_map.mode)
            patch = to_inverse_value(sample_depth(depth_map, pixels, "max5x5"), depth_map.mode)
        else:
            point = patch = np.zeros(0)
        for fid, u, d, dp in zip(feature_ids.tolist(), pixels, point, patch):
            tr = self.tracks.setdefault(fid, Track(k))
            tr.pixels[k] = u
            tr.mde[k] = float(d)
            tr.mde_patch[k] = float(dp)
            lm = st.landmarks.get(fid)
            if lm is not None:
                obs = dict(lm.observations)
                obs[k] = u
                st.landmarks[fid] = replace(lm, observations=obs)
        self._forget_tracks(feature_ids)

        self._activate(k, feature_ids)
        pairs = self._select_ordinal(k, feature_ids, pixels, point)

        t0 = time.perf_counter()
        graph, active = self.build_graph()
        sub = self.state.copy()
        sub.landmarks = {fid: lm for fid, lm in self.state.landmarks.items() if fid in active}
        try:
            res = solve_window(sub, graph, self.cam, self.cfg.solver)
            self.state.poses = res.state.poses
            self.state.landmarks.update(res.state.landmarks)
            self.log.frame_costs.append(res.family_costs)
        except SingularNormalEquations as exc:
            log.debug("frame %d: solve skipped (%s)", k, exc)
            self.log.solver_failures += 1
            self.log.frame_costs.append({})
        self.log.solve_times.append(time.perf_counter() - t0)

        self._drop_outliers()
        self._count_violations(k, pairs)
        self._update_affine(k, feature_ids)
        for fid, pose_i in zip(self.state.frame_ids, self.state.poses):
            self.log.trajectory[fid] = pose_i
        return self.state.poses[-1]

    def _forget_tracks(self, current_ids) -> None:
        # a track that is neither in view nor a landmark can never be used again
        keep = set(current_ids.tolist()) | set(self.state.landmarks)
        for fid in [f for f in self.tracks if f not in keep]:
            del self.tracks[fid]
        self.history.prune(keep)

    # -- landmark activation ----------------------------------------------

    def _window_obs(self, tr: Track):
        return [f for f in self.state.frame_ids if f in tr.pixels]

    def _activate(self, k: int, feature_ids) -> None:
        st = self.state
        for fid in feature_ids.tolist():
            if fid in st.landmarks:
                continue
            tr = self.tracks[fid]
            frames = self._window_obs(tr)
            if len(frames) < 2:
                continue
            anchor = frames[0]
            pose_a = st.pose(anchor)
            inv = self._try_triangulate(tr, anchor, frames[1:])
            source = TRIANGULATED
            if inv is None and self.cfg.mdi and self.affine.initialized:
                cand = float(align(self.affine, tr.mde_patch[anchor]))
                res = mdi_initialize(self.cam, pose_a, st.pose(k), tr.pixels[anchor], tr.pixels[k], cand,
                                     self.cfg.mdi_tau)
                if res.accepted:
                    inv, source = res.inv_depth, MDI
            if inv is None:
                continue
            lo, hi = self.cfg.solver.inv_depth_bounds
            if not lo < inv < hi:
                continue
            obs = {f: tr.pixels[f] for f in frames}
            st.landmarks[fid] = Landmark.from_pixel(self.cam, anchor, tr.pixels[anchor], inv, obs)
            tr.status = source
            tr.activated_at = k
            self.log.activation_delays.append(k - tr.first_frame)
            self.log.activation_sources.append(source)

    def _try_triangulate(self, tr: Track, anchor: int, others) -> Optional[float]:
        st = self.state
        pose_a = st.pose(anchor)
        if not others:
            return None
        R = np.array([st.pose(f).R for f in others])
        ra = pose_a.R @ self.cam.bearing(tr.pixels[anchor])
        rb = np.einsum("nij,nj->ni", R, self.cam.bearing(np.array([tr.pixels[f] for f in others])))
        cos = rb @ ra / (np.linalg.norm(rb, axis=1) * np.linalg.norm(ra))
        par = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
        i = int(np.argmax(par))
        best, best_par = others[i], float(par[i])
        if best_par < self.cfg.parallax_min_deg:
            return None
        try:
            return float(triangulate(pose_a, st.pose(best), self.cam, tr.pixels[anchor], tr.pixels[best],
                                     self.cfg.parallax_min_deg))
        except GeometryError:
            return None

    # -- graph construction -------------------------------------------------

    def build_graph(self):
        """Blocks for the current window and the ids of the landmarks they constrain.

        Landmarks seen only from their anchor keyframe carry no information
        and are left out of the solve.
        """
        cfg = self.cfg
        st = self.state
        g = FactorGraph()
        frames = st.frame_ids
        in_window = set(frames)
        for f in frames[1:]:
            prev, meas, info = self.odom[f]
            if prev in in_window:
                g.add_odometry(prev, f, meas, info)

        priors = self.depth_priors() if cfg.uses_depth else {}
        active = set()
        for fid in sorted(st.landmarks):
            lm = st.landmarks[fid]
            n_obs = 0
            for f, u in lm.observations.items():
                if f != lm.anchor and f in in_window:
                    g.add_reprojection(fid, f, u, cfg.solver.reprojection_weight)
                    n_obs += 1
            if fid in priors:
                target, w = priors[fid]
                g.add_depth(fid, target, w)
            if n_obs or fid in priors:
                active.add(fid)
        if cfg.uses_ordinal:
            # a pair re-selected in several keyframes is constrained in the latest one only
            seen = set()
            for f in reversed(frames):
                for near, far in self.pairs.get(f, ()):
                    key = (min(near, far), max(near, far))
                    if key in seen or near not in active or far not in active:
                        continue
                    seen.add(key)
                    g.add_ordinal(near, far, f, cfg.solver.ordinal_weight)
        return g, active

    def depth_priors(self) -> dict:
        """``feature id -> (aligned target, weight)`` for landmarks passing the gate."""
        if not self.affine.initialized:
            return {}
        cfg = self.cfg
        st = self.state
        slot, R, t = self._frame_arrays()
        fids, targets = [], []
        rows = []    # (landmark row, anchor slot, obs slot, pixel, aligned value)
        for fid, lm in st.landmarks.items():
            tr = self.tracks.get(fid)
            if tr is None or lm.anchor not in tr.mde:
                continue
            target = float(align(self.affine, tr.mde[lm.anchor]))
            if not target > 0:
                continue
            n = len(fids)
            fids.append(fid)
            targets.append(target)
            if cfg.gate.enabled:
                frames = [f for f in st.frame_ids if f in tr.mde][-cfg.gate.window:]
                for f in frames:
                    rows.append((n, slot[lm.anchor], slot[f], tr.pixels[f], tr.mde[f]))
        if not fids:
            return {}
        weights = np.full(len(fids), cfg.solver.depth_weight)
        if cfg.gate.enabled:
            weights[:] = np.nan
            if rows:
                n, a, b, px, raw = (np.array(c) for c in zip(*rows))
                vals = align(self.affine, raw.astype(float))
                ok = vals > 0
                x = self.cam.bearing(np.stack(px)[ok]) / vals[ok][:, None]
                z = _transfer(R, t, b[ok], a[ok], x)[:, 2]
                good = z > Z_MIN
                n = n[ok][good]
                inv = 1.0 / z[good]
                # each landmark contributes at most gate.window samples, so this is
                # the unbiased variance over its whole history
                cnt = np.bincount(n, minlength=len(fids))
                mean = np.bincount(n, weights=inv, minlength=len(fids)) / np.maximum(cnt, 1)
                ss = np.bincount(n, weights=(inv - mean[n]) ** 2, minlength=len(fids))
                enough = cnt >= 2
                var = np.where(enough, ss / np.maximum(cnt - 1, 1), np.inf)
                keep = enough & (var <= cfg.gate.sigma2_thresh)
                weights[keep] = cfg.solver.depth_weight * np.exp(-cfg.gate.gamma * var[keep])
        return {fid: (tg, float(w)) for fid, tg, w in zip(fids, targets, weights) if np.isfinite(w)}

    def _frame_arrays(self):
        st = self.state
        slot = {f: i for i, f in enumerate(st.frame_ids)}
        R = np.array([p.R for p in st.poses]).reshape(-1, 3, 3)
        t = np.array([p.translation for p in st.poses]).reshape(-1, 3)
        return slot, R, t

    def _inv_depth_in(self, frame: int, fids) -> np.ndarray:
        """State inverse depths of ``fids`` re-expressed in keyframe ``frame``."""
        st = self.state
        slot, R, t = self._frame_arrays()
        lms = [st.landmarks[f] for f in fids]
        if not lms:
            return np.zeros(0)
        a = np.array([slot[lm.anchor] for lm in lms])
        x = np.array([lm.point_in_anchor() for lm in lms])
        z = _transfer(R, t, a, np.full(len(a), slot[frame]), x)[:, 2]
        with np.errstate(divide="ignore"):
            return np.where(z > Z_MIN, 1.0 / z, -np.inf)

    # -- ordinal pairs ------------------------------------------------------

    def _select_ordinal(self, k: int, feature_ids, pixels, d_hat) -> list:
        ocfg = self.cfg.ordinal_cfg
        pairs = select_pairs(feature_ids, pixels, d_hat, self.history, ocfg)
        self.history.record(feature_ids, pixels, d_hat, ocfg.tau_dist)
        self.pairs[k] = [p.oriented() for p in pairs]
        return pairs

    def _count_violations(self, k: int, pairs) -> None:
        if self.truth is None or not pairs:
            return
        st = self.state
        live = [p for p in pairs if p.id_i in st.landmarks and p.id_j in st.landmarks]
        if not live:
            return
        ids = sorted({p.id_i for p in live} | {p.id_j for p in live})
        est = dict(zip(ids, self._inv_depth_in(k, ids)))
        truth = dict(zip(ids, self.truth(k, ids)))
        self.log.ordinal_pairs += len(live)
        self.log.ordinal_violations += count_violations(live, est.__getitem__, truth.__getitem__)

    def _max_parallax(self, fids) -> np.ndarray:
        """Largest angle (degrees) between a landmark's anchor ray and its other rays."""
        st = self.state
        if not fids:
            return np.zeros(0)
        slot, R, _ = self._frame_arrays()
        rows = []
        for n, fid in enumerate(fids):
            lm = st.landmarks[fid]
            for f, u in lm.observations.items():
                if f != lm.anchor and f in slot:
                    rows.append((n, slot[lm.anchor], slot[f], u))
        out = np.zeros(len(fids))
        if not rows:
            return out
        n, a, b, px = (np.array(c) for c in zip(*rows))
        ra = np.einsum("nij,nj->ni", R[a], np.array([st.landmarks[fids[i]].bearing for i in n]))
        rb = np.einsum("nij,nj->ni", R[b], self.cam.bearing(np.stack(px)))
        cos = np.sum(ra * rb, axis=1) / (np.linalg.norm(ra, axis=1) * np.linalg.norm(rb, axis=1))
        ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
        np.maximum.at(out, n, ang)
        return out

    # -- post-solve maintenance --------------------------------------------

    def _drop_outliers(self) -> None:
        st = self.state
        if not st.landmarks:
            return
        lo, hi = self.cfg.solver.inv_depth_bounds
        slot, R, t = self._frame_arrays()
        ids = list(st.landmarks)
        rows = []
        for n, fid in enumerate(ids):
            lm = st.landmarks[fid]
            for f, u in lm.observations.items():
                if f != lm.anchor and f in slot:
                    rows.append((n, slot[lm.anchor], slot[f], u))
        bad = np.zeros(len(ids), dtype=bool)
        rho = np.array([st.landmarks[f].inv_depth for f in ids])
        bad |= (rho <= lo * 1.0001) | (rho >= hi * 0.9999)
        if rows:
            n, a, b, px = (np.array(c) for c in zip(*rows))
            px = np.stack(px)
            x = (np.array([st.landmarks[f].bearing for f in ids]) / rho[:, None])[n]
            xc = _transfer(R, t, a, b, x)
            behind = xc[:, 2] <= Z_MIN
            z = np.where(behind, 1.0, xc[:, 2])
            uv = np.stack([self.cam.fx * xc[:, 0] / z + self.cam.cx,
                           self.cam.fy * xc[:, 1] / z + self.cam.cy], axis=1)
            err = np.where(behind, np.inf, np.linalg.norm(uv - px, axis=1))
            total = np.bincount(n, weights=err, minlength=len(ids))
            count = np.bincount(n, minlength=len(ids))
            with np.errstate(invalid="ignore"):
                bad |= (count > 0) & ~(total / np.maximum(count, 1) <= self.cfg.outlier_px)
        last = st.frame_ids[-1]
        for fid in np.array(ids)[bad].tolist():
            del st.landmarks[fid]
            tr = self.tracks.get(fid)
            if tr is not None:
                # let it start over from fresh observations
                tr.pixels = {f: u for f, u in tr.pixels.items() if f >= last}
                tr.mde = {f: d for f, d in tr.mde.items() if f >= last}
                tr.mde_patch = {f: d for f, d in tr.mde_patch.items() if f >= last}

    def _update_affine(self, k: int, feature_ids) -> None:
        st = self.state
        if len(st.frame_ids) < self.cfg.window:
            # the first windows are too short for a reliable metric scale
            return
        ids = [f for f in feature_ids.tolist() if f in st.landmarks and f in self.tracks]
        par = self._max_parallax(ids)
        ids = [f for f, a in zip(ids, par) if a >= self.cfg.affine_parallax_deg]
        inv = self._inv_depth_in(k, ids)
        ok = inv > 0
        d_vio = inv[ok]
        d_net = np.array([self.tracks[f].mde[k] for f in ids])[ok] if ids else np.zeros(0)
        if len(d_vio) < self.cfg.min_affine_corrs:
            return
        try:
            fit = estimate_affine_ransac(d_vio, d_net, self.cfg.ransac, self._rng)
        except (TooFewCorrespondences, NoValidModel):
            return
        if len(fit.inliers) < self.cfg.min_affine_corrs // 2:
            return
        self.affine = update_affine_ema(self.affine, fit.s, fit.t)
        self.log.affine.append((k, self.affine.s, self.affine.t))

    # -- results -----------------------------------------------------------

    def trajectory(self) -> list:
        return [self.log.trajectory[k] for k in sorted(self.log.trajectory)]


def run_sequence(seq, cfg: EstimatorConfig = EstimatorConfig()):
    """Run the estimator over a :class:`~mdevio.simulator.SyntheticSequence`.

    Returns ``(poses, RunLog)`` with one pose per frame.
    """
    est = Estimator(seq.camera, cfg, truth_inv_depth=seq.true_inverse_depths)
    for fr in seq.frames:
        est.process(fr.index, fr.feature_ids, fr.pixels, fr.depth, fr.odometry, fr.odometry_info)
    return est.trajectory(), est.log


def _transfer(R, t, a, b, x):
    """Points ``x`` given in keyframe slots ``a`` expressed in slots ``b``."""
    xw = np.einsum("nij,nj->ni", R[a], x) + t[a]
    return np.einsum("nji,nj->ni", R[b], xw - t[b])
