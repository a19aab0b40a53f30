"""Hand-built sliding windows with exact measurements."""

import numpy as np

from mdevio.factor_graph import FactorGraph, Landmark, SolverConfig, WindowState
from mdevio.geometry import Camera, Pose, project_many, so3_exp

CAM = Camera(220.0, 220.0, 159.5, 119.5, 320, 240)


def make_window(seed=0, n_frames=10, n_landmarks=150, pixel_sigma=0.0, depth=True, ordinal=False,
                reproj_weight=SolverConfig().reprojection_weight, cam=CAM):
    """Forward-moving camera looking at points 3-12 m ahead.

    Returns ``(state, graph, truth_poses, truth_inv_depths)``; the state holds
    ground truth, the graph exact (or pixel-noisy) measurements.
    """
    rng = np.random.default_rng(seed)
    poses = []
    for i in range(n_frames):
        w = np.array([0.0, 0.02 * i, 0.0]) + rng.normal(0, 0.005, 3)
        poses.append(Pose.from_Rt(so3_exp(w), [0.15 * i, 0.02 * np.sin(i), 0.1 * i]))
    frame_ids = list(range(100, 100 + n_frames))
    state = WindowState(frame_ids, poses, {}, {frame_ids[0]}, capacity=n_frames)
    graph = FactorGraph()
    truth = {}
    fid = 0
    while len(state.landmarks) < n_landmarks:
        anchor = int(rng.integers(0, n_frames - 2))
        px = rng.uniform([20, 20], [cam.width - 20, cam.height - 20])
        inv = 1.0 / rng.uniform(3.0, 12.0)
        lm = Landmark.from_pixel(cam, frame_ids[anchor], px, inv)
        xw = poses[anchor].apply(lm.point_in_anchor())
        obs = {frame_ids[anchor]: px}
        for j in range(anchor + 1, n_frames):
            xc = poses[j].inverse().apply(xw)
            if xc[2] < 0.5:
                continue
            u = project_many(cam, xc)
            if cam.in_bounds(u):
                obs[frame_ids[j]] = u + rng.normal(0, pixel_sigma, 2) if pixel_sigma else u
        if len(obs) < 3:
            continue
        state.landmarks[fid] = Landmark(lm.anchor, inv, lm.bearing, obs)
        truth[fid] = inv
        for f, u in obs.items():
            if f != lm.anchor:
                graph.add_reprojection(fid, f, u, reproj_weight)
        if depth:
            graph.add_depth(fid, inv, 300.0)
        fid += 1
    for i in range(n_frames - 1):
        rel = poses[i].inverse() @ poses[i + 1]
        graph.add_odometry(frame_ids[i], frame_ids[i + 1], rel, np.r_[np.full(3, 1e4), np.full(3, 3e5)])
    if ordinal:
        ids = list(state.landmarks)
        for a, b in zip(ids[::2], ids[1::2]):
            la, lb = state.landmarks[a], state.landmarks[b]
            k = max(la.anchor, lb.anchor)
            near, far = (a, b) if truth[a] > truth[b] else (b, a)
            if k in la.observations and k in lb.observations:
                graph.add_ordinal(near, far, k, 10.0)
    return state, graph, poses, truth


def perturbed(state, seed=1, trans=0.05, rot_deg=1.0, inv_rel=0.0):
    rng = np.random.default_rng(seed)
    new = state.copy()

    def unit():
        v = rng.normal(size=3)
        return v / np.linalg.norm(v)

    new.poses = [p if f in state.fixed else p.retract(np.r_[trans * unit(), np.deg2rad(rot_deg) * unit()])
                 for f, p in zip(state.frame_ids, state.poses)]
    if inv_rel:
        new.landmarks = {k: Landmark(lm.anchor, lm.inv_depth * (1 + inv_rel * rng.normal()), lm.bearing,
                                     lm.observations) for k, lm in state.landmarks.items()}
    return new


def position_error(state, truth_poses):
    est = np.array([p.translation for p in state.poses])
    gt = np.array([p.translation for p in truth_poses])
    return float(np.sqrt(np.mean(np.sum((est - gt) ** 2, axis=1))))
