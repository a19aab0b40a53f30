import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jacobians import all_errors
from mdevio.depth_prior import AffineState
from mdevio.factor_graph import (DEPTH, FAMILIES, ODOMETRY, ORDINAL, REPROJECTION, FactorGraph, Landmark,
                                 PointBehindCamera, SingularNormalEquations, SolverConfig, WindowState, _Problem,
                                 depth_residual, marginalize_slide, mdi_initialize, odometry_residual,
                                 reprojection_residual, solve_window, total_cost)
from mdevio.geometry import Pose, project, so3_exp
from windows import CAM, make_window, perturbed, position_error


# -- single residuals ---------------------------------------------------------------

def test_reprojection_residual_zero_on_exact_observation():
    a = Pose.identity()
    b = Pose(translation=[0.3, 0.0, 0.0])
    lm = Landmark.from_pixel(CAM, 0, [100.0, 80.0], 0.25)
    u = project(CAM, b.inverse().apply(a.apply(lm.point_in_anchor())))
    assert np.allclose(reprojection_residual(a, b, CAM, lm, u), 0, atol=1e-9)


def test_reprojection_residual_anchor_frame_independent_of_depth():
    a = Pose.identity()
    for inv in (0.1, 0.5, 3.0):
        lm = Landmark.from_pixel(CAM, 0, [100.0, 80.0], inv)
        assert np.allclose(reprojection_residual(a, a, CAM, lm, [100.0, 80.0]), 0, atol=1e-9)


def test_reprojection_residual_behind_camera():
    a = Pose.identity()
    b = Pose(translation=[0.0, 0.0, 10.0])
    lm = Landmark.from_pixel(CAM, 0, [100.0, 80.0], 0.25)
    with pytest.raises(PointBehindCamera):
        reprojection_residual(a, b, CAM, lm, [0.0, 0.0])


def test_reprojection_inverse_depth_derivative_matches_prediction():
    a = Pose.identity()
    b = Pose.from_Rt(so3_exp([0.0, 0.1, 0.0]), [0.5, 0.1, 0.0])
    lm = Landmark.from_pixel(CAM, 0, [120.0, 90.0], 0.2)
    u = [0.0, 0.0]
    h = 1e-6

    def r(inv):
        return reprojection_residual(a, b, CAM, Landmark(0, inv, lm.bearing), u)

    slope = (r(0.2 + h) - r(0.2 - h)) / (2 * h)
    predicted = r(0.2) + 1e-3 * slope
    actual = r(0.2 + 1e-3)
    # second-order remainder only
    assert np.all(np.abs(actual - predicted) < 1e-2 * np.abs(actual - r(0.2)))


def test_odometry_residual_examples():
    a = Pose.from_Rt(so3_exp([0.1, 0.2, 0.3]), [1.0, 2.0, 3.0])
    rel = Pose.from_Rt(so3_exp([0.0, 0.1, 0.0]), [0.5, 0.0, 0.0])
    assert np.allclose(odometry_residual(a, a @ rel, rel), 0, atol=1e-12)
    off = odometry_residual(Pose.identity(), Pose(translation=[0.1, 0, 0]), Pose.identity())
    assert np.allclose(off, [0.1, 0, 0, 0, 0, 0])
    flip = odometry_residual(Pose.identity(), Pose.from_Rt(so3_exp([0, 0, math.pi]), np.zeros(3)), Pose.identity())
    assert np.all(np.isfinite(flip))
    assert np.isclose(np.linalg.norm(flip[3:]), math.pi)


def test_depth_residual_examples():
    aff = AffineState(2.0, 0.1, True)
    assert depth_residual(0.7, 0.3, aff) == pytest.approx(0.0)
    assert depth_residual(0.5, 0.3, aff) == pytest.approx(-0.2)


def test_analytic_jacobians_match_finite_differences():
    errs = all_errors(seed=3, n=300)
    for fam in ("reprojection", "odometry", "depth", "ordinal"):
        assert len(errs[fam]) > 250
        assert errs[fam].max() < 1e-5, fam
    # both sides of the hinge were exercised
    assert 0 < errs["ordinal_active"].mean() < 1


def test_assembled_jacobian_matches_finite_differences():
    state, graph, _, _ = make_window(seed=4, n_landmarks=30, pixel_sigma=1.0, ordinal=True)
    state = perturbed(state, inv_rel=0.05)
    cfg = SolverConfig(huber_delta=1e6)
    prob = _Problem(state, graph, CAM, cfg)
    J, r0, _ = prob.linearize(prob.R, prob.p, prob.rho)
    J = J.toarray()
    h = 1e-6
    J_fd = np.zeros_like(J)
    for c in range(prob.n):
        e = np.zeros(prob.n)
        e[c] = h
        rp = prob.linearize(*prob.retract(prob.R, prob.p, prob.rho, e))[1]
        rm = prob.linearize(*prob.retract(prob.R, prob.p, prob.rho, -e))[1]
        J_fd[:, c] = (rp - rm) / (2 * h)
    # rows of ordinal blocks near the kink are excluded
    ok = np.ones(len(r0), bool)
    n_ord = graph.counts()[ORDINAL]
    if n_ord:
        ok[-n_ord:] = np.abs(r0[-n_ord:]) > 1e-4
    scale = max(np.abs(J_fd).max(), 1)
    assert np.abs(J - J_fd)[ok].max() / scale < 1e-5


# -- solver --------------------------------------------------------------------------

def test_solver_at_truth_stops_immediately():
    state, graph, truth, _ = make_window()
    res = solve_window(state, graph, CAM)
    assert res.iterations <= 2
    assert res.cost_trace[-1] < 1e-12
    assert position_error(res.state, truth) < 1e-9


def test_solver_recovers_perturbed_poses():
    state, graph, truth, _ = make_window(seed=2, depth=False)
    start = perturbed(state)
    assert position_error(start, truth) > 0.03
    res = solve_window(start, graph, CAM, SolverConfig(max_iterations=30, rel_tol=1e-12))
    assert position_error(res.state, truth) < 1e-4


def test_solver_without_gauge_is_singular():
    state, graph, _, _ = make_window(depth=False)
    state.fixed = set()
    with pytest.raises(SingularNormalEquations):
        solve_window(state, graph, CAM)
    state.fixed = {12345}
    with pytest.raises(SingularNormalEquations):
        solve_window(state, graph, CAM)


def test_solver_unconstrained_landmark_is_singular():
    state, graph, _, _ = make_window(n_landmarks=5, depth=False)
    lm = next(iter(state.landmarks.values()))
    state.landmarks[999] = Landmark(lm.anchor, 0.2, lm.bearing, {lm.anchor: [1.0, 1.0]})
    with pytest.raises(SingularNormalEquations):
        solve_window(perturbed(state), graph, CAM)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_accepted_steps_never_increase_cost(seed):
    state, graph, _, _ = make_window(seed=seed, n_landmarks=40, pixel_sigma=1.0, ordinal=True)
    res = solve_window(perturbed(state, seed=seed, inv_rel=0.1), graph, CAM)
    trace = np.array(res.cost_trace)
    assert np.all(np.diff(trace) <= 0)
    assert all(SolverConfig().inv_depth_bounds[0] <= lm.inv_depth <= SolverConfig().inv_depth_bounds[1]
               for lm in res.state.landmarks.values())


def test_inverse_depth_clamped():
    state, graph, _, _ = make_window(n_landmarks=10, depth=False)
    fid = next(iter(state.landmarks))
    graph.add_depth(fid, -5.0, 1e6)
    res = solve_window(state, graph, CAM)
    assert res.state.landmarks[fid].inv_depth == pytest.approx(1e-4)


def test_cost_decomposes_into_families():
    state, graph, _, _ = make_window(n_landmarks=40, pixel_sigma=2.0, ordinal=True)
    start = perturbed(state, inv_rel=0.2)
    fam = total_cost(start, graph, CAM)
    assert set(fam) == set(FAMILIES)
    assert all(fam[k] > 0 for k in (REPROJECTION, ODOMETRY, DEPTH))
    parts = []
    for kind in FAMILIES:
        g = FactorGraph.from_blocks(b for b in graph.blocks() if b.kind == kind)
        parts.append(total_cost(start, g, CAM)[kind])
    assert sum(fam.values()) == pytest.approx(sum(parts), rel=1e-15)


def test_zero_weight_depth_block_has_no_influence():
    state, graph, _, _ = make_window(seed=5, n_landmarks=40, pixel_sigma=1.0, depth=False)
    start = perturbed(state, inv_rel=0.1)
    ref = solve_window(start, graph, CAM)
    g2 = FactorGraph.from_blocks(graph.blocks())
    for fid in state.landmarks:
        g2.add_depth(fid, 5.0, 0.0)
    out = solve_window(start, g2, CAM)
    for f in state.frame_ids:
        assert out.state.pose(f).isclose(ref.state.pose(f), atol=1e-12)


def test_gauge_invariance():
    state, graph, truth, _ = make_window(seed=6, n_landmarks=40, pixel_sigma=1.0, depth=False)
    start = perturbed(state, seed=2)
    res1 = solve_window(start, graph, CAM)
    G = Pose.from_Rt(so3_exp([0.3, -0.2, 0.5]), [4.0, -1.0, 2.0])
    moved = start.copy()
    moved.poses = [G @ p for p in start.poses]
    res2 = solve_window(moved, graph, CAM)
    for f in state.frame_ids:
        assert (G @ res1.state.pose(f)).isclose(res2.state.pose(f), atol=1e-8)


def test_graph_rejects_negative_weights():
    g = FactorGraph()
    with pytest.raises(ValueError):
        g.add_depth(0, 1.0, -1.0)
    with pytest.raises(ValueError):
        g.add_odometry(0, 1, Pose.identity(), -1.0)


# -- depth-assisted initialization ----------------------------------------------------

def _two_view(angle_deg=20.0, depth=5.0):
    # camera j circles the point so the viewing rays differ by ``angle_deg``
    X = np.array([0.0, 0.0, depth])
    ang = math.radians(angle_deg)
    pj = Pose.from_Rt(so3_exp([0.0, -ang, 0.0]), X - depth * np.array([-math.sin(ang), 0.0, math.cos(ang)]))
    pi_ = Pose.identity()
    return pi_, pj, project(CAM, X), project(CAM, pj.inverse().apply(X))


def test_mdi_accepts_true_depth():
    pi_, pj, ui, uj = _two_view()
    res = mdi_initialize(CAM, pi_, pj, ui, uj, 0.2)
    assert res.accepted and res.error_px < 1e-9


def test_mdi_rejects_depth_off_by_factor_two():
    pi_, pj, ui, uj = _two_view()
    res = mdi_initialize(CAM, pi_, pj, ui, uj, 0.1)
    assert not res.accepted and res.error_px > 10 * 3.0


def test_mdi_rejects_degenerate_inputs():
    pi_, pj, ui, uj = _two_view()
    assert not mdi_initialize(CAM, pi_, pi_, ui, ui, 0.2).accepted
    assert not mdi_initialize(CAM, pi_, pj, ui, uj, -0.2).accepted


# -- sliding ------------------------------------------------------------------------------

def test_slide_reanchors_with_exact_transfer():
    poses = [Pose.identity(), Pose(translation=[0, 0, 1.0])] + [Pose(translation=[0, 0, 1.0 + 0.1 * i])
                                                              for i in range(1, 9)]
    frame_ids = list(range(10))
    lm = Landmark.from_pixel(CAM, 0, [CAM.cx, CAM.cy], 0.2, {0: [CAM.cx, CAM.cy], 1: [CAM.cx, CAM.cy]})
    gone = Landmark.from_pixel(CAM, 0, [10.0, 10.0], 0.2, {0: [10.0, 10.0]})
    state = WindowState(frame_ids, poses, {7: lm, 8: gone}, {0}, capacity=10)
    new = marginalize_slide(state, CAM)
    assert new.frame_ids == frame_ids[1:]
    assert new.fixed == {1}
    assert 8 not in new.landmarks
    moved = new.landmarks[7]
    assert moved.anchor == 1 and moved.inv_depth == pytest.approx(0.25)
    assert 0 not in moved.observations


def test_slide_noop_when_not_full():
    state = WindowState([0, 1], [Pose.identity(), Pose.identity()], {}, {0}, capacity=10)
    assert marginalize_slide(state) is state


def test_slide_keeps_world_points():
    state, _, _, _ = make_window(seed=8, n_landmarks=50)
    new = marginalize_slide(state, CAM)
    for fid, lm in new.landmarks.items():
        old = state.landmarks[fid]
        x_old = state.pose(old.anchor).apply(old.point_in_anchor())
        x_new = new.pose(lm.anchor).apply(lm.point_in_anchor())
        assert np.allclose(x_old, x_new, atol=1e-9)
