import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdevio.geometry import (Camera, DegenerateConfiguration, InsufficientParallax, NegativeDepth,
                             NonPositiveDepth, NonPositiveInverseDepth, Pose, Sim3, back_project,
                             matrix_to_quat, project, quat_to_matrix, ray_parallax_deg, so3_exp, so3_log,
                             transfer_inverse_depth,
                             triangulate, umeyama_sim3)

CAM = Camera(100.0, 100.0, 50.0, 50.0, 101, 101)

finite = st.floats(-3.0, 3.0, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
rotvec = st.tuples(*[st.floats(-3.0, 3.0)] * 3).map(np.array).filter(lambda w: np.linalg.norm(w) < 3.1)


def pose_from(w, t):
    return Pose.from_Rt(so3_exp(w), t)


# -- projection ---------------------------------------------------------------

def test_project_optical_axis():
    cam = Camera(1.0, 1.0, 0.0, 0.0, 2, 2)
    assert np.allclose(project(cam, [0, 0, 1]), [0, 0])


def test_project_direct_formula():
    assert np.allclose(project(CAM, [1, 0, 2]), [100, 50])


def test_project_behind_camera():
    with pytest.raises(NonPositiveDepth):
        project(CAM, [0, 0, -1])
    with pytest.raises(NonPositiveDepth):
        project(CAM, [0, 0, 1e-7])


def test_back_project_examples():
    assert np.allclose(back_project(CAM, [50, 50], 0.5), [0, 0, 2])
    assert np.allclose(back_project(CAM, [150, 50], 1.0), [1, 0, 1])
    with pytest.raises(NonPositiveInverseDepth):
        back_project(CAM, [50, 50], 0.0)


@given(st.floats(0, 100), st.floats(0, 100), st.floats(1e-3, 1e3))
def test_projection_round_trip(u, v, d):
    assert np.allclose(project(CAM, back_project(CAM, [u, v], d)), [u, v], atol=1e-9, rtol=0)


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(0.0, 1.0, 0.0, 0.0, 2, 2)
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 5.0, 0.0, 2, 2)


# -- rotations and poses -------------------------------------------------------

@given(rotvec)
def test_so3_exp_log_round_trip(w):
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-8)


def test_so3_log_at_pi_has_norm_pi():
    R = so3_exp(np.array([0.0, 0.0, np.pi]))
    w = so3_log(R)
    assert np.isclose(np.linalg.norm(w), np.pi)
    assert np.allclose(so3_exp(w), R, atol=1e-9)


@given(rotvec)
def test_quaternion_round_trip(w):
    R = so3_exp(w)
    q = matrix_to_quat(R)
    assert abs(np.linalg.norm(q) - 1) < 1e-9
    assert np.allclose(quat_to_matrix(q), R, atol=1e-12)


@given(rotvec, vec3)
def test_compose_with_inverse_is_identity(w, t):
    P = pose_from(w, t)
    assert (P @ P.inverse()).isclose(Pose.identity())
    assert abs(np.linalg.det(P.R) - 1) < 1e-9


@given(rotvec, vec3, rotvec, vec3, vec3)
def test_compose_matches_matrices(w1, t1, w2, t2, x):
    A, B = pose_from(w1, t1), pose_from(w2, t2)
    assert np.allclose((A @ B).matrix(), A.matrix() @ B.matrix(), atol=1e-12)
    assert np.allclose((A @ B).apply(x), A.apply(B.apply(x)), atol=1e-12)


# -- triangulation ----------------------------------------------------------

def test_triangulate_lateral_baseline():
    a = Pose.identity()
    b = Pose(translation=[0.5, 0, 0])
    X = np.array([0.0, 0.0, 5.0])
    ua = project(CAM, X)
    ub = project(CAM, b.inverse().apply(X))
    assert abs(triangulate(a, b, CAM, ua, ub) - 0.2) < 1e-6


def test_triangulate_identical_poses():
    with pytest.raises(InsufficientParallax):
        triangulate(Pose.identity(), Pose.identity(), CAM, [50, 50], [50, 50])


def test_triangulate_point_behind():
    a = Pose.identity()
    b = Pose(translation=[1.0, 0, 0])
    # rays diverge: the intersection lies behind both cameras
    with pytest.raises((NegativeDepth, InsufficientParallax)):
        triangulate(a, b, CAM, [40, 50], [60, 50])


def test_triangulate_noisy_monte_carlo():
    rng = np.random.default_rng(7)
    a, b = Pose.identity(), Pose(translation=[1.0, 0, 0])
    cam = Camera(500.0, 500.0, 320.0, 240.0, 640, 480)
    errs = []
    for _ in range(200):
        X = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), 5.0])
        ua = project(cam, X) + rng.normal(0, 0.5, 2)
        ub = project(cam, b.inverse().apply(X)) + rng.normal(0, 0.5, 2)
        errs.append(abs(triangulate(a, b, cam, ua, ub) - 0.2) / 0.2)
    assert max(errs) < 0.10


@settings(max_examples=50)
@given(rotvec.map(lambda w: 0.2 * w), st.floats(0.3, 2.0), st.floats(2.0, 20.0), st.floats(-0.3, 0.3))
def test_triangulate_noise_free_recovers_truth(w, base, depth, x):
    a = Pose.identity()
    b = pose_from(w, [base, 0.1, 0.0])
    X = np.array([x * depth, 0.0, depth])
    xb = b.inverse().apply(X)
    if xb[2] < 0.5:
        return
    ua, ub = project(CAM, X), project(CAM, xb)
    if ray_parallax_deg(a, b, CAM, ua, ub) <= 1.0:
        return
    assert abs(triangulate(a, b, CAM, ua, ub) * depth - 1) < 1e-6


def test_transfer_inverse_depth_forward_motion():
    d, x = transfer_inverse_depth(CAM, [50, 50], 0.2, Pose.identity(), Pose(translation=[0, 0, 1]))
    assert np.isclose(d, 0.25)
    assert np.allclose(x, [0, 0, 4])


# -- Umeyama ------------------------------------------------------------------

def _traj(rng, n=20):
    return rng.normal(size=(n, 3)) * [3, 2, 1]


def test_umeyama_identity():
    P = _traj(np.random.default_rng(0))
    S = umeyama_sim3(P, P)
    assert np.isclose(S.scale, 1)
    assert np.allclose(S.R, np.eye(3), atol=1e-9)
    assert np.allclose(S.translation, 0, atol=1e-9)


def test_umeyama_recovers_scale_and_offset():
    gt = _traj(np.random.default_rng(1))
    est = 0.5 * gt + [1, 2, 3]
    S = umeyama_sim3(est, gt)
    assert np.isclose(S.scale, 2)
    assert np.allclose(S.translation, [-2, -4, -6])
    assert np.max(np.abs(S.apply(est) - gt)) < 1e-9


def test_umeyama_degenerate():
    with pytest.raises(DegenerateConfiguration):
        umeyama_sim3(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1, 0, 0])
    with pytest.raises(DegenerateConfiguration):
        umeyama_sim3(line, line)


@settings(max_examples=50)
@given(rotvec, vec3, st.floats(0.1, 10.0), st.integers(0, 10_000))
def test_umeyama_invariant_to_pre_transform(w, t, s, seed):
    rng = np.random.default_rng(seed)
    gt = _traj(rng)
    est = gt + rng.normal(0, 0.1, gt.shape)
    pre = Sim3.from_sRt(s, so3_exp(w), t)
    e1 = np.sqrt(np.mean(np.sum((umeyama_sim3(est, gt).apply(est) - gt) ** 2, 1)))
    moved = pre.apply(est)
    e2 = np.sqrt(np.mean(np.sum((umeyama_sim3(moved, gt).apply(moved) - gt) ** 2, 1)))
    assert abs(e1 - e2) < 1e-9
