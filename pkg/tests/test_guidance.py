import time

import numpy as np
import pytest
from conftest import random_beta, random_local
from hypothesis import given
from hypothesis import strategies as st

from egokit import body
from egokit import geometry as geo
from egokit.geometry import PoseSE3, Rotation3
from egokit.guidance.costs import (
    SIDES, BodyGuidanceProblem, CameraIntrinsics, GuidanceInputs, GuidanceWeights, HandObservation, cost_hands3d,
    cost_prior, cost_reproj, cost_skate, project,
)
from egokit.guidance.guide import GuideConfig, guide, is_guided_step, make_hook
from egokit.guidance.lm import (
    EuclideanProblem, LMConfig, NonFiniteResidualError, conjugate_gradient, lm_solve,
)

SK = body.DEFAULT_SKELETON
K = CameraIntrinsics(100.0, 100.0, 50.0, 50.0)
CAM = PoseSE3(Rotation3(np.diag([-1.0, -1.0, 1.0]) @ geo.rx_matrix(-0.8)), np.array([0.01, -0.02, 0.03]))


def scene(rng, t=4):
    theta = random_local(rng, t, scale=0.3)
    beta = random_beta(rng)
    cpf_r = geo.random_rotation(rng, t)
    cpf_p = rng.normal(size=(t, 3))
    return theta, beta, cpf_r, cpf_p


def world_joints(theta, beta, cpf_r, cpf_p):
    _, _, jr, jp = body.globalize_arrays(theta, np.broadcast_to(beta, (len(theta), 2)), cpf_r, cpf_p)
    return jr, jp


def camera_points(jp, cpf_r, cpf_p, t, joints):
    """World -> CPF -> camera, one transform at a time."""
    out = []
    for j in joints:
        world = PoseSE3(Rotation3.identity(), jp[t, j])
        cpf_world = PoseSE3(Rotation3(cpf_r[t]), cpf_p[t])
        in_cpf = geo.compose(geo.inverse(cpf_world), world).position
        out.append(CAM.rotation.matrix @ in_cpf + CAM.position)
    return np.array(out)


# --- projection and costs ------------------------------------------------------------


def test_project_examples():
    assert np.allclose(project(K, np.array([0.0, 0.0, 1.0])), [50, 50])
    assert np.allclose(project(K, np.array([0.1, 0.0, 1.0])), [60, 50])


def test_project_matches_homogeneous(rng):
    pts = rng.normal(size=(200, 3)) + [0, 0, 4]
    kmat = np.array([[K.fx, 0, K.cx], [0, K.fy, K.cy], [0, 0, 1.0]])
    h = pts @ kmat.T
    assert np.abs(project(K, pts) - h[:, :2] / h[:, 2:]).max() < 1e-12


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0)


def test_observation_needs_evidence():
    with pytest.raises(ValueError):
        HandObservation(0, "left", K, CAM)
    with pytest.raises(ValueError):
        HandObservation(0, "middle", K, CAM, keypoints2d=np.zeros((16, 2)))


def self_observations(theta, beta, cpf_r, cpf_p):
    jr, jp = world_joints(theta, beta, cpf_r, cpf_p)
    obs = []
    for t in range(len(theta)):
        for side in SIDES:
            hand = SK.hand_joint_indices(side)
            p_cam = camera_points(jp, cpf_r, cpf_p, t, hand)
            kp = np.where(p_cam[:, 2:] > 1e-6, p_cam[:, :2] / p_cam[:, 2:] * [K.fx, K.fy] + [K.cx, K.cy], np.nan)
            obs.append(HandObservation(t, side, K, CAM, kp, PoseSE3(Rotation3(jr[t, hand[0]]), jp[t, hand[0]]),
                                       theta[t, hand[1:] - 1]))
    return obs


def test_costs_zero_on_self_observations(rng):
    args = scene(rng)
    obs = self_observations(*args)
    assert cost_reproj(*args, obs) < 1e-18
    assert cost_hands3d(*args, obs) < 1e-20


def test_reproj_single_joint(rng):
    theta, beta, cpf_r, cpf_p = scene(rng, 1)
    _, jp = world_joints(theta, beta, cpf_r, cpf_p)
    wrist = SK.hand_joint_indices("right")[0]
    # Camera aligned with the CPF and pushed back so the wrist is in front of it.
    cam = PoseSE3(Rotation3.identity(), np.array([0.0, 0.0, 2.0]))
    kp = np.full((16, 2), np.nan)
    q = cpf_r[0].T @ (jp[0, wrist] - cpf_p[0])
    pc = q + cam.position
    assert pc[2] > 0
    kp[0] = project(K, pc) + [3.0, 0.0]
    obs = [HandObservation(0, "right", K, cam, kp)]
    assert cost_reproj(theta, beta, cpf_r, cpf_p, obs) == pytest.approx(9.0, abs=1e-9)


def test_reproj_chain_oracle(rng):
    theta, beta, cpf_r, cpf_p = scene(rng, 3)
    _, jp = world_joints(theta, beta, cpf_r, cpf_p)
    obs, expect = [], 0.0
    for t in range(3):
        hand = SK.hand_joint_indices("left")
        p_cam = camera_points(jp, cpf_r, cpf_p, t, hand)
        kp = rng.uniform(0, 100, (16, 2))
        front = p_cam[:, 2] > 1e-6
        pred = p_cam[:, :2] / p_cam[:, 2:] * [K.fx, K.fy] + [K.cx, K.cy]
        expect += float(((pred - kp)[front] ** 2).sum())
        obs.append(HandObservation(t, "left", K, CAM, kp))
    assert cost_reproj(theta, beta, cpf_r, cpf_p, obs) == pytest.approx(expect, rel=1e-10, abs=1e-10)


def test_reproj_drops_missing_joints(rng):
    args = scene(rng, 1)
    kp = np.full((16, 2), np.nan)
    assert cost_reproj(*args, [HandObservation(0, "left", K, CAM, kp)]) == 0.0


def test_hands3d_translation(rng):
    theta, beta, cpf_r, cpf_p = scene(rng, 1)
    jr, jp = world_joints(theta, beta, cpf_r, cpf_p)
    w = SK.hand_joint_indices("left")[0]
    obs = [HandObservation(0, "left", K, CAM, wrist_pose_world=PoseSE3(Rotation3(jr[0, w]), jp[0, w] + [0.1, 0, 0]))]
    assert cost_hands3d(theta, beta, cpf_r, cpf_p, obs) == pytest.approx(0.01, abs=1e-12)


def test_hands3d_geodesic_oracle(rng):
    theta, beta, cpf_r, cpf_p = scene(rng, 1)
    jr, jp = world_joints(theta, beta, cpf_r, cpf_p)
    hand = SK.hand_joint_indices("right")
    wrist_rot = jr[0, hand[0]] @ geo.so3_exp(rng.normal(scale=0.5, size=3))
    local = theta[0, hand[1:] - 1] @ geo.so3_exp(rng.normal(scale=0.5, size=(15, 3)))
    shift = rng.normal(scale=0.1, size=3)
    obs = [HandObservation(0, "right", K, CAM, wrist_pose_world=PoseSE3(Rotation3(wrist_rot), jp[0, hand[0]] + shift),
                           local_hand_rotations=local)]
    expect = (shift @ shift + geo.geodesic_angle(jr[0, hand[0]], wrist_rot) ** 2
              + (geo.geodesic_angle(theta[0, hand[1:] - 1], local) ** 2).sum())
    assert cost_hands3d(theta, beta, cpf_r, cpf_p, obs) == pytest.approx(expect, abs=1e-10)


def shifted_pair(rng, shift):
    theta, beta, cpf_r, cpf_p = scene(rng, 1)
    theta = np.repeat(theta, 2, 0)
    cpf_r = np.repeat(cpf_r, 2, 0)
    cpf_p = np.stack([cpf_p[0], cpf_p[0] + shift])
    return theta, beta, cpf_r, cpf_p


@pytest.mark.parametrize("psi, expect", [((1, 1), 0.01), ((0, 0), 0.0), ((1, 0), 0.0025)])
def test_skate_examples(psi, expect, rng):
    args = shifted_pair(rng, [0.1, 0.0, 0.0])
    contacts = np.zeros((2, 21))
    contacts[:, 6] = psi
    assert cost_skate(*args, contacts, weight=1.0) == pytest.approx(expect, abs=1e-14)


def test_prior_examples(rng):
    theta = random_local(rng, 3)
    beta = random_beta(rng)
    assert cost_prior(theta, theta, beta) == 0.0
    moved = theta.copy()
    a = 0.3
    moved[1, 7] = theta[1, 7] @ geo.so3_exp([0.0, a, 0.0])
    w = GuidanceWeights(prior_abs=2.0, prior_vel=0.0, prior_fk=0.0)
    assert cost_prior(moved, theta, beta, w) == pytest.approx(2.0 * a * a, abs=1e-12)


def test_prior_term_oracle(rng):
    hat = random_local(rng, 4)
    theta = hat @ geo.so3_exp(rng.normal(scale=0.2, size=(4, 51, 3)))
    beta = random_beta(rng)
    w = GuidanceWeights(prior_abs=1.3, prior_vel=0.7, prior_fk=2.1)
    abs_term = (geo.geodesic_angle(hat, theta) ** 2).sum()
    vel = 0.0
    for t in range(1, 4):
        d = geo.so3_log(np.swapaxes(theta[t - 1], -1, -2) @ theta[t])
        dh = geo.so3_log(np.swapaxes(hat[t - 1], -1, -2) @ hat[t])
        vel += ((d - dh) ** 2).sum()
    fk = 0.0
    for t in range(4):
        _, a = body.fk_arrays(np.eye(3), np.zeros(3), theta[t], beta)
        _, b = body.fk_arrays(np.eye(3), np.zeros(3), hat[t], beta)
        fk += ((a - b) ** 2).sum()
    expect = 1.3 * abs_term + 0.7 * vel + 2.1 * fk
    assert cost_prior(theta, hat, beta, w) == pytest.approx(expect, rel=1e-10)


# --- Jacobians ---------------------------------------------------------------------------


def full_problem(rng, t=4):
    theta, beta, cpf_r, cpf_p = scene(rng, t)
    hat = theta @ geo.so3_exp(rng.normal(scale=0.2, size=(t, 51, 3)))
    obs = []
    for k in range(t):
        for side in SIDES:
            obs.append(HandObservation(k, side, K, CAM, rng.uniform(0, 100, (16, 2)),
                                       PoseSE3(Rotation3(geo.random_rotation(rng)), rng.normal(size=3)),
                                       geo.random_rotation(rng, 15)))
    inputs = GuidanceInputs(hat, beta, rng.uniform(0, 1, (t, 21)), cpf_r, cpf_p, obs)
    return BodyGuidanceProblem(inputs), theta


def test_jacobians_match_finite_differences(rng):
    prob, theta = full_problem(rng)
    base = prob.evaluate(theta)
    names = {b.name for b in base}
    assert {"prior_abs", "prior_vel", "prior_fk", "skate", "hands_left", "hands_right"} <= names
    worst = dict.fromkeys(names, 0.0)
    h = 1e-6
    for _ in range(20):
        t, v = int(rng.integers(len(theta))), int(rng.integers(153))
        d = np.zeros((len(theta), 153))
        d[t, v] = h
        plus, minus = prob.evaluate(prob.retract(theta, d)), prob.evaluate(prob.retract(theta, -d))
        for b, p, m in zip(base, plus, minus):
            fd = (p.residual - m.residual) / (2 * h)
            an = np.zeros_like(fd)
            jac = b.dense_jacobian()
            for k in range(b.blocks.shape[1]):
                sel = b.blocks[:, k] == t
                an[sel] += jac[sel, k, :, v]
            # columns a residual does not depend on leave only rounding noise in fd
            scale = max(np.abs(fd).max(), np.abs(an).max(), 1e-3)
            worst[b.name] = max(worst[b.name], np.abs(fd - an).max() / scale)
    assert max(worst.values()) < 1e-5, worst


# --- LM and CG --------------------------------------------------------------------------


def linear_problem(rng, m=12, n=5):
    a, b = rng.normal(size=(m, n)), rng.normal(size=m)
    return EuclideanProblem(lambda x: a @ x - b, lambda x: a, n), np.linalg.lstsq(a, b, rcond=None)[0]


def rosenbrock():
    return EuclideanProblem(lambda x: np.array([10 * (x[1] - x[0] ** 2), 1 - x[0]]),
                            lambda x: np.array([[-20 * x[0], 10.0], [-1.0, 0.0]]), 2)


def test_lm_linear(rng):
    prob, sol = linear_problem(rng)
    res = lm_solve(prob, np.zeros(5))
    assert np.abs(res.x - sol).max() < 1e-8
    assert res.accepted <= 3


def test_lm_zero_residual():
    prob = EuclideanProblem(lambda x: x - 1.0, lambda x: np.eye(3), 3)
    res = lm_solve(prob, np.ones(3))
    assert res.status == "gradient" and res.accepted == 0 and np.array_equal(res.x, np.ones(3))


def gradient_descent_cost(prob, x, steps=10_000, rate=1e-3):
    for _ in range(steps):
        (b,) = prob.evaluate(x)
        x = x - rate * 2 * b.jacobian[0, 0].T @ b.residual[0]
    (b,) = prob.evaluate(x)
    return float((b.residual ** 2).sum())


def test_lm_rosenbrock_beats_gradient_descent():
    prob = rosenbrock()
    x0 = np.array([-1.2, 1.0])
    res = lm_solve(prob, x0)
    assert res.cost <= gradient_descent_cost(prob, x0)
    assert np.all(np.diff(res.trace) <= 0)


@given(st.integers(0, 10_000))
def test_lm_trace_monotone(seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=3)
    prob = EuclideanProblem(lambda x: np.array([np.sin(x[0]) + x[1] ** 2 - c[0], x[0] * x[1] - c[1], x[1] - c[2]]),
                            lambda x: np.array([[np.cos(x[0]), 2 * x[1]], [x[1], x[0]], [0, 1.0]]), 2)
    res = lm_solve(prob, rng.normal(size=2))
    assert np.all(np.diff(res.trace) <= 0)


def test_lm_dense_and_sparse_agree(rng):
    prob, theta = full_problem(rng, 3)
    cfg = LMConfig(max_iterations=3)
    a = lm_solve(prob, theta, cfg)
    b = lm_solve(prob, theta, LMConfig(max_iterations=3, dense=True))
    assert np.abs(a.x - b.x).max() < 1e-8
    assert np.all(np.diff(a.trace) <= 0)


def test_lm_non_finite_names_block():
    prob = EuclideanProblem(lambda x: np.array([np.nan]), lambda x: np.ones((1, 1)), 1)
    with pytest.raises(NonFiniteResidualError, match="residual"):
        lm_solve(prob, np.zeros(1))


@given(st.integers(2, 50), st.integers(0, 1000))
def test_cg_converges_within_k(k, seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(k, k))
    a = m @ m.T + k * np.eye(k)
    b = rng.normal(size=k)
    x, it, rnorm = conjugate_gradient(lambda v: a @ v, b, tol=1e-12, max_iterations=k)
    assert it <= k
    assert np.linalg.norm(a @ x - b) < 1e-8


# --- guide -------------------------------------------------------------------------------


def test_guide_without_observations_is_identity(rng):
    theta, beta, cpf_r, cpf_p = scene(rng, 6)
    out = guide(theta, beta, np.zeros((6, 21)), cpf_r, cpf_p, weights=GuidanceWeights(skate=0.0))
    assert np.abs(out - theta).max() < 1e-12


def test_guide_decreases_cost_with_wrist_observations(rng):
    theta, beta, cpf_r, cpf_p = scene(rng, 5)
    truth = theta @ geo.so3_exp(rng.normal(scale=0.2, size=(5, 51, 3)))
    obs = [HandObservation(o.timestep, o.side, K, CAM, wrist_pose_world=o.wrist_pose_world)
           for o in self_observations(truth, beta, cpf_r, cpf_p)]
    out, res = guide(theta, beta, np.zeros((5, 21)), cpf_r, cpf_p, obs, return_result=True)
    assert res.trace[-1] < res.trace[0]
    assert res.accepted >= 1
    assert cost_hands3d(out, beta, cpf_r, cpf_p, obs) < cost_hands3d(theta, beta, cpf_r, cpf_p, obs)


def test_guided_step_schedule():
    assert [i for i in range(30) if is_guided_step(i, 30, 10)] == list(range(20, 30))


def test_hook_keeps_shape_and_contacts(rng):
    from egokit.state import pack

    theta, beta, cpf_r, cpf_p = scene(rng, 4)
    x = pack(theta, beta, rng.uniform(0, 1, (4, 21)))
    log = []
    hook = make_hook(cpf_r, cpf_p, self_observations(theta, beta, cpf_r, cpf_p), config=GuideConfig(guided_steps=1),
                     log=log)
    assert hook(x, 0, 2) is x
    y = hook(x, 1, 2)
    assert y.shape == x.shape and np.array_equal(y[:, 306:], x[:, 306:])
    assert len(log) == 1


def test_guidance_window_speed():
    rng = np.random.default_rng(0)
    theta, beta, cpf_r, cpf_p = scene(rng, 128)
    start = time.perf_counter()
    guide(theta @ geo.so3_exp(rng.normal(scale=0.1, size=(128, 51, 3))), beta, rng.uniform(0, 1, (128, 21)),
          cpf_r, cpf_p)
    assert time.perf_counter() - start < 5.0
