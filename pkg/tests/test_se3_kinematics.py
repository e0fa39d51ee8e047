import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from coopmpc.closed_loop import LINK1, LINK2, scenario1
from coopmpc.se3_kinematics import (
    AgentModel,
    EulerAngles,
    RepresentationSingularityError,
    agent_jacobian,
    chain_frames,
    euler_rate_jacobian,
    euler_to_rotation,
    forward_kinematics,
    grasp_matrix,
    grasp_residual,
    jacobian_fd_error,
    manipulability,
    object_agent_jacobian,
    object_pose_from_agent,
    object_repr_jacobian,
    object_state_from_agent,
    rotation_to_euler,
    skew,
    task_jacobian,
)

angle = st.floats(-np.pi, np.pi, allow_nan=False)
pitch = st.floats(-1.4, 1.4, allow_nan=False)
vec3 = st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3).map(np.array)


def spatial_agent(**kw):
    return AgentModel(link_lengths=(0.5, 0.4, 0.3), joint_axes=((0, 0, 1), (0, 1, 0), (0, 1, 0)),
                      joint_offsets=(0.0, 0.3, -0.2), base_dof="spatial", base_height=0.2,
                      grasp_offset_position=(0.1, 0.0, 0.2), **kw)


@pytest.fixture(scope="module")
def sc1():
    return scenario1(duration=0.0)


# --- skew -----------------------------------------------------------------

def test_skew_zero():
    assert np.array_equal(skew(np.zeros(3)), np.zeros((3, 3)))


def test_skew_canonical_cross_product():
    assert np.allclose(skew([1, 0, 0]) @ np.array([0, 1, 0]), [0, 0, 1])


@given(vec3, vec3)
def test_skew_matches_cross_product(a, b):
    S = skew(a)
    expected = np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])
    assert np.allclose(S @ b, expected, atol=1e-12)
    assert np.array_equal(S.T, -S)


# --- rotations --------------------------------------------------------------

def test_rotation_identity():
    assert np.array_equal(euler_to_rotation(EulerAngles()), np.eye(3))


def test_roll_quarter_turn_maps_y_to_z():
    R = euler_to_rotation(EulerAngles(np.pi / 2, 0, 0))
    q = Rotation.from_quat([np.sin(np.pi / 4), 0, 0, np.cos(np.pi / 4)])  # x-axis quaternion
    assert np.allclose(R, q.as_matrix(), atol=1e-15)
    assert np.allclose(R @ [0, 1, 0], [0, 0, 1], atol=1e-15)


@given(angle, pitch, angle)
def test_rotation_matches_intrinsic_xyz_and_is_orthonormal(phi, theta, psi):
    R = euler_to_rotation((phi, theta, psi))
    assert np.allclose(R, Rotation.from_euler("XYZ", [phi, theta, psi]).as_matrix(), atol=1e-12)
    assert np.linalg.norm(R.T @ R - np.eye(3)) <= 1e-12
    assert abs(np.linalg.det(R) - 1) <= 1e-12


@given(angle, pitch, angle)
def test_rotation_to_euler_round_trip(phi, theta, psi):
    eta = rotation_to_euler(euler_to_rotation((phi, theta, psi)))
    assert np.allclose(euler_to_rotation(eta), euler_to_rotation((phi, theta, psi)), atol=1e-12)


def test_rate_jacobian_identity_at_zero():
    assert np.array_equal(euler_rate_jacobian((0, 0, 0)), np.eye(3))


def test_rate_jacobian_determinant_at_sixty_degrees():
    assert abs(np.linalg.det(euler_rate_jacobian((0.3, np.pi / 3, -0.2))) - 0.5) <= 1e-12


def test_rate_jacobian_singular_at_vertical_pitch():
    assert abs(np.linalg.det(euler_rate_jacobian((0.7, np.pi / 2, 0.1)))) <= 1e-15


@given(angle, st.floats(-np.pi / 2, np.pi / 2), angle)
def test_rate_jacobian_determinant_is_cos_theta(phi, theta, psi):
    assert abs(np.linalg.det(euler_rate_jacobian((phi, theta, psi))) - np.cos(theta)) <= 1e-12


@given(angle, pitch, angle, vec3)
def test_rate_jacobian_gives_angular_velocity(phi, theta, psi, rate):
    eta = np.array([phi, theta, psi])
    h = 1e-6
    Rdot = (euler_to_rotation(eta + h * rate) - euler_to_rotation(eta - h * rate)) / (2 * h)
    W = Rdot @ euler_to_rotation(eta).T
    omega = np.array([W[2, 1], W[0, 2], W[1, 0]])
    assert np.allclose(euler_rate_jacobian(eta) @ rate, omega, atol=1e-7)


# --- forward kinematics ----------------------------------------------------------

def test_short_arm_end_effector_tends_to_base():
    a = AgentModel(link_lengths=(1e-12, 1e-12), joint_axes=((1, 0, 0), (1, 0, 0)), joint_offsets=(0, 0))
    p = forward_kinematics(a, [1.5, -2.0, 0.3, 0.4]).position
    assert np.allclose(p, [1.5, -2.0, 0.0], atol=1e-11)


def test_planar_agent_pose_matches_grasp_at_start(sc1):
    sys_ = sc1.system
    x_o = sys_.pose6(sc1.x0)
    for a, q in zip(sys_.agents, sys_.joints(sc1.x0)):
        assert np.abs(grasp_residual(a, q, x_o)).max() <= 1e-12


def test_link_lengths_reproduce_published_coordinates():
    # reach and height of a 45/45 degree arm
    assert abs(LINK1 * np.sin(np.pi / 4) - 0.7071) <= 1e-15
    assert abs(LINK1 * np.cos(np.pi / 4) + LINK2 - 0.9071) <= 1e-15


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), vec3)
def test_base_translation_moves_end_effector(x, y, a1, a2, d):
    a = spatial_agent()
    q = np.array([x, y, 0.2, 0.1, -0.2, 0.3, a1, a2, 0.4])
    q2 = q.copy()
    q2[:3] += d
    p1, p2 = forward_kinematics(a, q).position, forward_kinematics(a, q2).position
    assert np.allclose(p2 - p1, d, atol=1e-12)


def test_dimension_mismatch_rejected(sc1):
    with pytest.raises(ValueError):
        forward_kinematics(sc1.system.agents[0], [0, 0, 0])


# --- agent Jacobian -------------------------------------------------------------

def test_planar_jacobian_matches_finite_differences(sc1):
    rng = np.random.default_rng(1)
    a = sc1.system.agents[0]
    errs = [jacobian_fd_error(a, np.r_[rng.uniform(-5, 5, 2), rng.uniform(-np.pi, np.pi, 2)]) for _ in range(100)]
    assert max(errs) <= 1e-6


def test_spatial_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2)
    a = spatial_agent()
    errs = []
    for _ in range(100):
        q = np.r_[rng.uniform(-2, 2, 3), rng.uniform(-1, 1, 3), rng.uniform(-1.2, 1.2, 3)]
        errs.append(jacobian_fd_error(a, q))
    assert max(errs) <= 1e-6


def test_base_translation_columns_are_identity(sc1):
    J = agent_jacobian(spatial_agent(), np.r_[0.1, 0.2, 0.3, 0.2, -0.1, 0.5, 0.3, 0.2, -0.4])
    assert np.array_equal(J[:3, :3], np.eye(3))
    Jp = agent_jacobian(sc1.system.agents[0], [1.0, 2.0, 0.3, 0.5])
    assert np.array_equal(Jp[:2, :2], np.eye(2))


def test_stretched_arm_is_singular(sc1):
    # first joint at zero: both links point along the same line
    a = sc1.system.agents[0]
    det, ok = manipulability(a, [0.0, 0.0, 0.0, 0.0])
    assert abs(det) <= 1e-12 and not ok


def test_initial_configuration_is_well_conditioned(sc1):
    for a, q in zip(sc1.system.agents, sc1.system.joints(sc1.x0)):
        det, ok = manipulability(a, q, eps=1e-3)
        J = task_jacobian(a, q)
        assert ok and abs(det - np.prod(np.linalg.svd(J, compute_uv=False) ** 2)) <= 1e-12


def test_manipulability_is_continuous(sc1):
    a = sc1.system.agents[0]
    q = np.array([0.0, 0.0, np.pi / 4, np.pi / 4])
    d0 = manipulability(a, q)[0]
    gaps = [abs(manipulability(a, q + s)[0] - d0) for s in (1e-2, 1e-4, 1e-6, 1e-8)]
    assert all(g2 < g1 for g1, g2 in zip(gaps, gaps[1:])) and gaps[-1] < 1e-7


# --- object Jacobians ---------------------------------------------------------------

def test_object_repr_jacobian_identity():
    J, Jinv = object_repr_jacobian(np.zeros(6))
    assert np.array_equal(J, np.eye(6)) and np.array_equal(Jinv, np.eye(6))


def test_object_repr_jacobian_singular_pitch():
    with pytest.raises(RepresentationSingularityError):
        object_repr_jacobian([0, 0, 0, 0.1, np.pi / 2, 0.2])


@given(vec3, angle, st.floats(-np.pi / 3, np.pi / 3), angle)
def test_object_repr_jacobian_inverse(p, phi, theta, psi):
    J, Jinv = object_repr_jacobian(np.r_[p, phi, theta, psi])
    assert np.linalg.norm(J @ Jinv - np.eye(6)) <= 1e-12


def test_object_agent_jacobian_zero_offset():
    assert np.array_equal(object_agent_jacobian(np.zeros(3)), np.eye(6))


@given(vec3)
def test_object_agent_jacobian_unit_determinant(p):
    assert abs(np.linalg.det(object_agent_jacobian(p)) - 1) <= 1e-9


@given(vec3, vec3, vec3, st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
@settings(max_examples=50)
def test_object_agent_jacobian_rigid_body_velocity(p_off, v, w, a, b, c):
    # grasp point carried rigidly by a moving object, differentiated numerically
    eta0 = np.array([a, b, c])
    p_o = np.array([0.3, -0.2, 1.0])
    R0 = euler_to_rotation(eta0)
    rate = np.linalg.solve(euler_rate_jacobian(eta0), w)
    h = 1e-6

    def p_e(s):
        R = euler_to_rotation(eta0 + s * rate)
        return p_o + s * v + R @ R0.T @ p_off

    v_e = (p_e(h) - p_e(-h)) / (2 * h)
    twist = object_agent_jacobian(-p_off) @ np.r_[v, w]
    assert np.allclose(twist[:3], v_e, atol=1e-6 * (1 + np.abs(v_e).max()))
    assert np.allclose(twist[3:], w)


def test_grasp_matrix_single_agent_zero_offset():
    a = AgentModel(link_lengths=(1.0,), joint_axes=((1, 0, 0),), joint_offsets=(0.0,), base_dof="spatial")
    assert np.array_equal(grasp_matrix([a], [np.zeros(7)]), np.eye(6))


def test_grasp_matrix_transpose_sums_wrenches(sc1):
    rng = np.random.default_rng(3)
    sys_ = sc1.system
    qs = sys_.joints(sc1.x0)
    G = grasp_matrix(sys_.agents, qs)
    p_o = sys_.pose6(sc1.x0)[:3]
    lam = rng.standard_normal(12)
    total_f, total_t = np.zeros(3), np.zeros(3)
    for i, (a, q) in enumerate(zip(sys_.agents, qs)):
        f, t = lam[6 * i: 6 * i + 3], lam[6 * i + 3: 6 * i + 6]
        r = forward_kinematics(a, q).position - p_o
        total_f += f
        total_t += t + np.cross(r, f)
    assert np.allclose(G.T @ lam, np.r_[total_f, total_t], atol=1e-12)


def test_opposite_wrenches_cancel(sc1):
    sys_ = sc1.system
    G = grasp_matrix(sys_.agents, sys_.joints(sc1.x0))
    tau = np.array([0.3, -1.0, 2.0])
    lam = np.r_[np.zeros(3), tau, np.zeros(3), -tau]
    assert np.allclose(G.T @ lam, 0, atol=1e-15)


def test_grasp_matrix_full_rank_at_start(sc1):
    sys_ = sc1.system
    G = grasp_matrix(sys_.agents, sys_.joints(sc1.x0))
    assert np.linalg.matrix_rank(G) == 6
    assert np.linalg.svd(G, compute_uv=False).min() > 0.5


# --- object state from one agent ------------------------------------------------

def test_object_state_from_first_agent_at_start(sc1):
    a = sc1.system.agents[0]
    pose, v = object_state_from_agent(a, [0.0, 0.0, np.pi / 4, np.pi / 4], np.zeros(4))
    assert np.allclose(pose.position, [0, -2.2071, 0.9071], atol=1e-12)
    assert abs(pose.orientation.phi - np.pi / 2) <= 1e-12
    assert np.array_equal(v, np.zeros(6))


def test_agents_agree_on_object_pose(sc1):
    sys_ = sc1.system
    poses = [object_pose_from_agent(a, q).as_array() for a, q in zip(sys_.agents, sys_.joints(sc1.x0))]
    assert np.abs(poses[0] - poses[1]).max() <= 1e-9


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.2, 1.3), st.floats(-1.3, 1.3), vec3)
@settings(max_examples=50)
def test_object_velocity_round_trip(x, y, a1, a2, qd):
    a = scenario1(duration=0.0).system.agents[0]
    q = np.array([x, y, a1, a2])
    qdot = np.r_[qd, 0.1]
    pose, v_o = object_state_from_agent(a, q, qdot)
    # the end-effector twist implied by the object twist equals J qdot
    p_oe = pose.position - forward_kinematics(a, q).position
    assert np.allclose(object_agent_jacobian(p_oe) @ v_o, agent_jacobian(a, q) @ qdot, atol=1e-9)


def test_chain_frames_lengths(sc1):
    fr = chain_frames(sc1.system.agents[0], [0, 0, 0.3, 0.4])
    assert len(fr.origins) == 3 and len(fr.rotations) == 2
