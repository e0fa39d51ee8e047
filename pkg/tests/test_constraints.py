import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from coopmpc.closed_loop import scenario1, scenario2
from coopmpc.coupled_dynamics import project_grasp
from coopmpc.constraints import (
    EllipsoidRegion,
    Workspace,
    agent_hull,
    audit_workspace,
    in_error_set,
    input_bound_radius,
    input_bounds,
    object_hull,
    separation,
    sphere,
    state_residuals,
    torque_bound_margins,
)
from coopmpc.se3_kinematics import forward_kinematics, manipulability, task_jacobian

S1, S2 = scenario1(duration=0.0), scenario2(duration=0.0)


def ellipsoids():
    f = st.floats(-3, 3, allow_nan=False)
    ax = st.floats(0.1, 2, allow_nan=False)
    return st.builds(
        lambda c, a, r: EllipsoidRegion(c, a, Rotation.from_rotvec(r).as_matrix()),
        st.tuples(f, f, f), st.tuples(ax, ax, ax), st.tuples(f, f, f))


def test_unit_spheres_three_apart():
    a, b = sphere((0, 0, 0), 1.0), sphere((3, 0, 0), 1.0)
    for m in ("support", "sphere"):
        assert separation(a, b, m) == pytest.approx(1.0)


def test_unknown_method_rejected():
    with pytest.raises(ValueError):
        separation(sphere((0, 0, 0), 1), sphere((3, 0, 0), 1), "gjk")


def test_nonpositive_axes_rejected():
    with pytest.raises(ValueError):
        EllipsoidRegion((0, 0, 0), (1, 0, 1))


@settings(max_examples=200, deadline=None)
@given(ellipsoids(), ellipsoids())
def test_separation_symmetric_and_ordered(a, b):
    s_ab, s_ba = separation(a, b), separation(b, a)
    assert s_ab == pytest.approx(s_ba, abs=1e-12)
    assert s_ab >= separation(a, b, "sphere") - 1e-12


def test_no_false_disjoint():
    # a positive clearance must never be reported for intersecting regions
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        a = EllipsoidRegion(rng.uniform(-2, 2, 3), rng.uniform(0.2, 1.5, 3),
                            Rotation.random(random_state=rng.integers(1 << 31)).as_matrix())
        b = EllipsoidRegion(rng.uniform(-2, 2, 3), rng.uniform(0.2, 1.5, 3),
                            Rotation.random(random_state=rng.integers(1 << 31)).as_matrix())
        if separation(a, b) > 0:
            pts = a.sample_boundary(200, rng)
            assert not np.any(b.contains(pts))
            # centre segment points inside a must not lie inside b either
            t = np.linspace(0, 1, 50)[:, None]
            seg = a.center + t * (b.center - a.center)
            assert not np.any(a.contains(seg) & b.contains(seg))


def test_support_function_of_sphere():
    s = sphere((1, 2, 3), 0.7)
    n = np.array([1.0, 2.0, -2.0]) / 3.0
    assert s.support(n) == pytest.approx(0.7)


@pytest.mark.parametrize("sc", [S1, S2], ids=["two-agents", "three-agents"])
def test_agent_hull_contains_arm(sc):
    rng = np.random.default_rng(1)
    for a, q0 in zip(sc.system.agents, sc.system.joints(sc.x0)):
        for _ in range(200):
            q = q0.copy()
            lo, hi = np.array(a.joint_limits).T
            q[a.n_base:] = rng.uniform(lo, hi)
            hull = agent_hull(a, q)
            assert hull.contains(forward_kinematics(a, q).position, tol=1e-9)


def test_object_hull_follows_pose():
    h = object_hull([1, 2, 3, 0, 0, np.pi / 2], (0.5, 0.2, 0.1))
    assert np.allclose(h.center, [1, 2, 3])
    assert h.contains([1.0, 2.45, 3.0]) and not h.contains([1.45, 2.0, 3.0])


def test_start_states_admissible():
    for sc in (S1, S2):
        res = state_residuals(sc.system, sc.x0, sc.workspace, sc.config.constraint_config)
        assert res.satisfied(), res.violations()
        assert len(res.names) == res.values.size


def test_agent_inside_obstacle_is_negative():
    sc = S1
    x = sc.x0.copy()
    obs = sc.workspace.obstacles[0]
    x[:2] = obs.center[:2]
    off = sc.system.d * 2
    for i, a in enumerate(sc.system.agents):
        q = sc.system.joints(sc.x0)[i]
        x[off: off + 2] = obs.center[:2] + (q[:2] - sc.x0[:2])
        off += a.n
    res = state_residuals(sc.system, x, sc.workspace, sc.config.constraint_config).as_dict()
    assert res["agent_obstacle[0,0]"] < 0
    assert res["object_obstacle[0]"] < 0


def test_pitch_and_manipulability_residuals():
    sc = S1
    cfg = sc.config.constraint_config
    res = state_residuals(sc.system, sc.x0, sc.workspace, cfg).as_dict()
    assert res["object_pitch"] == pytest.approx(cfg.theta_bar)
    for i, (a, q) in enumerate(zip(sc.system.agents, sc.system.joints(sc.x0))):
        assert res[f"manipulability[{i}]"] == pytest.approx(abs(manipulability(a, q)[0]) - cfg.eps_sing)
        assert res[f"base_pitch[{i}]"] == pytest.approx(cfg.theta_bar)


def test_velocity_residuals_at_rest():
    sc = S2
    res = state_residuals(sc.system, sc.x0, sc.workspace, sc.config.constraint_config).as_dict()
    for name, v in res.items():
        if name.startswith("qdot"):
            assert v == pytest.approx(sc.system.agents[0].qdot_bar)


def test_error_set_agrees_with_residuals():
    sc = S1
    rng = np.random.default_rng(2)
    seen = set()
    for _ in range(1000):
        x = sc.x0.copy()
        x[:2] += rng.uniform(0, 10, 2)
        x[3] += rng.uniform(-0.3, 0.3)
        x[4:8] = rng.uniform(-0.6, 0.6, 4)
        x = project_grasp(sc.system, x)
        e = x - sc.x_des
        ok = state_residuals(sc.system, x, sc.workspace, sc.config.constraint_config).satisfied()
        assert in_error_set(sc.system, e, sc.x_des, sc.workspace, sc.config.constraint_config) == ok
        seen.add(ok)
    assert seen == {True, False}


def test_input_radius_times_sigma_min_is_torque_bound():
    for a, q in zip(S2.system.agents, S2.system.joints(S2.x0)):
        smin = np.linalg.svd(task_jacobian(a, q).T, compute_uv=False).min()
        assert input_bound_radius(a, q) * smin == pytest.approx(a.tau_bar, rel=1e-10)


def test_input_radius_grows_toward_singularity():
    a = S1.system.agents[0]
    q = S1.system.joints(S1.x0)[0].copy()
    radii = []
    for shoulder in np.linspace(q[2], 1e-3, 30):  # toward the singular first-joint limit
        q[2] = shoulder
        radii.append(input_bound_radius(a, q))
    assert np.all(np.diff(radii) > 0) and radii[-1] > 50 * radii[0]


def test_input_bounds_and_torque_margins():
    sc = S1
    b = input_bounds(sc.system, sc.x0)
    assert np.allclose(b.upper, -b.lower) and b.upper.size == sc.system.nu
    u = np.zeros(sc.system.nu)
    margins = torque_bound_margins(sc.system, sc.x0, u)
    assert np.allclose(margins, [a.tau_bar for a in sc.system.agents])
    assert np.allclose(input_bounds(sc.system, sc.x0, box=10).upper, 10)


def test_audit_flags_narrow_gaps_and_bad_states():
    sc = S1
    ws = Workspace((sphere((0, 10, 0), 1.0), sphere((0, 12.5, 0), 1.0)))
    warns = audit_workspace(sc.system, sc.x0, ws)
    assert any("obstacles 0 and 1" in w for w in warns)
    assert audit_workspace(sc.system, sc.x0, sc.workspace, sc.x_des, sc.config.constraint_config) == []
    assert audit_workspace(sc.system, sc.x0, Workspace(), x_des=sc.x0, config=sc.config.constraint_config) == []
