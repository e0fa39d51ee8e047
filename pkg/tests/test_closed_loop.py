from dataclasses import replace

import numpy as np
import pytest

from coopmpc.closed_loop import (
    InitialInfeasibleError,
    Scenario,
    ScenarioError,
    TrajectoryLog,
    monitor_convergence,
    monitor_value_function,
    preflight,
    run,
    scenario1,
    scenario2,
)


@pytest.fixture(scope="module")
def short_run():
    sc = scenario1(duration=1.0)
    return sc, run(sc)


@pytest.fixture(scope="module")
def at_rest():
    sc = scenario2(duration=1.0)
    sc = replace(sc, x0=sc.x_des.copy(), validate_terminal=False)
    return sc, run(sc)


def test_short_run_shapes_and_status(short_run):
    sc, log = short_run
    assert len(log) == 10
    assert log.sub_x.shape == (101, sc.system.nx)
    assert np.array_equal(log.sub_x[0], sc.x0)
    assert set(log.status) == {"optimal"}
    assert not log.fallback.any()
    assert log.residuals.min() >= 0
    assert log.sub_residuals(sc.model()).min() >= -1e-6


def test_short_run_makes_progress(short_run):
    sc, log = short_run
    assert np.linalg.norm(log.final_error[:3]) < np.linalg.norm((sc.x0 - sc.x_des)[:3])
    assert log.J[-1] < log.J[0]


def test_run_is_deterministic(short_run):
    sc, log = short_run
    again = run(sc)
    assert np.array_equal(again.sub_x, log.sub_x) and np.array_equal(again.J, log.J)


def test_equilibrium_is_kept(at_rest):
    sc, log = at_rest
    assert np.abs(log.sub_x - sc.x_des).max() <= 1e-8
    assert np.ptp(log.J) <= 1e-9
    assert monitor_value_function(log).ok
    rep = monitor_convergence(log)
    assert rep.bounded and rep.final_error_norm <= 1e-8


def test_value_monitor_catches_injected_increase(short_run):
    sc, log = short_run
    J = log.J.copy()
    J[5] = J[4] * 2.0 + 1.0
    rep = monitor_value_function(log, J=J)
    assert 4 in rep.monotone_violations and 4 in rep.decrement_violations
    assert not rep.ok
    assert rep.monitor.violations == sorted(set(rep.monotone_violations) | set(rep.decrement_violations))


def test_value_monitor_cumulative_integral(short_run):
    sc, log = short_run
    z = monitor_value_function(log).monitor.z2_integral
    assert len(z) == len(log) and np.all(np.diff(z) >= 0)


def test_zero_duration_is_vacuous():
    sc = scenario1(duration=0.0)
    log = run(replace(sc, validate_terminal=False), check_candidates=False)
    assert len(log) == 0 and log.sub_x.shape == (1, sc.system.nx)
    assert monitor_value_function(log).ok
    assert monitor_convergence(log).ok


def test_convergence_monitor_flags_divergence(at_rest):
    sc, log = at_rest
    grow = np.exp(np.linspace(0, 12, log.sub_x.shape[0]))[:, None]
    bad = replace(log, sub_x=log.x_des + 1e-2 * grow * np.ones_like(log.sub_x))
    rep = monitor_convergence(bad)
    assert not rep.bounded and not rep.ok
    assert any("|e|" in v for v in rep.violations)


def test_scenario_validation():
    sc = scenario1(duration=0.0)
    with pytest.raises(ScenarioError):
        replace(sc, x0=sc.x0[:-1])
    with pytest.raises(ScenarioError):
        replace(sc, delta=0.03)
    with pytest.raises(ScenarioError):
        replace(sc, duration=-1.0)
    with pytest.raises(ScenarioError):
        replace(sc, duration=0.05)
    xd = sc.x_des.copy()
    xd[4] = 0.1
    with pytest.raises(ScenarioError):
        replace(sc, x_des=xd)
    x0 = sc.x0.copy()
    x0[0] += 0.5
    with pytest.raises(ScenarioError, match="grasp residual"):
        replace(sc, x0=x0)


def test_infeasible_start_is_reported():
    sc = scenario1(duration=1.0)
    x0 = sc.x0.copy()
    x0[4] = 100.0  # object speed far beyond the joint-rate limits
    bad = Scenario(sc.name, sc.system, x0, sc.x_des, sc.config, sc.workspace, 1.0, validate_terminal=False)
    assert bad.check_initial_state()
    with pytest.raises(InitialInfeasibleError):
        run(bad)


def test_presets():
    s1, s2 = scenario1(), scenario2()
    assert s1.system.N == 2 and s2.system.N == 3
    assert np.allclose(s1.x0[:4], [0.0, -2.2071, 0.9071, np.pi / 2])
    assert np.allclose(s1.x_des[:4], [10.0, 10.0, 0.9071, np.pi / 2])
    assert np.allclose(s2.x_des[:4], [5.0, -2.2071, 0.9071, np.pi / 2])
    obs = s1.workspace.obstacles[0]
    assert np.allclose(obs.center, [5, 5, 1]) and np.allclose(obs.semi_axes, 2)
    assert not s2.workspace.obstacles
    assert (s1.config.h, s1.config.T_p, s2.config.T_p) == (0.1, 0.3, 0.5)
    assert np.all(s1.config.Q == 10) and np.all(s1.config.P == 10) and np.all(s1.config.R == 2)
    assert np.all(s2.config.Q == 0.5) and np.all(s2.config.R == 0.5)
    assert (s1.duration, s2.duration) == (80.0, 100.0)
    assert s1.delta == pytest.approx(0.01)
    for sc in (s1, s2):
        assert not sc.check_initial_state()
        assert preflight(sc) == []


def test_log_is_a_dataclass_record(short_run):
    sc, log = short_run
    assert isinstance(log, TrajectoryLog)
    assert log.candidate_admissible.shape == (len(log),) and np.isnan(log.candidate_admissible[0])
    assert np.all(np.isfinite(log.candidate_admissible[1:]))
