import numpy as np
import pytest
from numpy.testing import assert_allclose

import etckit.odeint as oi
import etckit.tensor as T
from etckit.odeint import (
    EventSolveResult,
    IntegrationConfig,
    event_time_gradient,
    find_event,
    integrate,
)
from etckit.tensor import ContractViolation, NumericError, ParameterSet


CFG = IntegrationConfig(step=0.1)


def test_config_validation():
    with pytest.raises(ContractViolation):
        IntegrationConfig(step=0.0)
    with pytest.raises(ContractViolation):
        IntegrationConfig(step=0.1, event_tol=0.2)
    with pytest.raises(ContractViolation):
        IntegrationConfig(step=0.1, method="euler")


def test_exponential_decay_endpoint():
    traj = integrate(lambda x: -x, np.array([1.0]), 0.0, 1.0, CFG)
    assert traj.x_end[0] == pytest.approx(np.exp(-1.0), abs=1e-6)
    assert traj.ts[0] == 0.0 and traj.t_end == 1.0


def test_constant_and_linear_fields_exact():
    traj = integrate(lambda x: np.zeros_like(x), np.array([2.0, -1.0]), 0.0, 3.0, CFG)
    assert np.array_equal(traj.xs, np.broadcast_to([2.0, -1.0], traj.xs.shape))
    traj = integrate(lambda x: np.ones_like(x), np.array([0.0]), 0.0, 1.0, CFG)
    assert_allclose(traj.xs[:, 0], traj.ts, atol=1e-14)


def test_truncated_final_step():
    traj = integrate(lambda x: np.ones_like(x), np.array([0.0]), 0.0, 0.25, CFG)
    assert_allclose(traj.ts, [0.0, 0.1, 0.2, 0.25])
    assert traj.x_end[0] == pytest.approx(0.25, abs=1e-14)


def test_rk4_order_ratio():
    def endpoint_error(step):
        cfg = IntegrationConfig(step=step)
        traj = integrate(lambda x: -x, np.array([1.0]), 0.0, 1.0, cfg)
        return abs(traj.x_end[0] - np.exp(-1.0))

    ratio = endpoint_error(0.1) / endpoint_error(0.05)
    assert 12.0 <= ratio <= 20.0


def test_dense_output_accuracy():
    traj = integrate(lambda x: -x, np.array([1.0]), 0.0, 1.0, CFG)
    for t in np.linspace(0.0, 1.0, 37):
        assert traj.eval(t)[0] == pytest.approx(np.exp(-t), abs=1e-6)


def test_divergence_error_reports_last_finite_time():
    with pytest.raises(NumericError, match="last finite time"):
        integrate(lambda x: x * x, np.array([1.0]), 0.0, 10.0,
                  IntegrationConfig(step=0.5))


def test_find_event_linear_crossing():
    res = find_event(lambda x: np.ones_like(x), lambda s: s[0] - 1.0,
                     np.array([0.0]), 0.0, 5.0, CFG)
    assert res.converged
    assert res.t_event == pytest.approx(1.0, abs=1e-9)
    assert res.x_event[0] == pytest.approx(1.0, abs=1e-7)


def test_find_event_exponential_crossing():
    res = find_event(lambda x: -x, lambda s: 1.0 - s[0], np.array([2.0]),
                     0.0, 5.0, CFG)
    assert res.converged
    assert res.t_event == pytest.approx(np.log(2.0), abs=1e-6)
    # residual in h-units at the returned event state
    assert abs(1.0 - res.x_event[0]) <= 1e-7


def test_find_event_no_crossing():
    res = find_event(lambda x: -x, lambda s: -1.0, np.array([1.0]), 0.0, 2.0, CFG)
    assert not res.converged
    assert res.t_event == 2.0


def test_find_event_precondition():
    with pytest.raises(ContractViolation, match="already active"):
        find_event(lambda x: x, lambda s: 1.0, np.array([1.0]), 0.0, 1.0, CFG)


def test_find_event_returns_first_crossing():
    # x(t)=t, h = sin(2*pi*(x-0.25)) crosses upward at 0.25, 1.25, ...
    res = find_event(lambda x: np.ones_like(x),
                     lambda s: np.sin(2 * np.pi * (s[0] - 0.25)),
                     np.array([0.0]), 0.0, 3.0, IntegrationConfig(step=0.11))
    assert res.converged
    assert res.t_event == pytest.approx(0.25, abs=1e-6)
    # no earlier knot interval saw a sign change
    hs = np.sin(2 * np.pi * (res.trajectory.xs[:, 0] - 0.25))
    before = hs[res.trajectory.ts < res.t_event - 1e-6]
    assert np.all(before < 0)


def test_event_time_gradient_analytic():
    # x' = theta, h = x - 1, t* = 1/theta
    params = ParameterSet({"theta": np.array(2.0)})

    def field(s, p):
        return T.reshape(p["theta"], (1,))

    def h(s, p):
        return T.sub(T.getitem(s, 0), 1.0)

    num_field = lambda s: np.full(1, float(T._val(params["theta"])))
    res = find_event(num_field, lambda s: s[0] - 1.0, np.array([0.0]), 0.0, 5.0, CFG)
    assert res.t_event == pytest.approx(0.5, abs=1e-9)
    g = event_time_gradient(field, h, np.array([0.0]), res.t_event, params, CFG,
                            trajectory=res.trajectory)
    assert g["theta"] == pytest.approx(-0.25, rel=1e-6)


def test_event_time_gradient_zero_when_params_unused():
    params = ParameterSet({"w": np.zeros(3)})

    def field(s, p):
        return np.ones(1)

    def h(s, p):
        return s[0] - 1.0 if not isinstance(s, T.Tensor) else T.sub(T.getitem(s, 0), 1.0)

    g = event_time_gradient(field, h, np.array([0.0]), 1.0, params, CFG)
    assert_allclose(g["w"], np.zeros(3))


def test_event_time_gradient_matches_fd_resolve():
    # x' = -theta * x, h = 0.7 - x, x0 = 2: t* = ln(2/0.7)/theta
    rng = np.random.default_rng(0)
    for _ in range(3):
        th = float(rng.uniform(0.5, 2.0))
        params = ParameterSet({"theta": np.array(th)})

        def field(s, p):
            return T.mul(T.neg(p["theta"]), s)

        def h(s, p):
            return T.sub(0.7, T.getitem(s, 0))

        def solve(theta):
            res = find_event(lambda s: -theta * s, lambda s: 0.7 - s[0],
                             np.array([2.0]), 0.0, 20.0,
                             IntegrationConfig(step=0.05, event_tol=1e-12))
            assert res.converged
            return res

        res = solve(th)
        assert res.t_event == pytest.approx(np.log(2.0 / 0.7) / th, abs=1e-6)
        g = event_time_gradient(field, h, np.array([2.0]), res.t_event, params,
                                IntegrationConfig(step=0.05, event_tol=1e-12),
                                trajectory=res.trajectory)
        eps = 1e-5
        fd = (solve(th + eps).t_event - solve(th - eps).t_event) / (2 * eps)
        assert g["theta"] == pytest.approx(fd, rel=1e-4)
        assert g["theta"] == pytest.approx(-np.log(2.0 / 0.7) / th**2, rel=1e-4)


def test_event_time_gradient_tangential_crossing_error():
    params = ParameterSet({"theta": np.array(1.0)})

    def field(s, p):
        return np.zeros(1)  # state frozen; h constant in time

    def h(s, p):
        return T.sub(T.getitem(s, 0), 1.0)

    with pytest.raises(NumericError, match="tangential"):
        event_time_gradient(field, h, np.array([1.0 - 1e-14]), 1.0, params, CFG)


def test_solver_call_counter_increments():
    before = oi.solver_calls()
    integrate(lambda x: -x, np.array([1.0]), 0.0, 0.5, CFG)
    find_event(lambda x: np.ones_like(x), lambda s: s[0] - 0.2,
               np.array([0.0]), 0.0, 1.0, CFG)
    assert oi.solver_calls() == before + 2
