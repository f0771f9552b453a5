import numpy as np
import pytest
from numpy.testing import assert_allclose

import etckit.tensor as T
from etckit.nets import (
    ClassKNet,
    ControllerNet,
    LyapunovNet,
    integrate_classk,
    lie_derivative,
    project_nonneg,
)
from etckit.tensor import ContractViolation, ParameterSet, Tape, Tensor, grad


@pytest.fixture
def vnet():
    return LyapunovNet((2, 10, 10, 1), target=np.zeros(2))


def test_lyapunov_zero_at_target_exactly(vnet):
    rng = np.random.default_rng(0)
    for _ in range(5):
        params = vnet.init_params(rng)
        assert float(vnet.value(params, np.zeros(2))) == 0.0
    shifted = LyapunovNet((3, 8, 1), target=np.array([1.0, -2.0, 0.5]))
    params = shifted.init_params(rng)
    assert abs(float(shifted.value(params, shifted.target))) <= 1e-14


def test_lyapunov_zero_weights_reduce_to_quadratic(vnet):
    params = ParameterSet({k: np.zeros_like(v) for k, v in
                           vnet.init_params(np.random.default_rng(0)).items()})
    x = np.array([1.0, 2.0])
    assert_allclose(float(vnet.value(params, x)), 1e-3 * 5.0, rtol=1e-15)
    assert_allclose(vnet.gradient(params, x), [0.002, 0.004], rtol=1e-15)


def test_lyapunov_gradient_vanishes_at_target(vnet):
    params = vnet.init_params(np.random.default_rng(3))
    assert_allclose(vnet.gradient(params, np.zeros(2)), np.zeros(2), atol=0)


def test_lyapunov_dominates_quadratic_term(vnet):
    rng = np.random.default_rng(1)
    params = vnet.init_params(rng)
    X = rng.uniform(-5, 5, size=(10_000, 2))
    V = vnet.value(params, X)
    quad = 1e-3 * np.sum(X * X, axis=1)
    assert np.min(V - quad) >= -1e-12


def test_lyapunov_is_convex_on_random_pairs(vnet):
    rng = np.random.default_rng(2)
    params = vnet.init_params(rng)
    A = rng.uniform(-5, 5, size=(1000, 2))
    B = rng.uniform(-5, 5, size=(1000, 2))
    vm = vnet.value(params, (A + B) / 2.0)
    bound = (vnet.value(params, A) + vnet.value(params, B)) / 2.0
    assert np.max(vm - bound) <= 1e-9


def test_lyapunov_batch_matches_single(vnet):
    rng = np.random.default_rng(4)
    params = vnet.init_params(rng)
    X = rng.normal(size=(7, 2))
    batch = vnet.value(params, X)
    singles = np.array([float(vnet.value(params, x)) for x in X])
    assert_allclose(batch, singles, rtol=1e-14)


def test_lyapunov_gradient_matches_finite_differences(vnet):
    rng = np.random.default_rng(5)
    params = vnet.init_params(rng)
    x = rng.normal(size=2)
    g = vnet.gradient(params, x)
    eps = 1e-6
    for i in range(2):
        hi, lo = x.copy(), x.copy()
        hi[i] += eps
        lo[i] -= eps
        fd = (float(vnet.value(params, hi)) - float(vnet.value(params, lo))) / (2 * eps)
        assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_project_nonneg_clamps_only_hidden_path(vnet):
    params = vnet.init_params(np.random.default_rng(6))
    params["V.U1"][0, 0] = -3.0
    w_before = params["V.W1"].copy()
    project_nonneg(params)
    assert params["V.U1"][0, 0] == 0.0
    assert np.all(params["V.U1"] >= 0)
    assert np.array_equal(params["V.W1"], w_before)


def test_lyapunov_rejects_bad_dims():
    with pytest.raises(ContractViolation):
        LyapunovNet((2, 10, 3), target=np.zeros(2))
    with pytest.raises(ContractViolation):
        LyapunovNet((2, 10, 1), target=np.zeros(3))


# -- controller ---------------------------------------------------------------


def test_gated_controller_hand_value():
    net = ControllerNet((2, 2, 2), target=np.zeros(2), mode="gated")
    params = ParameterSet({"u.W0": np.eye(2), "u.b0": np.zeros(2), "u.W1": np.eye(2)})
    u = net.value(params, np.array([0.5, -0.5]))
    # core = relu(y) = (0.5, 0); u = y * core
    assert_allclose(u, [0.25, 0.0], rtol=0, atol=0)


def test_offset_controller_is_exactly_linear_without_hidden_layers():
    net = ControllerNet((2, 1), target=np.array([1.0, 1.0]), mode="offset")
    params = ParameterSet({"u.W0": np.array([[2.0, -1.0]])})
    x = np.array([2.0, 2.0])  # y = (1, 1)
    assert_allclose(net.value(params, x), [1.0])
    X = np.random.default_rng(0).normal(size=(6, 2))
    assert_allclose(net.value(params, X), (X - 1.0) @ np.array([[2.0, -1.0]]).T)


def test_controller_vanishes_at_target_both_modes():
    rng = np.random.default_rng(7)
    tgt = np.array([0.3, -0.7, 1.1])
    for dims, mode in (((3, 8, 8, 3), "gated"), ((3, 8, 8, 2), "offset")):
        net = ControllerNet(dims, target=tgt, mode=mode)
        params = net.init_params(rng)
        assert_allclose(net.value(params, tgt), np.zeros(dims[-1]), atol=0)


def test_controller_auto_mode_selection():
    assert ControllerNet((3, 8, 3), target=np.zeros(3)).mode == "gated"
    assert ControllerNet((3, 8, 2), target=np.zeros(3)).mode == "offset"
    with pytest.raises(ContractViolation):
        ControllerNet((3, 8, 2), target=np.zeros(3), mode="gated")


def test_controller_batch_matches_single():
    rng = np.random.default_rng(8)
    net = ControllerNet((3, 16, 3), target=rng.normal(size=3))
    params = net.init_params(rng)
    X = rng.normal(size=(5, 3))
    batch = net.value(params, X)
    singles = np.stack([net.value(params, x) for x in X])
    assert_allclose(batch, singles, rtol=1e-14)


def test_controller_final_layer_has_no_bias():
    net = ControllerNet((2, 4, 2), target=np.zeros(2))
    params = net.init_params(np.random.default_rng(9))
    assert "u.W1" in params and "u.b1" not in params
    assert net.weight_names() == ["u.W0", "u.W1"]


# -- class-K -----------------------------------------------------------------


def test_classk_zero_params_integrand_is_one():
    net = ClassKNet((1, 20, 1))
    params = ParameterSet({k: np.zeros_like(v) for k, v in
                           net.init_params(np.random.default_rng(0)).items()})
    assert_allclose(net.q_values(params, np.array([0.0, 1.0, 4.0])), np.ones(3))
    assert float(net.alpha(params, 2.5)) == pytest.approx(2.5, abs=1e-10)


def test_classk_quadrature_exact_for_linear_integrand():
    out = integrate_classk(lambda s: s, np.array([2.0, 3.0]))
    assert_allclose(out, [2.0, 4.5], atol=1e-12)


def test_classk_alpha_properties():
    rng = np.random.default_rng(10)
    net = ClassKNet()
    params = net.init_params(rng)
    grid = np.linspace(0.0, 8.0, 50)
    q = net.q_values(params, grid)
    assert np.all(q > 0)
    a = net.alpha(params, grid)
    assert float(a[0]) == 0.0
    assert np.all(np.diff(a) > 0)


def test_classk_rejects_negative_radius():
    net = ClassKNet()
    params = net.init_params(np.random.default_rng(11))
    with pytest.raises(ContractViolation):
        net.alpha(params, -0.1)
    with pytest.raises(ContractViolation):
        net.q_values(params, np.array([-1.0]))


def test_classk_alpha_rejects_taped_radius():
    net = ClassKNet()
    params = net.init_params(np.random.default_rng(12))
    tape = Tape()
    with pytest.raises(ContractViolation):
        net.alpha(params, tape.leaf(1.0, "r"))


def test_classk_gradient_wrt_params_matches_fd():
    rng = np.random.default_rng(13)
    net = ClassKNet((1, 6, 1))
    params = net.init_params(rng)
    r = np.array([0.7, 2.2])

    def total(p):
        return float(np.sum(net.alpha(p, r)))

    tape = Tape()
    leaves = tape.leaves(params)
    out = T.tsum(net.alpha(leaves, r))
    gs = grad(out, leaves)
    eps = 1e-6
    for name in params:
        it = np.nditer(params[name], flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            hi = params.clone()
            lo = params.clone()
            hi[name][idx] += eps
            lo[name][idx] -= eps
            fd = (total(hi) - total(lo)) / (2 * eps)
            assert gs[name][idx] == pytest.approx(fd, rel=1e-5, abs=1e-7)


# -- lie derivative ----------------------------------------------------------


def test_lie_derivative_of_squared_norm():
    def fn(X):
        return T.tsum(T.mul(X, X), axis=1)

    vals, lie = lie_derivative(fn, np.array([[1.0]]), np.array([[-1.0]]))
    assert_allclose(vals, [1.0])
    assert_allclose(lie, [-2.0])


def test_lie_derivative_zero_field_and_constant_function():
    def fn(X):
        return T.tsum(T.mul(X, X), axis=1)

    _, lie = lie_derivative(fn, np.array([[2.0, 3.0]]), np.zeros((1, 2)))
    assert_allclose(lie, [0.0])

    def const_fn(X):
        return T.add(T.tsum(T.mul(X, 0.0), axis=1), 4.0)

    vals, lie = lie_derivative(const_fn, np.array([[2.0, 3.0]]), np.ones((1, 2)))
    assert_allclose(vals, [4.0])
    assert_allclose(lie, [0.0])


def test_lie_derivative_taped_matches_fd(vnet):
    rng = np.random.default_rng(14)
    params = vnet.init_params(rng)
    X = rng.normal(size=(4, 2))
    F = rng.normal(size=(4, 2))

    def total(p):
        _, lie = lie_derivative(lambda xx: vnet.value(p, xx), X, F)
        return float(np.sum(lie))

    tape = Tape()
    leaves = tape.leaves(params)
    _, lie = lie_derivative(lambda xx: vnet.value(leaves, xx), X, F)
    assert isinstance(lie, Tensor)
    gs = grad(T.tsum(lie), leaves)
    eps = 1e-6
    for name in ("V.W0", "V.U1"):
        it = np.nditer(params[name], flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            hi = params.clone()
            lo = params.clone()
            hi[name][idx] += eps
            lo[name][idx] -= eps
            fd = (total(hi) - total(lo)) / (2 * eps)
            assert gs[name][idx] == pytest.approx(fd, rel=2e-5, abs=1e-7)


def test_lie_derivative_against_explicit_gradient(vnet):
    rng = np.random.default_rng(15)
    params = vnet.init_params(rng)
    x = rng.normal(size=2)
    f = rng.normal(size=2)
    _, lie = lie_derivative(lambda xx: vnet.value(params, xx),
                            x.reshape(1, 2), f.reshape(1, 2))
    assert lie[0] == pytest.approx(float(vnet.gradient(params, x) @ f), rel=1e-12)
