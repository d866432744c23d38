import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapectl import neural
from shapectl.ode import rk4, uniform_grid
from shapectl.ph import (ContractError, MechanicalPH, PendulumParams, hamiltonian, left_annihilator,
                         matching_residual, passive_output, pendulum, power_balance_residual, vector_field)

# values worked out with mpmath at 30 digits
VF_HALF_PI = -10.5953981633974483
H_UPRIGHT = 22.0874011002723397

angles = st.floats(-2 * math.pi, 2 * math.pi, allow_nan=False)


@pytest.fixture
def sys_():
    return pendulum().to_ph()


def test_vector_field_examples(sys_):
    np.testing.assert_array_equal(vector_field(sys_, [0.0, 0.0], [0.0]), [0.0, 0.0])
    np.testing.assert_allclose(vector_field(sys_, [math.pi / 2, 0.0], [0.0]), [0.0, VF_HALF_PI], rtol=1e-15)
    np.testing.assert_allclose(vector_field(sys_, [0.0, 1.0], [0.0]), [1.0, -0.01], rtol=1e-15)


def test_vector_field_input_enters_momentum(sys_):
    np.testing.assert_allclose(vector_field(sys_, [0.0, 0.0], [2.5]), [0.0, 2.5])


@pytest.mark.parametrize("x, u", [([0.0], [0.0]), ([0.0, 0.0, 0.0], [0.0]), ([0.0, 0.0], [0.0, 1.0])])
def test_vector_field_rejects_bad_shapes(sys_, x, u):
    with pytest.raises(ContractError):
        vector_field(sys_, x, u)


def test_passive_output(sys_):
    assert passive_output(sys_, [1.3, 0.0])[0] == 0.0
    assert passive_output(sys_, [0.0, 2.0])[0] == pytest.approx(2.0)
    assert passive_output(sys_, [1.0, -0.5])[0] == pytest.approx(-0.5)


def test_passive_output_is_velocity_times_b():
    plant = MechanicalPH(1, [[2.0]], lambda q: 0 * q, lambda q: 0 * q, [[0.0]], [[3.0]])
    assert passive_output(plant.to_ph(), [0.4, 1.0])[0] == pytest.approx(3.0 * 0.5)


def test_hamiltonian_examples():
    plant = pendulum()
    assert hamiltonian(plant, 0.0, 0.0) == 0.0
    assert hamiltonian(plant, math.pi, 0.0) == pytest.approx(H_UPRIGHT, rel=1e-15)
    assert hamiltonian(plant, 0.0, 1.0) == pytest.approx(0.5)


def test_power_balance_examples():
    lossless = pendulum(PendulumParams(beta=0.0)).to_ph()
    assert power_balance_residual(lossless, [1.1, -0.7], [0.0]) == pytest.approx(0.0, abs=1e-12)
    assert power_balance_residual(pendulum().to_ph(), [0.0, 1.0], [0.0]) == pytest.approx(-0.01)
    assert power_balance_residual(pendulum().to_ph(), [2.0, 0.0], [3.0]) == pytest.approx(0.0, abs=1e-12)


def test_power_balance_nonpositive_on_grid(sys_):
    rng = np.random.default_rng(0)
    xs = rng.uniform(-2 * math.pi, 2 * math.pi, (1000, 2))
    us = rng.normal(size=(1000, 1))
    res = [power_balance_residual(sys_, x, u) for x, u in zip(xs, us)]
    assert max(res) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(angles, angles)
def test_dissipation_matrix_nsd(q, p):
    F = pendulum().F(np.array([q, p]))
    assert np.linalg.eigvalsh(F + F.T).max() <= 1e-15


def test_canonical_block_form():
    plant = pendulum()
    F = plant.F(np.zeros(2))
    np.testing.assert_array_equal(F, [[0.0, 1.0], [-1.0, -0.01]])
    np.testing.assert_array_equal(plant.g(np.zeros(2)), [[0.0], [1.0]])


def test_mechanical_validation():
    v = lambda q: 0 * q
    with pytest.raises(ContractError):
        MechanicalPH(1, [[-1.0]], v, v, [[0.0]], [[1.0]])
    with pytest.raises(ContractError):
        MechanicalPH(1, [[1.0]], v, v, [[0.5]], [[1.0]])
    with pytest.raises(ContractError):
        MechanicalPH(1, [[1.0]], v, v, [[0.0]], [[0.0]])
    with pytest.raises(ContractError):
        MechanicalPH(1, lambda q: np.eye(1), v, v, [[0.0]], [[1.0]])
    with pytest.raises(ContractError):
        PendulumParams(m=0.0)
    with pytest.raises(ContractError):
        PendulumParams(beta=-0.1)


def test_left_annihilator():
    g = np.array([[0.0], [1.0]])
    gp = left_annihilator(g)
    assert gp.shape == (1, 2)
    np.testing.assert_allclose(gp @ g, 0.0, atol=1e-15)
    with pytest.raises(ContractError):
        left_annihilator(np.zeros((2, 1)))


def test_matching_identity_shaping_is_zero(sys_):
    res = matching_residual(sys_, sys_.grad_H, np.array([0.3, -1.2]))
    np.testing.assert_array_equal(res, 0.0)


def test_matching_detects_momentum_shaping(sys_):
    grad_star = lambda x: sys_.grad_H(x) + np.array([0.0, x[1]])
    res = matching_residual(sys_, grad_star, np.array([0.0, 1.0]))
    assert np.abs(res).max() > 0.5


def test_matching_potential_shaping_random():
    plant = pendulum()
    sys_ = plant.to_ph()
    spec = neural.MlpSpec(1, (16, 16), ("softplus", "tanh"))
    rng = np.random.default_rng(3)
    for _ in range(20):
        theta = neural.xavier_init(spec, rng)
        gv = lambda x: sys_.grad_H(x) + np.array([neural.input_gradient(spec, theta, x[:1])[0], 0.0])
        x = rng.uniform(-2 * math.pi, 2 * math.pi, 2)
        assert np.abs(matching_residual(sys_, gv, x, plant.annihilator())).max() < 1e-12


def test_matching_rejects_bad_annihilator(sys_):
    with pytest.raises(ContractError):
        matching_residual(sys_, sys_.grad_H, np.zeros(2), annihilator=np.array([[0.0, 1.0]]))
    with pytest.raises(ContractError):
        matching_residual(sys_, sys_.grad_H, np.zeros(2), annihilator=np.zeros((1, 3)))


def test_energy_conserved_by_rk4_fourth_order():
    plant = pendulum(PendulumParams(beta=0.0))
    sys_ = plant.to_ph()
    f = lambda t, x: vector_field(sys_, x, [0.0])
    x0 = np.array([1.0, 0.5])
    drift = []
    for h in (0.02, 0.01):
        tr = rk4(f, x0, uniform_grid(0.0, 2.0, h))
        drift.append(abs(sys_.H(tr.final) - sys_.H(x0)))
    assert drift[1] < 1e-6
    assert 10 < drift[0] / drift[1] < 40
