import math

import numpy as np
import pytest

from shapectl.ode import SolverConfig, SolverError, dopri5, dopri5_fixed, rk4, rms_norm, uniform_grid
from shapectl.ph import PendulumParams, pendulum, vector_field

E = 2.718281828459045
INV_E = 0.36787944117144233


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(rtol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(max_steps=0)
    with pytest.raises(ValueError):
        SolverConfig(min_factor=2.0)


def test_zero_field_constant():
    tr = dopri5(lambda t, x: np.zeros_like(x), [1.5, -2.0], (0.0, 3.0))
    np.testing.assert_array_equal(tr.final, [1.5, -2.0])
    tr = rk4(lambda t, x: np.zeros_like(x), [1.5], uniform_grid(0, 1, 0.1))
    np.testing.assert_array_equal(tr.states, 1.5)


@pytest.mark.parametrize("tol", [1e-4, 1e-6, 1e-8, 1e-10])
def test_exponential_growth(tol):
    tr = dopri5(lambda t, x: x, [1.0], (0.0, 1.0), SolverConfig(rtol=tol, atol=tol))
    assert abs(tr.final[0] - E) < 10 * tol
    assert np.all(np.diff(tr.times) > 0)


def test_backward_integration():
    tr = dopri5(lambda t, x: x, [E], (1.0, 0.0), SolverConfig(rtol=1e-10, atol=1e-10))
    assert tr.final[0] == pytest.approx(1.0, abs=1e-9)
    assert np.all(np.diff(tr.times) < 0)


def test_time_dependent_field():
    tr = dopri5(lambda t, x: np.array([math.cos(t)]), [0.0], (0.0, 2.0), SolverConfig(1e-10, 1e-10))
    assert tr.final[0] == pytest.approx(math.sin(2.0), abs=1e-9)


def test_round_trip_returns_to_start():
    cfg = SolverConfig(rtol=1e-8, atol=1e-8)
    plant = pendulum().to_ph()
    f = lambda t, x: vector_field(plant, x, [0.0])
    x0 = np.array([1.2, -0.4])
    fwd = dopri5(f, x0, (0.0, 2.0), cfg)
    back = dopri5(f, fwd.final, (2.0, 0.0), cfg)
    assert np.max(np.abs(back.final - x0)) < 100 * (cfg.rtol + cfg.atol)


def test_rk4_decay_and_order():
    tr = rk4(lambda t, x: -x, [1.0], uniform_grid(0, 1, 1e-3))
    assert abs(tr.final[0] - INV_E) < 1e-9
    errs = [abs(rk4(lambda t, x: x, [1.0], uniform_grid(0, 1, h)).final[0] - E) for h in (0.1, 0.05)]
    assert 14 < errs[0] / errs[1] < 18


def test_accepted_steps_meet_tolerance():
    tr = dopri5(lambda t, x: np.array([x[1], -math.sin(x[0])]), [2.5, 0.0], (0.0, 20.0), SolverConfig(1e-7, 1e-7))
    assert tr.errors.size == tr.n_steps
    assert tr.errors.max() <= 1.0


def test_undamped_energy_drift():
    # global drift grows with the energy level; this state sits at H = 1.32
    plant = pendulum(PendulumParams(beta=0.0))
    sys_ = plant.to_ph()
    x0 = np.array([0.5, 0.5])
    tr = dopri5(lambda t, x: vector_field(sys_, x, [0.0]), x0, (0.0, 10.0), SolverConfig(1e-8, 1e-8))
    assert abs(sys_.H(tr.final) - sys_.H(x0)) < 1e-6


def test_dense_output_matches_steps_and_exact():
    cfg = SolverConfig(rtol=1e-8, atol=1e-8)
    tr = dopri5(lambda t, x: np.array([x[1], -x[0]]), [1.0, 0.0], (0.0, 5.0), cfg, dense=True)
    np.testing.assert_allclose(tr(tr.times), tr.states, atol=1e-13)
    ts = np.linspace(0, 5, 97)
    np.testing.assert_allclose(tr(ts)[:, 0], np.cos(ts), atol=1e-6)
    with pytest.raises(ValueError):
        tr(5.5)


def test_dense_output_backward():
    tr = dopri5(lambda t, x: -x, [1.0], (2.0, 0.0), SolverConfig(1e-9, 1e-9), dense=True)
    assert tr(1.0)[0] == pytest.approx(math.exp(1.0), rel=1e-6)


def test_failures_are_reported():
    with pytest.raises(SolverError, match="maximum number of steps"):
        dopri5(lambda t, x: x, [1.0], (0.0, 10.0), SolverConfig(max_steps=3))
    with pytest.raises(SolverError, match="non-finite"):
        dopri5(lambda t, x: np.array([math.nan]), [1.0], (0.0, 1.0))
    with pytest.raises(SolverError):
        # blows up in finite time at t = 1
        dopri5(lambda t, x: x * x, [1.0], (0.0, 2.0))
    with pytest.raises(SolverError), np.errstate(over="ignore"):
        rk4(lambda t, x: x * x, [1.0], uniform_grid(0, 2, 0.1))


def test_custom_norm_is_used():
    calls = []

    def norm(v):
        calls.append(v.size)
        return rms_norm(v)

    dopri5(lambda t, x: -x, [1.0, 2.0], (0.0, 1.0), norm=norm)
    assert calls and all(c == 2 for c in calls)


def test_fixed_grid_replays_adaptive_solution():
    f = lambda t, x: np.array([x[1], -math.sin(x[0])])
    tr = dopri5(f, [1.0, 0.0], (0.0, 3.0), SolverConfig(1e-9, 1e-9))
    again = dopri5_fixed(f, [1.0, 0.0], tr.times)
    np.testing.assert_allclose(again.states, tr.states, rtol=0, atol=1e-14)


def test_record_false_keeps_endpoints():
    tr = dopri5(lambda t, x: -x, [1.0], (0.0, 1.0), record=False)
    assert len(tr.times) == 2
    assert tr.n_steps > 1


def test_csv_export(tmp_path):
    tr = rk4(lambda t, x: -x, [1.0, 2.0], uniform_grid(0, 1, 0.25))
    path = tmp_path / "traj.csv"
    tr.to_csv(path, controls=np.arange(5.0))
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x0,x1,u"
    assert len(lines) == 6
    assert float(lines[-1].split(",")[1]) == tr.final[0]
