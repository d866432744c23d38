import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapectl import neural
from shapectl.neural import MlpSpec

H = 1e-5
LOG2 = 0.6931471805599453

SPECS = [
    MlpSpec(1, (8, 8), ("softplus", "tanh")),
    MlpSpec(3, (6,), ("softplus",), 1, "softplus"),
    MlpSpec(2, (5, 4, 3), ("softplus", "softplus", "tanh")),
    MlpSpec(4, (5, 5), ("softplus", "softplus"), 2, "softplus"),
]


def central(fun, x, h=H):
    x = np.asarray(x, dtype=float)
    out = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        out.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.array(out)


def rel_err(a, b):
    return np.linalg.norm(np.ravel(a) - np.ravel(b)) / max(np.linalg.norm(np.ravel(b)), 1e-12)


def draw(spec, seed):
    rng = np.random.default_rng(seed)
    theta = neural.xavier_init(spec, rng) + 0.1 * rng.normal(size=spec.n_params)
    z = rng.normal(size=spec.input_dim)
    return theta, z


def one_unit(act, W=1.0, b=0.0, w=1.0):
    spec = MlpSpec(1, (1,), (act,))
    return spec, np.array([W, b, w, 0.0])


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec(1, (4, 4), ("tanh",))
    with pytest.raises(ValueError):
        MlpSpec(1, (4,), ("relu",))
    with pytest.raises(ValueError):
        MlpSpec(0, (4,), ("tanh",))
    assert MlpSpec(1, (64, 64), ("softplus", "tanh")).n_params == 64 + 64 + 64 * 64 + 64 + 64 + 1


def test_forward_examples():
    spec, theta = one_unit("tanh")
    assert neural.forward(spec, theta, [0.0])[0] == 0.0
    spec, theta = one_unit("softplus", W=0.0)
    for z in (-3.0, 0.0, 7.0):
        assert neural.forward(spec, theta, [z])[0] == pytest.approx(LOG2, rel=1e-15)
    spec = SPECS[2]
    theta = neural.zero_last_layer(spec, draw(spec, 0)[0])
    np.testing.assert_array_equal(neural.forward(spec, theta, np.ones((5, 2))), 0.0)


def test_forward_rejects_nonfinite():
    spec, theta = one_unit("tanh")
    with pytest.raises(ValueError):
        neural.forward(spec, theta, [math.nan])
    with pytest.raises(ValueError):
        neural.forward(spec, theta, [1.0, 2.0])


def test_unpack_layer_major_order():
    spec = MlpSpec(2, (3,), ("tanh",))
    theta = np.arange(spec.n_params, dtype=float)
    (W1, b1), (W2, b2) = neural.unpack(spec, theta)
    np.testing.assert_array_equal(W1, [[0, 1], [2, 3], [4, 5]])
    np.testing.assert_array_equal(b1, [6, 7, 8])
    np.testing.assert_array_equal(W2, [[9, 10, 11]])
    np.testing.assert_array_equal(b2, [12])


def test_grad_input_examples():
    spec, theta = one_unit("tanh")
    assert neural.grad_input(spec, theta, [0.0])[0, 0] == pytest.approx(1.0)
    spec = SPECS[0]
    theta = neural.zero_last_layer(spec, draw(spec, 1)[0])
    np.testing.assert_array_equal(neural.grad_input(spec, theta, [0.3]), 0.0)


@pytest.mark.parametrize("spec", SPECS)
@pytest.mark.parametrize("seed", range(5))
def test_grad_input_matches_fd(spec, seed):
    theta, z = draw(spec, seed)
    J = neural.grad_input(spec, theta, z)
    fd = central(lambda zz: neural.forward(spec, theta, zz), z).T
    assert rel_err(J, fd) < 1e-6


@pytest.mark.parametrize("spec", [s for s in SPECS if s.output_dim == 1])
@pytest.mark.parametrize("seed", range(5))
def test_input_hessian_matches_fd(spec, seed):
    theta, z = draw(spec, seed)
    Hs = neural.input_hessian(spec, theta, z)
    fd = central(lambda zz: neural.input_gradient(spec, theta, zz), z)
    assert rel_err(Hs, fd) < 1e-5
    np.testing.assert_allclose(Hs, Hs.T, atol=1e-12)


def test_one_unit_softplus_second_derivative():
    spec, theta = one_unit("softplus", W=1.3, b=-0.2, w=0.7)
    z = np.array([0.4])
    Hs, _ = neural.second_derivs(spec, theta, z)
    fd = central(lambda zz: neural.input_gradient(spec, theta, zz), z)
    assert rel_err(Hs, fd) < 1e-5


@pytest.mark.parametrize("spec", [s for s in SPECS if s.output_dim == 1])
@pytest.mark.parametrize("seed", range(5))
def test_mixed_derivative_matches_fd(spec, seed):
    theta, z = draw(spec, seed)
    v = np.random.default_rng(seed + 100).normal(size=z.size)
    _, mixed = neural.second_derivs(spec, theta, z)
    fd = central(lambda th: float(v @ neural.input_gradient(spec, th, z)), theta)
    assert rel_err(mixed(v), fd) < 1e-5


def test_second_derivs_zero_last_layer():
    spec = SPECS[2]
    theta = neural.zero_last_layer(spec, draw(spec, 2)[0])
    Hs, mixed = neural.second_derivs(spec, theta, np.array([0.3, -0.1]))
    np.testing.assert_array_equal(Hs, 0.0)
    g = mixed(np.array([1.0, 2.0]))
    n_last = spec.shapes[-1][0] * spec.shapes[-1][1]
    np.testing.assert_array_equal(g[:-n_last - 1], 0.0)


@pytest.mark.parametrize("spec", SPECS)
def test_vjp_params_matches_fd(spec):
    theta, z = draw(spec, 7)
    c = np.random.default_rng(8).normal(size=spec.output_dim)
    g = neural.vjp_params(spec, theta, z, c)
    fd = central(lambda th: float(c @ neural.forward(spec, th, z)), theta)
    assert rel_err(g, fd) < 1e-6


def test_vjp_params_tiny_net_every_parameter():
    spec = MlpSpec(2, (2,), ("tanh",))
    theta, z = draw(spec, 9)
    g = neural.vjp_params(spec, theta, z, np.array([1.0]))
    fd = central(lambda th: neural.forward(spec, th, z)[0], theta)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-10)


def test_vjp_linearity_and_zero():
    spec = SPECS[3]
    theta, z = draw(spec, 4)
    c = np.array([0.3, -1.1])
    np.testing.assert_array_equal(neural.vjp_params(spec, theta, z, 0 * c), 0.0)
    np.testing.assert_allclose(neural.vjp_params(spec, theta, z, 2.5 * c),
                               2.5 * neural.vjp_params(spec, theta, z, c), rtol=1e-14)


def test_batched_vjp_sums_rows():
    spec = SPECS[1]
    theta, _ = draw(spec, 5)
    Z = np.random.default_rng(1).normal(size=(4, 3))
    C = np.random.default_rng(2).normal(size=(4, 1))
    total = neural.vjp_params(spec, theta, Z, C)
    each = sum(neural.vjp_params(spec, theta, Z[i], C[i]) for i in range(4))
    np.testing.assert_allclose(total, each, rtol=1e-12)


def test_xavier_deterministic_and_scaled():
    spec = MlpSpec(64, (64, 64), ("softplus", "tanh"))
    a = neural.xavier_init(spec, np.random.default_rng(42))
    b = neural.xavier_init(spec, np.random.default_rng(42))
    np.testing.assert_array_equal(a, b)
    W, bias = neural.unpack(spec, a)[1]
    assert abs(W.var() / (2.0 / 128) - 1.0) < 0.2
    np.testing.assert_array_equal(bias, 0.0)


def test_output_bound_examples():
    spec = MlpSpec(1, (2,), ("tanh",))
    theta = np.array([0.5, -0.3, 0.1, 0.2, 1.0, -2.0, 0.0])
    assert neural.output_bound(spec, theta) == 3.0
    assert neural.output_bound(spec, neural.zero_last_layer(spec, theta)) == 0.0
    with pytest.raises(ValueError):
        neural.output_bound(MlpSpec(1, (2,), ("softplus",)), theta)


def test_output_bound_holds_under_random_search():
    spec = MlpSpec(1, (16, 16), ("softplus", "tanh"))
    rng = np.random.default_rng(11)
    for _ in range(5):
        theta = rng.normal(size=spec.n_params)
        z = rng.uniform(-50, 50, size=(20000, 1))
        assert np.abs(neural.forward(spec, theta, z)).max() <= neural.output_bound(spec, theta)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-10, 10))
def test_softplus_output_strictly_positive(seed, scale):
    spec = SPECS[1]
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=spec.n_params)
    z = rng.normal(size=(10, 3)) * scale
    assert np.all(neural.forward(spec, theta, z) > 0)


def test_softplus_output_never_negative_at_extremes():
    # far below -745 the logistic tail underflows to 0.0, never below
    spec = SPECS[1]
    theta = np.random.default_rng(0).normal(size=spec.n_params) * 3
    z = np.random.default_rng(1).normal(size=(1000, 3)) * 1e3
    assert np.all(neural.forward(spec, theta, z) >= 0)


def test_binary_checkpoint_round_trip(tmp_path):
    spec = SPECS[2]
    theta = draw(spec, 3)[0]
    neural.save_params(tmp_path / "p.bin", spec, theta)
    back = neural.load_params(tmp_path / "p.bin", spec)
    assert back.tobytes() == theta.tobytes()
    with pytest.raises(ValueError):
        neural.load_params(tmp_path / "p.bin", SPECS[0])
    raw = (tmp_path / "p.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        neural.load_params(tmp_path / "short.bin", spec)


def test_text_checkpoint_round_trip(tmp_path):
    spec = SPECS[3]
    theta = draw(spec, 6)[0]
    neural.save_text(tmp_path / "p.json", spec, theta)
    spec2, back = neural.load_text(tmp_path / "p.json")
    assert spec2 == spec
    assert back.tobytes() == theta.tobytes()
